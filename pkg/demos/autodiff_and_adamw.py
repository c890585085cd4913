"""
Autodiff and AdamW on a toy regression
======================================

Build a two-layer network out of graph tensors, check its gradients against
central differences, then fit it with AdamW.
"""

import numpy as np

from deskbert import tensor as T
from deskbert.optim import AdamWState, adamw_step, clip_grad_norm

rng = np.random.default_rng(0)
x = rng.standard_normal((64, 3))
y = np.sin(x @ np.array([1.0, -2.0, 0.5]))[:, None]

params = {
    "w1": T.Tensor(rng.standard_normal((3, 16)) * 0.5, requires_grad=True),
    "b1": T.Tensor(np.zeros(16), requires_grad=True),
    "w2": T.Tensor(rng.standard_normal((16, 1)) * 0.5, requires_grad=True),
}


def loss():
    h = T.gelu(T.linear(T.Tensor(x), params["w1"], params["b1"]))
    err = h @ params["w2"] - T.Tensor(y)
    return T.mean(err * err)


# every coordinate of every parameter, float64 throughout
print("gradcheck agreement:", T.gradcheck(loss, list(params.values()), eps=1e-6))

state = AdamWState(lr=3e-2, weight_decay=0.01)
for step in range(1, 301):
    value = loss()
    grads, norm = clip_grad_norm(T.grads_for(params, T.backward(value)), 1.0)
    adamw_step(params, grads, state)
    if step in (1, 10, 100, 300):
        print(f"step {step:>3}  loss {value.item():.4f}  grad norm {norm:.3f}")
