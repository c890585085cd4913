"""AdamW with decoupled weight decay, global-norm clipping and LR schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state, lr=None):
    """One bias-corrected Adam update plus decoupled decay ``p -= lr * wd * p``.

    ``params`` maps names to :class:`~deskbert.tensor.Tensor` leaves whose
    ``data`` is replaced with the updated array; ``grads`` maps the same
    names to gradient arrays. Returns the advanced state.
    """
    lr = state.lr if lr is None else lr
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    dtype_of = {name: params[name].data.dtype for name in grads}
    for name in sorted(grads):
        p = params[name]
        dt = dtype_of[name]
        g = grads[name].astype(dt, copy=False)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = (b1 * m + (1.0 - b1) * g).astype(dt)
        v = (b2 * v + (1.0 - b2) * g * g).astype(dt)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / c1
        v_hat = v / c2
        update = lr * m_hat / (np.sqrt(v_hat) + state.eps)
        p.data = (p.data - lr * state.weight_decay * p.data - update).astype(dt)
    return state


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_grad_norm(grads, max_norm=1.0):
    """Rescale ``grads`` so their joint L2 norm is at most ``max_norm``.

    Returns ``(clipped, norm_before)``. ``max_norm=None`` disables clipping.
    """
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}, norm


def linear_warmup_decay(step, peak_lr, total_steps, warmup_frac=0.06):
    """LR at 1-based ``step``: linear ramp to ``peak_lr`` then linear decay to 0."""
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step <= warmup:
        return peak_lr * step / warmup
    remaining = max(1, total_steps - warmup)
    return peak_lr * max(0.0, (total_steps - step) / remaining)
