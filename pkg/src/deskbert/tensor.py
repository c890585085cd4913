"""Dense tensors with reverse-mode automatic differentiation.

Every forward op records its parents and a closure mapping the output
gradient to one gradient per parent. :func:`backward` walks the graph in
reverse topological order and returns gradients for the leaves; it never
mutates the graph, so the same graph can be differentiated again.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NonFiniteError(FloatingPointError):
    """A forward value or a gradient contained NaN or Inf."""


class Tensor:
    """An n-dimensional float array that may take part in a gradient graph."""

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self._op}{label} shape={self.shape} dtype={self.dtype})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def detach(self):
        return stop_gradient(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def as_tensor(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    arr = np.asarray(value, dtype=dtype)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DEFAULT_DTYPE)
    return Tensor(arr)


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by op '{op}'")


def _make(data, parents, backward_fn, op):
    _check_finite(data, op)
    out = Tensor(data)
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# graph traversal


def topological_order(root):
    """Nodes reachable from ``root`` that require grad, parents before children."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Reverse-mode gradients of a scalar ``loss``.

    Returns a dict mapping each reachable leaf tensor that requires grad to
    its gradient array. Leaves that the loss does not depend on are absent;
    use :func:`grads_for` to fill them with zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = topological_order(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    leaf_grads = {}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient at node {node!r} (id {id(node)})")
        if node._backward is None:
            node.grad = g
            leaf_grads[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg
    return leaf_grads


def grads_for(params, grads):
    """Gradients for a name->Tensor mapping, zeros where the loss did not reach."""
    return {
        name: grads[p] if p in grads else np.zeros_like(p.data)
        for name, p in params.items()
    }


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data / b.data, (a, b), bw, "div")


def matmul(a, b):
    """Batched matrix product over the last two axes (both operands ndim >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def exp(x):
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return _make(out, (x,), bw, "exp")


def log(x):
    def bw(g):
        return (g / x.data,)

    return _make(np.log(x.data), (x,), bw, "log")


def sigmoid(x):
    # split on sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), bw, "sigmoid")


def tanh(x):
    out = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _make(out, (x,), bw, "tanh")


def gelu(x):
    """Exact GELU, x * Phi(x)."""
    z = x.data
    cdf = 0.5 * (1.0 + erf(z / _SQRT_2))
    out = (z * cdf).astype(z.dtype)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
        return ((g * (cdf + z * pdf)).astype(z.dtype),)

    return _make(out, (x,), bw, "gelu")


# ---------------------------------------------------------------------------
# shape and reduction


def tsum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def reshape(x, shape):
    def bw(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inverse),)

    return _make(np.transpose(x.data, axes), (x,), bw, "transpose")


def getitem(x, index):
    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(x.data[index]), (x,), bw, "getitem")


def stop_gradient(x):
    """Same values, cut out of the graph."""
    out = Tensor(x.data)
    out._op = "stop_gradient"
    return out


# ---------------------------------------------------------------------------
# neural-network primitives


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def layer_norm(x, gamma, beta, eps=1e-7):
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        n = x.shape[-1]
        gx_hat = g * gamma.data
        gx = inv / n * (
            n * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        ggamma = _unbroadcast(g * xhat, gamma.shape)
        gbeta = _unbroadcast(g, beta.shape)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw, "layer_norm")


def embedding(table, ids):
    """Gather rows of ``table`` at integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")

    def bw(g):
        flat = g.reshape(-1, table.shape[1])
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), flat)
        return (full,)

    return _make(table.data[ids], (table,), bw, "embedding")


def take_along_last(x, index):
    """``out[..., i, j] = x[..., i, index[i, j]]`` for a 2-D integer ``index``."""
    index = np.asarray(index)
    rows, cols = index.shape
    if x.shape[-2] != rows:
        raise ValueError(f"index has {rows} rows, tensor has {x.shape[-2]}")
    lead = x.shape[:-2]
    width = x.shape[-1]
    full_index = np.broadcast_to(index, lead + index.shape)
    out = np.take_along_axis(x.data, full_index, axis=-1)

    def bw(g):
        m = int(np.prod(lead)) if lead else 1
        base = (np.arange(m)[:, None, None] * rows + np.arange(rows)[None, :, None]) * width
        flat = (base + index[None]).ravel()
        summed = np.bincount(flat, weights=g.reshape(-1), minlength=m * rows * width)
        return (summed.reshape(x.shape).astype(x.dtype),)

    return _make(out, (x,), bw, "take_along_last")


def dropout(x, rate, rng, training=True):
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep))


def cross_entropy(logits, targets, ignore_index=-100):
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits).

    ``logits`` has shape (..., C); rows whose target equals ``ignore_index``
    are excluded from the mean.
    """
    targets = np.asarray(targets)
    z = logits.data.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    if t.shape[0] != z.shape[0]:
        raise ValueError("targets do not match logits rows")
    keep = t != ignore_index
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross_entropy over zero targets")
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, t[rows]].sum() / n

    def bw(g):
        grad = np.exp(logp)
        grad[rows, t[rows]] -= 1.0
        grad[~keep] = 0.0
        return ((grad * (g / n)).reshape(logits.shape).astype(logits.dtype),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


def bce_with_logits(logits, targets, mask=None):
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 ``targets``."""
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    m = np.ones_like(z) if mask is None else np.asarray(mask, dtype=z.dtype)
    if y.shape != z.shape or m.shape != z.shape:
        raise ValueError(f"shape mismatch: logits {z.shape}, targets {y.shape}, mask {m.shape}")
    n = m.sum()
    if n == 0:
        raise ValueError("bce_with_logits over an empty mask")
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = (per * m).sum() / n

    def bw(g):
        p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))
        return (((p - y) * m * (g / n)).astype(z.dtype),)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), bw, "bce_with_logits")


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# numeric oracle


def finite_difference_gradient(f, params, eps=1e-4, coords=None):
    """Central-difference gradient of scalar ``f()`` w.r.t. each tensor in ``params``.

    ``f`` is re-evaluated with one coordinate perturbed in place at a time.
    ``coords`` optionally maps a param index to a list of flat coordinates to
    probe; unprobed coordinates are left as NaN in the result.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    out = []
    for k, p in enumerate(params):
        arr = p.data if isinstance(p, Tensor) else p
        flat = arr.reshape(-1)
        g = np.full(flat.shape, np.nan, dtype=np.float64)
        probe = range(flat.size) if coords is None or k not in coords else coords[k]
        for i in probe:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(_scalar(f()))
            flat[i] = orig - eps
            lo = float(_scalar(f()))
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NonFiniteError(f"f returned a non-finite value at coordinate {i} of param {k}")
            g[i] = (hi - lo) / (2.0 * eps)
        out.append(g.reshape(arr.shape))
    return out


def _scalar(v):
    if isinstance(v, Tensor):
        return v.data.item()
    return np.asarray(v).item()


def relative_error(analytic, numeric, floor=1e-8):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradcheck(f, params, eps=1e-5, rtol=1e-3, atol=1e-7, coords=None):
    """Fraction of probed coordinates where backward() agrees with central differences.

    A coordinate agrees when its relative error is within ``rtol`` or its
    absolute error is within ``atol`` (for gradients that are zero up to
    rounding).
    """
    grads = backward(f())
    numeric = finite_difference_gradient(f, params, eps=eps, coords=coords)
    ok = total = 0
    for p, num in zip(params, numeric):
        ana = grads.get(p, np.zeros_like(p.data)).astype(np.float64)
        probed = ~np.isnan(num)
        err = relative_error(ana[probed], num[probed])
        close = (err <= rtol) | (np.abs(ana[probed] - num[probed]) <= atol)
        ok += int(close.sum())
        total += int(probed.sum())
    return ok / max(total, 1)
