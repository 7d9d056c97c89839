"""Array-valued reverse-mode autodiff used by the batched model paths.

This is the production engine: a small set of numpy ops with hand-written
vector-Jacobian products, enough to express the full forward pass and all
loss terms.  The scalar tape in :mod:`gibbsnet.autodiff` is the slow,
independent twin against which this engine is cross-checked.

Shapes are explicit ndarray shapes (no general broadcasting beyond rows
against a bias row or a scalar).  Use :func:`no_grad` around inference to
skip closure creation.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

__all__ = ["Var", "no_grad", "backward", "const"]

_grad_enabled = True


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Var:
    __slots__ = ("value", "grad", "parents", "vjp", "requires_grad")

    def __init__(self, value, requires_grad=False, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, grad={self.requires_grad})"

    # operator sugar (scalar/elementwise only)
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def const(value) -> Var:
    return Var(value)


def _lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _make(value, parents, vjp) -> Var:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Var(value, True, parents, vjp)
    return Var(value)


def _accum(var: Var, g) -> None:
    if var.requires_grad:
        var.grad = g.copy() if var.grad is None else var.grad + g


def _unbroadcast(g, shape):
    """Sum g down to `shape` (supports row-bias and scalar broadcasting)."""
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    # sum over leading extra axes, then over broadcast (size-1) axes
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Var) -> None:
    """Reverse sweep from a scalar loss; accumulates into .grad."""
    if not loss.requires_grad:
        raise ValueError("loss does not require grad")
    topo: list[Var] = []
    seen = set()
    stack: list[tuple[Var, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.value)
    for node in reversed(topo):
        if node.vjp is not None and node.grad is not None:
            node.vjp(node.grad)


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    a, b = _lift(a), _lift(b)
    out_val = a.value + b.value

    def vjp(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(g, b.value.shape))

    return _make(out_val, (a, b), vjp)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    out_val = a.value - b.value

    def vjp(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(-g, b.value.shape))

    return _make(out_val, (a, b), vjp)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    out_val = a.value * b.value

    def vjp(g):
        _accum(a, _unbroadcast(g * b.value, a.value.shape))
        _accum(b, _unbroadcast(g * a.value, b.value.shape))

    return _make(out_val, (a, b), vjp)


def div(a, b):
    a, b = _lift(a), _lift(b)
    inv = 1.0 / b.value
    out_val = a.value * inv

    def vjp(g):
        _accum(a, _unbroadcast(g * inv, a.value.shape))
        _accum(b, _unbroadcast(-g * out_val * inv, b.value.shape))

    return _make(out_val, (a, b), vjp)


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    out_val = a.value @ b.value

    def vjp(g):
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    return _make(out_val, (a, b), vjp)


def exp(a):
    a = _lift(a)
    out_val = np.exp(a.value)

    def vjp(g):
        _accum(a, g * out_val)

    return _make(out_val, (a,), vjp)


def log(a):
    a = _lift(a)
    out_val = np.log(a.value)

    def vjp(g):
        _accum(a, g / a.value)

    return _make(out_val, (a,), vjp)


def _sigmoid_np(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def silu_np(z):
    return z * _sigmoid_np(z)


def dsilu_np(z):
    s = _sigmoid_np(z)
    return s * (1.0 + z * (1.0 - s))


def d2silu_np(z):
    s = _sigmoid_np(z)
    return s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s))


def d3silu_np(z):
    s = _sigmoid_np(z)
    sp = s * (1.0 - s)
    return 3.0 * sp * (1.0 - 2.0 * s) + z * sp * ((1.0 - 2.0 * s) ** 2 - 2.0 * sp)


def sigmoid(a):
    a = _lift(a)
    s = _sigmoid_np(a.value)

    def vjp(g):
        _accum(a, g * s * (1.0 - s))

    return _make(s, (a,), vjp)


def silu(a):
    a = _lift(a)
    out_val = silu_np(a.value)

    def vjp(g):
        _accum(a, g * dsilu_np(a.value))

    return _make(out_val, (a,), vjp)


def dsilu(a):
    """SiLU'(a) as a differentiable op (needed by dual-number channels)."""
    a = _lift(a)
    out_val = dsilu_np(a.value)

    def vjp(g):
        _accum(a, g * d2silu_np(a.value))

    return _make(out_val, (a,), vjp)


def d2silu(a):
    """SiLU''(a) as a differentiable op."""
    a = _lift(a)
    out_val = d2silu_np(a.value)

    def vjp(g):
        _accum(a, g * d3silu_np(a.value))

    return _make(out_val, (a,), vjp)


def relu(a):
    a = _lift(a)
    mask = a.value > 0.0
    out_val = np.where(mask, a.value, 0.0)

    def vjp(g):
        _accum(a, g * mask)

    return _make(out_val, (a,), vjp)


def softplus(a):
    a = _lift(a)
    out_val = np.where(a.value > 30.0, a.value, np.log1p(np.exp(np.minimum(a.value, 30.0))))

    def vjp(g):
        _accum(a, g * _sigmoid_np(a.value))

    return _make(out_val, (a,), vjp)


def vsum(a, axis=None, keepdims=False):
    a = _lift(a)
    out_val = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.value.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.value.shape).copy())

    return _make(out_val, (a,), vjp)


def gather_rows(a, idx):
    a = _lift(a)
    idx = np.asarray(idx)
    out_val = a.value[idx]

    def vjp(g):
        if a.requires_grad:
            buf = np.zeros_like(a.value)
            np.add.at(buf, idx, g)
            _accum(a, buf)

    return _make(out_val, (a,), vjp)


def segment_sum(a, seg, n):
    """Sum rows of `a` into `n` buckets given per-row bucket ids."""
    a = _lift(a)
    seg = np.asarray(seg)
    out_val = np.zeros((n,) + a.value.shape[1:])
    np.add.at(out_val, seg, a.value)

    def vjp(g):
        _accum(a, g[seg])

    return _make(out_val, (a,), vjp)


def concat_cols(parts):
    parts = [_lift(p) for p in parts]
    out_val = np.concatenate([p.value for p in parts], axis=1)
    widths = [p.value.shape[1] for p in parts]

    def vjp(g):
        at = 0
        for p, w in zip(parts, widths):
            _accum(p, g[:, at:at + w])
            at += w

    return _make(out_val, tuple(parts), vjp)


def reshape(a, shape):
    a = _lift(a)
    out_val = a.value.reshape(shape)

    def vjp(g):
        _accum(a, g.reshape(a.value.shape))

    return _make(out_val, (a,), vjp)


def transpose(a):
    a = _lift(a)
    out_val = a.value.T

    def vjp(g):
        _accum(a, g.T)

    return _make(out_val, (a,), vjp)


def slice_cols(a, start, stop):
    a = _lift(a)
    out_val = a.value[:, start:stop]

    def vjp(g):
        if a.requires_grad:
            buf = np.zeros_like(a.value)
            buf[:, start:stop] = g
            _accum(a, buf)

    return _make(out_val, (a,), vjp)


def flip_cols(a):
    a = _lift(a)
    out_val = a.value[:, ::-1].copy()

    def vjp(g):
        _accum(a, g[:, ::-1].copy())

    return _make(out_val, (a,), vjp)


def min_axis1(a):
    """Row-wise minimum; the gradient flows to the first arg-min entry."""
    a = _lift(a)
    arg = a.value.argmin(axis=1)
    rows = np.arange(a.value.shape[0])
    out_val = a.value[rows, arg]

    def vjp(g):
        if a.requires_grad:
            buf = np.zeros_like(a.value)
            buf[rows, arg] = g
            _accum(a, buf)

    return _make(out_val, (a,), vjp)


def weighted_entry_sum(a, weights):
    """sum(a * weights) for a constant weight matrix -> scalar."""
    a = _lift(a)
    w = np.asarray(weights, dtype=float)
    out_val = float((a.value * w).sum())

    def vjp(g):
        _accum(a, g * w)

    return _make(out_val, (a,), vjp)


def smooth_l1(pred, target, beta):
    """Per-row smooth-L1 against a constant target, averaged over columns.

    Quadratic branch 0.5 e^2/beta for |e| < beta, else |e| - 0.5 beta.
    """
    pred = _lift(pred)
    t = np.asarray(target, dtype=float)
    e = pred.value - t
    quad = np.abs(e) < beta
    vals = np.where(quad, 0.5 * e * e / beta, np.abs(e) - 0.5 * beta)
    ncol = vals.shape[1] if vals.ndim == 2 else 1
    out_val = vals.mean(axis=1) if vals.ndim == 2 else vals

    def vjp(g):
        de = np.clip(e / beta, -1.0, 1.0) / ncol
        gg = g[:, None] if vals.ndim == 2 else g
        _accum(pred, gg * de)

    return _make(out_val, (pred,), vjp)
