"""Dense tensors with reverse-mode differentiation via an explicit operation tape.

Every differentiable op checks whether a :class:`Tape` is active and whether any
input requires a gradient; if so it appends a closure that pushes the output
gradient back to its inputs. ``Tape.backward`` replays the closures in reverse.
Outside a tape, ops run as plain numpy and record nothing (inference mode).
"""

from __future__ import annotations

import os
import threading

import numpy as np

_local = threading.local()
DEBUG = bool(os.environ.get("HANDFIELD_DEBUG"))


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        self.grad = g if self.grad is None else self.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    __array_priority__ = 1000

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Records backward closures for one forward pass."""

    def __init__(self):
        self.ops = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def backward(self, loss: Tensor, grad=None):
        if grad is None:
            if loss.data.size != 1:
                raise DimensionError(f"backward on non-scalar of shape {loss.shape} needs an explicit grad")
            grad = np.ones_like(loss.data)
        loss.grad = grad
        for fn in reversed(self.ops):
            fn()
        self.ops.clear()


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check(out: np.ndarray, opname: str):
    if DEBUG and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite values produced by {opname}")


def _result(data, inputs, backward, opname):
    """Wrap ``data``; register ``backward(g)`` on the active tape when needed."""
    _check(data, opname)
    tape = active_tape()
    req = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    if req:
        def run():
            if out.grad is not None:
                backward(out.grad)
        tape.ops.append(run)
    return out


def _needs(t) -> bool:
    return isinstance(t, Tensor) and t.requires_grad


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from None

    def bw(g):
        if _needs(a):
            a._accum(g)
        if _needs(b):
            b._accum(g)

    return _result(data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}") from None

    def bw(g):
        if _needs(a):
            a._accum(g)
        if _needs(b):
            b._accum(-g)

    return _result(data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from None

    def bw(g):
        if _needs(a):
            a._accum(g * b.data)
        if _needs(b):
            b._accum(g * a.data)

    return _result(data, (a, b), bw, "mul")


def square(a: Tensor) -> Tensor:
    data = a.data * a.data

    def bw(g):
        a._accum(2.0 * g * a.data)

    return _result(data, (a,), bw, "square")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    data = a.data * mask

    def bw(g):
        a._accum(g * mask)

    return _result(data, (a,), bw, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)

    def bw(g):
        a._accum(g * data * (1.0 - data))

    return _result(data, (a,), bw, "sigmoid")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    data = np.logaddexp(0.0, x).astype(x.dtype, copy=False)

    def bw(g):
        s = 0.5 * (1.0 + np.tanh(0.5 * x))
        a._accum(g * s)

    return _result(data, (a,), bw, "softplus")


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bw(g):
        a._accum(g * data)

    return _result(data, (a,), bw, "exp")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    data = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        a._accum(g * mask)

    return _result(data, (a,), bw, "clip")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    data = np.sum(a.data, axis=axis, keepdims=keepdims)
    data = np.asarray(data)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape).copy())

    return _result(data, (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def bw(g):
        a._accum(g.reshape(a.shape))

    return _result(data, (a,), bw, "reshape")


def getitem(a: Tensor, idx) -> Tensor:
    data = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g) if _fancy(idx) else full.__setitem__(idx, g)
        a._accum(full)

    return _result(data, (a,), bw, "getitem")


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            if _needs(t):
                t._accum(part)

    return _result(data, tensors, bw, "concat")


concat_channels = concat


def scatter_rows(a: Tensor, index: np.ndarray, n: int, fill=0.0) -> Tensor:
    """Rows of ``a`` placed at ``index`` in an ``(n, ...)`` array filled with ``fill``."""
    data = np.full((n,) + a.shape[1:], fill, dtype=a.dtype)
    data[index] = a.data

    def bw(g):
        a._accum(g[index])

    return _result(data, (a,), bw, "scatter_rows")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bw(g):
        if _needs(a):
            a._accum(g @ np.swapaxes(b.data, -1, -2))
        if _needs(b):
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accum(gb)

    return _result(data, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for ``x`` (..., in), ``w`` (in, out) or batched (B, in, out)."""
    x = as_tensor(x)
    if x.shape[-1] != w.shape[-2]:
        raise DimensionError(f"linear expects input width {w.shape[-2]}, got shape {x.shape}")
    data = x.data @ w.data
    if b is not None:
        data = data + (b.data if w.data.ndim == 2 else b.data[:, None, :])

    def bw(g):
        if _needs(x):
            x._accum(g @ np.swapaxes(w.data, -1, -2))
        if _needs(w):
            if w.data.ndim == 2:
                w._accum(x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
            else:
                w._accum(np.swapaxes(x.data, -1, -2) @ g)
        if b is not None and _needs(b):
            if w.data.ndim == 2:
                b._accum(g.reshape(-1, g.shape[-1]).sum(axis=0))
            else:
                b._accum(g.sum(axis=1))

    return _result(data, (x, w, b), bw, "linear")


# ---------------------------------------------------------------------------
# image ops, layout (H, W, C)


def conv2d_3x3(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1, zero-padded 3x3 convolution. ``x`` (H, W, Cin), ``w`` (3, 3, Cin, Cout).

    Computed as nine shifted matmuls, which beats an explicit im2col buffer at these sizes.
    """
    x = as_tensor(x)
    if x.data.ndim != 3 or w.shape[:3] != (3, 3, x.shape[2]):
        raise DimensionError(f"conv2d_3x3: input {x.shape} incompatible with weights {w.shape}")
    h, wd, c = x.shape
    cout = w.shape[3]
    xp = np.pad(x.data, ((1, 1), (1, 1), (0, 0)))
    wt = w.data
    data = np.zeros((h, wd, cout), dtype=np.result_type(x.data, wt))
    for dy in range(3):
        for dx in range(3):
            data += xp[dy:dy + h, dx:dx + wd] @ wt[dy, dx]
    if b is not None:
        data += b.data

    def bw(g):
        g2 = g.reshape(h * wd, cout)
        if _needs(w):
            dw = np.empty_like(wt)
            for dy in range(3):
                for dx in range(3):
                    dw[dy, dx] = np.ascontiguousarray(xp[dy:dy + h, dx:dx + wd]).reshape(h * wd, c).T @ g2
            w._accum(dw)
        if b is not None and _needs(b):
            b._accum(g2.sum(axis=0))
        if _needs(x):
            gx = np.zeros((h + 2, wd + 2, c), dtype=g.dtype)
            for dy in range(3):
                for dx in range(3):
                    gx[dy:dy + h, dx:dx + wd] += g @ wt[dy, dx].T
            x._accum(gx[1:-1, 1:-1])

    return _result(data, (x, w, b), bw, "conv2d_3x3")


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    """(2n, n) bilinear interpolation matrix, half-pixel centers, edge clamped."""
    m = np.zeros((2 * n, n), dtype=dtype)
    for o in range(2 * n):
        src = (o + 0.5) / 2.0 - 0.5
        i0 = int(np.floor(src))
        frac = src - i0
        lo, hi = min(max(i0, 0), n - 1), min(max(i0 + 1, 0), n - 1)
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    return m


def upsample_matrix(n: int, dtype=np.float64) -> np.ndarray:
    return _upsample_matrix(n, dtype)


def upsample_bilinear_2x(x: Tensor) -> Tensor:
    x = as_tensor(x)
    h, w, c = x.shape
    uh, uw = _upsample_matrix(h, x.dtype), _upsample_matrix(w, x.dtype)
    tmp = (uh @ x.data.reshape(h, w * c)).reshape(2 * h, w, c)
    data = np.matmul(uw, tmp)  # (2h, 2w, c)

    def bw(g):
        gt = np.matmul(uw.T, g)  # (2h, w, c)
        x._accum((uh.T @ gt.reshape(2 * h, w * c)).reshape(h, w, c))

    return _result(data, (x,), bw, "upsample_bilinear_2x")


def avg_pool_2x(x: Tensor) -> Tensor:
    x = as_tensor(x)
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool_2x needs even spatial size, got {x.shape}")
    data = x.data.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))

    def bw(g):
        gg = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * 0.25
        x._accum(gg)

    return _result(data, (x,), bw, "avg_pool_2x")


# ---------------------------------------------------------------------------
# volume compositing


def composite(sigma: Tensor, values: Tensor, deltas: np.ndarray) -> Tensor:
    """Discrete emission-absorption quadrature along each ray.

    ``sigma`` (R, S), ``values`` (R, S, C), ``deltas`` (R, S). Returns (R, C + 1):
    the weighted sum of ``values`` followed by the accumulated opacity
    ``sum_i w_i`` with ``w_i = T_i (1 - exp(-sigma_i delta_i))``.
    """
    sigma, values = as_tensor(sigma), as_tensor(values)
    if sigma.shape != deltas.shape or values.shape[:2] != sigma.shape:
        raise DimensionError(f"composite: sigma {sigma.shape}, values {values.shape}, deltas {deltas.shape}")
    tau = sigma.data * deltas
    acc = np.cumsum(tau, axis=1)  # S_i, inclusive
    t_after = np.exp(-acc)  # T_{i+1}
    t_before = np.concatenate([np.ones_like(acc[:, :1]), t_after[:, :-1]], axis=1)
    wts = t_before - t_after
    out_v = np.matmul(wts[:, None, :], values.data)[:, 0, :]
    alpha = wts.sum(axis=1)
    data = np.concatenate([out_v, alpha[:, None]], axis=1)

    def bw(g):
        gv, ga = g[:, :-1], g[:, -1]
        if _needs(values):
            values._accum(wts[:, :, None] * gv[:, None, :])
        if _needs(sigma):
            # per-sample contribution of the upstream gradient, alpha channel included
            q = np.matmul(values.data, gv[:, :, None])[:, :, 0] + ga[:, None]
            wq = wts * q
            tail = np.cumsum(wq[:, ::-1], axis=1)[:, ::-1]
            later = tail - wq  # sum over i > k
            sigma._accum(deltas * (t_after * q - later))

    return _result(data, (sigma, values), bw, "composite")
