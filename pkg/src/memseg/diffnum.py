"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the handful of ops the segmentation pipeline needs are provided. Every op
checks operand shapes up front and records itself on the calling thread's
:class:`Graph` when any input requires a gradient.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence

import numpy as np

EPS = 1e-12


class ShapeError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class NonFiniteError(ValueError):
    pass


class Tensor:
    """A float64 array plus an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor) and other.size != 1:
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Graph


class _Record:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op, out, inputs, backward):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Graph:
    """Execution-ordered tape of differentiable ops."""

    def __init__(self):
        self.records: list[_Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        self.records.append(_Record(op, out, tuple(inputs), backward))

    def clear(self) -> None:
        self.records.clear()


_local = threading.local()


def current_graph() -> Graph:
    g = getattr(_local, "graph", None)
    if g is None:
        g = _local.graph = Graph()
    return g


def _grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Suspend graph recording on this thread."""
    prev = _grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


def _make(op: str, value: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    track = _grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = value
    out.requires_grad = track
    out.grad = np.zeros_like(value) if track else None
    out.name = None
    if track:
        current_graph().record(op, out, inputs, backward)
    return out


def _acc(t: Tensor, g) -> None:
    if t.requires_grad:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tracked tensor, then clear the graph."""
    if loss.data.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    graph = current_graph()
    stop = None
    for idx in range(len(graph.records) - 1, -1, -1):
        if graph.records[idx].out is loss:
            stop = idx
            break
    if stop is None:
        raise GraphError("backward: loss was not produced on the current graph")
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(graph.records[: stop + 1]):
        rec.backward(rec.out.grad)
    graph.clear()


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)

    def bw(g):
        _acc(a, g)
        _acc(b, g)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)

    def bw(g):
        _acc(a, g)
        _acc(b, -g)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    """Elementwise product of equally shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)

    def bw(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)

    return _make("mul", a.data * b.data, (a, b), bw)


def scale(x, s) -> Tensor:
    """Multiply by a python scalar or a single-element tensor."""
    x = as_tensor(x)
    if isinstance(s, Tensor):
        if s.size != 1:
            raise ShapeError(f"scale: scalar operand must have one element, got shape {s.shape}")
        sv = s.data.reshape(())

        def bw(g):
            _acc(x, g * sv)
            _acc(s, np.reshape(np.sum(g * x.data), s.shape))

        return _make("scale", x.data * sv, (x, s), bw)

    sv = float(s)

    def bw(g):
        _acc(x, g * sv)

    return _make("scale", x.data * sv, (x,), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g):
        _acc(x, g * mask)

    return _make("relu", np.where(mask, x.data, 0.0), (x,), bw)


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)

    def bw(g):
        _acc(x, g * y)

    return _make("exp", y, (x,), bw)


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NonFiniteError("log: input must be strictly positive")

    def bw(g):
        _acc(x, g / x.data)

    return _make("log", np.log(x.data), (x,), bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None

    def bw(g):
        _acc(x, g.reshape(x.shape))

    return _make("reshape", y, (x,), bw)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))

    def bw(g):
        _acc(x, g.transpose(inv))

    return _make("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,), bw)


def take_rows(x, idx) -> Tensor:
    """Gather rows ``x[idx]`` of a 2-D tensor."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    if x.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"take_rows: need 2-D source and 1-D index, got {x.shape} and {idx.shape}")

    def bw(g):
        if x.requires_grad:
            np.add.at(x.grad, idx, g)

    return _make("take_rows", x.data[idx], (x,), bw)


def pick(x, idx) -> Tensor:
    """Select ``x[i, idx[i]]`` from a 2-D tensor, giving a 1-D tensor."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    if x.data.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"pick: index shape {idx.shape} does not match rows of {x.shape}")
    rows = np.arange(x.shape[0])

    def bw(g):
        if x.requires_grad:
            x.grad[rows, idx] += g

    return _make("pick", x.data[rows, idx], (x,), bw)


# ---------------------------------------------------------------------------
# reductions


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _acc(x, np.broadcast_to(g, x.shape))

    return _make("sum", np.asarray(x.data.sum(axis=axis)), (x,), bw)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _acc(x, np.broadcast_to(g / n, x.shape))

    return _make("mean", np.asarray(x.data.mean(axis=axis)), (x,), bw)


def max(x, axis=-1) -> Tensor:  # noqa: A001
    """Reduce by maximum along ``axis``; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    arg = np.argmax(x.data, axis=axis)
    y = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis).squeeze(axis)

    def bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
            x.grad += gx

    return _make("max", y, (x,), bw)


def norm(x, axis=-1) -> Tensor:
    """Euclidean norm along ``axis``. The backward divides by max(norm, EPS)."""
    x = as_tensor(x)
    n = np.sqrt(np.sum(x.data * x.data, axis=axis))

    def bw(g):
        d = np.expand_dims(np.maximum(n, EPS), axis)
        _acc(x, np.expand_dims(g, axis) * x.data / d)

    return _make("norm", n, (x,), bw)


# ---------------------------------------------------------------------------
# normalizers


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("softmax: non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _acc(x, y * (g - np.sum(g * y, axis=axis, keepdims=True)))

    return _make("softmax", y, (x,), bw)


def l2_normalize(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("l2_normalize: non-finite input")
    n = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    if np.any(n < EPS):
        bad = np.argwhere(np.squeeze(n, axis) < EPS)[0].tolist()
        raise DegenerateVectorError(f"l2_normalize: degenerate vector at index {bad}")
    y = x.data / n

    def bw(g):
        _acc(x, (g - y * np.sum(g * y, axis=axis, keepdims=True)) / n)

    return _make("l2_normalize", y, (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    return _make("matmul", a.data @ b.data, (a, b), bw)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation over an NCHW batch.

    ``w`` is (C_out, C_in, kh, kw); ``b`` is (C_out,) or None. Zero padding.
    """
    x, w = as_tensor(x), as_tensor(w)
    if b is not None:
        b = as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: shape mismatch input {x.shape} vs weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: shape mismatch bias {b.shape} vs weight {w.shape}")
    B, _, H, W = x.shape
    co, ci, kh, kw = w.shape
    Ho = (H + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    Wo = (W + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for weight {w.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hspan = stride * (Ho - 1) + 1
    wspan = stride * (Wo - 1) + 1

    def window(i, j):
        r, c = i * dilation, j * dilation
        return (slice(None), slice(None), slice(r, r + hspan, stride), slice(c, c + wspan, stride))

    out = np.zeros((B, co, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            # (B, ci, Ho, Wo) x (co, ci) -> (B, Ho, Wo, co)
            out += np.tensordot(xp[window(i, j)], w.data[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
    if b is not None:
        out += b.data[None, :, None, None]

    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    gw[:, :, i, j] = np.tensordot(g, xp[window(i, j)], axes=([0, 2, 3], [0, 2, 3]))
            w.grad += gw
        if b is not None and b.requires_grad:
            b.grad += g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[window(i, j)] += np.tensordot(g, w.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            x.grad += gxp[:, :, padding : padding + H, padding : padding + W]

    return _make("conv2d", out, inputs, bw)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic linear interpolation matrix, half-pixel centers, edge clamped."""
    A = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(A, (rows, lo), 1.0 - frac)
    np.add.at(A, (rows, hi), frac)
    return A


def upsample_bilinear(x, size) -> Tensor:
    """Resize the two trailing axes of an NCHW tensor to ``size=(H, W)``."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_bilinear: expected NCHW input, got {x.shape}")
    Ho, Wo = size
    Ah = _interp_matrix(x.shape[2], Ho)
    Aw = _interp_matrix(x.shape[3], Wo)
    y = np.einsum("ph,bchw,qw->bcpq", Ah, x.data, Aw, optimize=True)

    def bw(g):
        _acc(x, np.einsum("ph,bcpq,qw->bchw", Ah, g, Aw, optimize=True))

    return _make("upsample_bilinear", y, (x,), bw)
