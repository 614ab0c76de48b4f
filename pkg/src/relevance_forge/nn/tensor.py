"""A small reverse-mode automatic differentiation engine over numpy arrays.

Each operation returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the output gradient back onto them. ``Tensor.backward``
walks the recorded graph in reverse topological order. The engine works in
whatever float dtype its inputs carry, so gradient checks can run in float64
while training runs in float32.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from ..errors import DimensionError, NonFiniteError, UsageError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; results become constants."""
    global _grad_enabled
    previous, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = previous


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {op}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __float__(self):
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        if self.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward, "mul")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2 * a.data * g,), "square")


def absolute(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (np.sign(a.data) * g,), "abs")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient flows only where a exceeds the floor."""
    keep = a.data > floor
    out = np.where(keep, a.data, np.asarray(floor, dtype=a.dtype))
    return _make(out, (a,), lambda g: (g * keep,), "clamp_min")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    keep = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * keep,), "clip")


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _make(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x); smooth everywhere, so finite-difference checks see no kinks."""
    sig = expit(a.data).astype(a.dtype)
    out = a.data * sig
    return _make(out, (a,), lambda g: (g * (sig + out * (1 - sig)),), "silu")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


# reductions and reshaping


def sum_all(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum(dtype=a.dtype)), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        return (np.full(a.shape, g / n, dtype=a.dtype),)

    return _make(np.asarray(a.data.mean(dtype=a.dtype)), (a,), backward, "mean")


def mean_axes(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    n = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape) / np.asarray(n, a.dtype),)

    return _make(out, (a,), backward, "mean_axes")


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def index(a: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.asarray(a.data[idx]), (a,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(out, tensors, backward, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), backward, "matmul")


# volumetric layers


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N, Cin, D, H, W) with ``w`` (Cout, Cin, kd, kh, kw).

    Zero padding on every spatial face; output extent per axis is
    ``(in + 2*pad - k) // stride + 1``.
    """
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise DimensionError(f"conv3d expects 5-D input and weight, got {x.shape} and {w.shape}")
    n, cin = x.shape[:2]
    cout, wcin, kd, kh, kw = w.shape
    if wcin != cin:
        raise DimensionError(f"conv3d channel mismatch: input has {cin}, weight expects {wcin}")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv3d bias shape {b.shape} does not match {cout} output channels")
    if min(kd, kh, kw) < 1 or stride < 1 or pad < 0:
        raise DimensionError("conv3d needs positive kernel extents and stride, non-negative pad")
    xp = x.data
    if pad:
        xp = np.pad(xp, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    pd, ph, pw = xp.shape[2:]
    if pd < kd or ph < kh or pw < kw:
        raise DimensionError(f"conv3d kernel {w.shape[2:]} larger than padded input {xp.shape[2:]}")
    od, oh, ow = (pd - kd) // stride + 1, (ph - kh) // stride + 1, (pw - kw) // stride + 1
    xt = np.ascontiguousarray(xp.transpose(1, 0, 2, 3, 4))
    m = n * od * oh * ow

    def window(arr, i, j, k):
        return arr[
            :,
            :,
            i : i + stride * (od - 1) + 1 : stride,
            j : j + stride * (oh - 1) + 1 : stride,
            k : k + stride * (ow - 1) + 1 : stride,
        ]

    offsets = [(i, j, k) for i in range(kd) for j in range(kh) for k in range(kw)]
    # im2col: row block o holds the input channels seen through kernel offset o.
    cols = np.empty((len(offsets) * cin, m), dtype=xt.dtype)
    for o, (i, j, k) in enumerate(offsets):
        cols[o * cin : (o + 1) * cin] = window(xt, i, j, k).reshape(cin, m)
    wmat = w.data.transpose(0, 2, 3, 4, 1).reshape(cout, -1)
    out = np.ascontiguousarray((wmat @ cols).reshape(cout, n, od, oh, ow).transpose(1, 0, 2, 3, 4))
    if b is not None:
        out += b.data.reshape(1, cout, 1, 1, 1)

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(cout, m)
        gw = gb = gx = None
        if w.requires_grad:
            gw = np.ascontiguousarray((gt @ cols.T).reshape(cout, kd, kh, kw, cin).transpose(0, 4, 1, 2, 3))
        if b is not None and b.requires_grad:
            gb = gt.sum(axis=1)
        if x.requires_grad:
            gcols = wmat.T @ gt
            gxt = np.zeros_like(xt)
            for o, (i, j, k) in enumerate(offsets):
                window(gxt, i, j, k)[...] += gcols[o * cin : (o + 1) * cin].reshape(cin, n, od, oh, ow)
            gxt = gxt[:, :, pad : pd - pad, pad : ph - pad, pad : pw - pad]
            gx = np.ascontiguousarray(gxt.transpose(1, 0, 2, 3, 4))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward, "conv3d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    n, c, d, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3).repeat(factor, axis=4)

    def backward(g):
        return (g.reshape(n, c, d, factor, h, factor, w, factor).sum(axis=(3, 5, 7)),)

    return _make(out, (x,), backward, "upsample")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, D, H, W) -> (N, C)."""
    return mean_axes(x, (2, 3, 4))


def parameters_require_grad(params: Iterable[Tensor], flag: bool) -> None:
    for p in params:
        p.requires_grad = flag
