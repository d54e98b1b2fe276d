"""Dense-tensor engine with define-by-run reverse-mode differentiation.

Every primitive returns a new :class:`Tensor`.  When any input requires a
gradient and recording is enabled, the output keeps a reference to its inputs
and a closure mapping the output gradient to the input gradients.  The graph
is rebuilt on every forward pass; :func:`trace` flattens it into a
topologically ordered tape and :meth:`Tensor.backward` replays that tape in
reverse.

Arrays are float32 unless a float64 array is passed in explicitly (gradient
checks use float64 so finite differences are meaningful).
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32
BCE_EPS = 1e-7

_recording = True


class DimensionError(ValueError):
    """Operand shapes are incompatible with the primitive."""


class GraphError(RuntimeError):
    """Backward was requested on something with no recorded graph."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, teacher passes)."""
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


def _as_array(value) -> np.ndarray:
    if isinstance(value, (np.ndarray, np.floating)) and value.dtype in (np.float32, np.float64):
        return np.asarray(value)
    return np.asarray(value, dtype=DTYPE)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.data.dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: Callable, op: str) -> Tensor:
    needs = _recording and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = fn
        out._op = op
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- tape


@dataclass(frozen=True)
class TapeRecord:
    op: str
    inputs: tuple[int, ...]
    output: int


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def trace(root: Tensor) -> list[TapeRecord]:
    """Flatten the graph under ``root`` into topologically ordered records."""
    nodes = _topo(root)
    return [
        TapeRecord(n._op, tuple(id(p) for p in n._parents), id(n))
        for n in nodes
        if n._parents
    ]


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if not isinstance(loss, Tensor) or not loss.requires_grad:
        raise GraphError("backward called on a value that is not part of a recorded graph")
    if grad is None:
        if loss.data.size != 1:
            raise GraphError(f"backward needs an explicit gradient for shape {loss.shape}")
        grad = np.ones_like(loss.data)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _result(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1 - t * t),), "tanh")


def elementwise(op: str, *args: Tensor) -> Tensor:
    """Dispatch by name: ``add``, ``mul``, ``relu`` or ``sigmoid``."""
    table = {"add": add, "mul": mul, "relu": relu, "sigmoid": sigmoid, "tanh": tanh}
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*args)


def pose_activation(z: Tensor) -> Tensor:
    """tanh on column 0, sigmoid on the remaining columns of an (L, 3) block."""
    t = np.tanh(z.data[:, :1])
    s = _sigmoid(z.data[:, 1:])
    out = np.concatenate([t, s], axis=1)

    def fn(g):
        return (np.concatenate([g[:, :1] * (1 - t * t), g[:, 1:] * s * (1 - s)], axis=1),)

    return _result(out, (z,), fn, "pose_activation")


# ---------------------------------------------------------------- reductions / shape


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(a.data.sum(dtype=a.data.dtype), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def tensor_mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _result(
        a.data.mean(dtype=a.data.dtype),
        (a,),
        lambda g: (np.broadcast_to(g / n, shape).astype(a.data.dtype),),
        "mean",
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, fn, "concat")


def take_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    rows = np.asarray(rows, dtype=np.int64)
    shape = a.shape

    def fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, rows, g)
        return (out,)

    return _result(a.data[rows], (a,), fn, "take_rows")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` with ``b`` broadcast over rows."""
    out = matmul(x, w)
    if b is None:
        return out
    if b.data.ndim != 1 or b.shape[0] != w.shape[1]:
        raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    return _result(out.data + b.data, (out, b), lambda g: (g, g.sum(axis=0)), "bias")


def conv2d(
    x: Tensor,
    k: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
) -> Tensor:
    """Cross-correlation with zero "same" padding.

    ``x`` is (C, H, W) or (N, C, H, W); ``k`` is (C_out, C_in, kh, kw) with odd
    kernel extents.  Output spatial size is ``ceil(H / stride)``.
    """
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or k.data.ndim != 4:
        raise DimensionError(f"conv2d: expected image and 4-D kernel, got {x.shape} and {k.shape}")
    n, c, h, w = xd.shape
    co, ci, kh, kw = k.shape
    if ci != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel {k.shape} expects {ci}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel extents must be odd, got {k.shape}")
    ph, pw = kh // 2, kw // 2
    ho, wo = -(-h // stride), -(-w // stride)
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = k.data.reshape(co, -1)
    out = cols @ kmat.T
    if b is not None:
        if b.shape != (co,):
            raise DimensionError(f"conv2d: bias {b.shape} does not match {co} output channels")
        out = out + b.data
    out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]
    out = np.ascontiguousarray(out)

    def fn(g):
        g4 = g[None] if squeeze else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(-1, co)
        dk = (g2.T @ cols).reshape(k.shape) if k.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (g2 @ kmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            dx = dxp[:, :, ph : ph + h, pw : pw + w]
            dx = dx[0] if squeeze else dx
        if b is None:
            return dx, dk
        return dx, dk, g2.sum(axis=0)

    parents = (x, k) if b is None else (x, k, b)
    return _result(out, parents, fn, "conv2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling over the last two axes."""
    up = x.data.repeat(2, axis=-2).repeat(2, axis=-1)
    shape = x.shape

    def fn(g):
        gs = g.reshape(*shape[:-2], shape[-2], 2, shape[-1], 2)
        return (gs.sum(axis=(-3, -1)),)

    return _result(up, (x,), fn, "upsample2x")


def crop_windows(
    x: Tensor, batch_idx: np.ndarray, top: np.ndarray, left: np.ndarray, size: int
) -> Tensor:
    """Gather ``size``x``size`` windows from (N, C, H, W) -> (L, C, size, size)."""
    batch_idx = np.asarray(batch_idx, dtype=np.int64)
    top = np.asarray(top, dtype=np.int64)
    left = np.asarray(left, dtype=np.int64)
    off = np.arange(size)
    rows = (top[:, None] + off)[:, :, None]  # L, s, 1
    cols = (left[:, None] + off)[:, None, :]  # L, 1, s
    bi = batch_idx[:, None, None]
    # advanced indices on axes 0, 2, 3 with a slice on axis 1 -> (L, s, s, C)
    patch = x.data[bi, :, rows, cols].transpose(0, 3, 1, 2)
    shape = x.shape

    def fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, (bi, slice(None), rows, cols), g.transpose(0, 2, 3, 1))
        return (out,)

    return _result(np.ascontiguousarray(patch), (x,), fn, "crop")


# ---------------------------------------------------------------- losses


def smooth_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Mean Huber loss with transition at 1."""
    _same_shape("smooth_l1", pred, target)
    d = pred.data - target.data
    ad = np.abs(d)
    small = ad < 1
    val = np.where(small, 0.5 * d * d, ad - 0.5).mean(dtype=d.dtype)
    n = d.size

    def fn(g):
        gd = np.where(small, d, np.sign(d)) * (g / n)
        return gd, -gd

    return _result(np.asarray(val, dtype=d.dtype), (pred, target), fn, "smooth_l1")


def mse(pred: Tensor, target: Tensor) -> Tensor:
    _same_shape("mse", pred, target)
    d = pred.data - target.data
    n = d.size

    def fn(g):
        gd = d * (2 * g / n)
        return gd, -gd

    return _result(np.asarray((d * d).mean(dtype=d.dtype)), (pred, target), fn, "mse")


def bce(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy; predictions clamped ``BCE_EPS`` from 0 and 1."""
    _same_shape("bce", pred, target)
    p = np.clip(pred.data, BCE_EPS, 1 - BCE_EPS)
    t = target.data
    val = -(t * np.log(p) + (1 - t) * np.log1p(-p)).mean(dtype=p.dtype)
    inside = (pred.data > BCE_EPS) & (pred.data < 1 - BCE_EPS)
    n = p.size

    def fn(g):
        gp = (p - t) / (p * (1 - p)) * inside * (g / n)
        gt = (np.log1p(-p) - np.log(p)) * (g / n)
        return gp, gt

    return _result(np.asarray(val, dtype=p.dtype), (pred, target), fn, "bce")


def he_normal(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(DTYPE)
