"""Dense float tensors with a reverse-mode gradient tape.

Every differentiable op records a node carrying a global sequence number.
``backward`` collects the nodes reachable from the loss and replays them in
strictly decreasing sequence order, which is the reverse of insertion order.
Gradients accumulate across calls; callers zero them explicitly.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TAPE",
    "NumericError",
    "no_grad",
    "grad_enabled",
    "default_dtype",
    "get_dtype",
    "record",
    "tensor",
    "zeros",
    "matmul",
    "conv2d",
    "softmax",
    "log_softmax",
    "gelu",
    "relu",
    "layernorm",
    "dropout",
    "concat",
    "broadcast_to",
    "backward",
]

_DTYPE = np.float32
_GRAD_ENABLED = True

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class NumericError(ArithmeticError):
    """Raised when a NaN or Inf shows up where a finite value is required."""


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the float type new tensors are created with."""
    global _DTYPE
    previous, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = previous


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them on the tape."""
    global _GRAD_ENABLED
    previous, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tape:
    """Ordered record of executed differentiable operations.

    Nodes are not stored here (they hang off their output tensors so the
    garbage collector can reclaim finished graphs); the tape hands out the
    sequence numbers that fix their order and keeps counters that tests use
    to check, e.g., that a gradient-free method never ran a backward pass.
    """

    def __init__(self) -> None:
        self._counter = itertools.count()
        self.ops_recorded = 0
        self.backward_calls = 0

    def next_seq(self) -> int:
        self.ops_recorded += 1
        return next(self._counter)


TAPE = Tape()


class _Node:
    __slots__ = ("seq", "parents", "backward_fn", "name")

    def __init__(self, parents: tuple, backward_fn: BackwardFn, name: str) -> None:
        self.seq = TAPE.next_seq()
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name


class Tensor:
    """A real array of rank 0..4 that may take part in gradient recording."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _node: Optional[_Node] = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        if arr.ndim > 4:
            raise ValueError(f"tensor rank must be <= 4, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node = _node

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self) -> None:
        backward(self)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return texp(self)

    def log(self):
        return tlog(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=_DTYPE), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DTYPE))


def record(out: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, name: str = "op") -> Tensor:
    """Wrap ``out`` as a tensor and, if needed, put its op on the tape.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    parent, each already reduced to that parent's shape.
    """
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(out)
    return Tensor(out, requires_grad=True, _node=_Node(tuple(parents), backward_fn, name))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return record(ad * bd, (a, b), back, "mul")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return record(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,), "exp")


def tlog(a: Tensor) -> Tensor:
    ad = a.data
    return record(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    # maximum (unlike where) lets NaN through so bad inputs are not masked
    return record(np.maximum(a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU, ``0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715x^3)))``."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return record(out, (a,), back, "gelu")


def dropout(a: Tensor, p: float, rng: Optional[np.random.Generator], train_mode: bool) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-p) during training."""
    if not train_mode or p <= 0.0:
        return a
    if p >= 1.0:
        raise ValueError(f"dropout probability must be < 1, got {p}")
    if rng is None:
        raise ValueError("dropout in train mode needs a random generator")
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / a.data.dtype.type(1.0 - p)
    return record(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# -- reductions and shape ops -------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return record(out, (a,), back, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.data.dtype
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, slice)) or i is Ellipsis for i in parts)

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            # basic indexing never selects an element twice
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return record(np.array(a.data[idx]), (a,), back, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    return record(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, old),), "broadcast")


# -- linear algebra -----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading (batch) axes must agree exactly."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch dimension mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return record(ad @ bd, (a, b), back, "matmul")


def _same_pads(extent: int, k: int, stride: int) -> tuple:
    out = -(-extent // stride)
    total = max((out - 1) * stride + k - extent, 0)
    return total // 2, total - total // 2


def conv2d(x: Tensor, k: Tensor, stride: int = 1, padding: str = "valid") -> Tensor:
    """2-D cross-correlation of NHWC input ``x`` with HWIO kernel ``k``.

    ``same`` padding follows the usual split (extra row/column at the end)
    so the output extent is ceil(h / stride).
    """
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if x.ndim != 4 or k.ndim != 4 or x.shape[3] != k.shape[2]:
        raise ValueError(f"conv2d dimension mismatch: input {x.shape}, kernel {k.shape}")
    n, h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    if padding == "same":
        pt, pb = _same_pads(h, kh, stride)
        pl, pr = _same_pads(w, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    hp, wp = h + pt + pb, w + pl + pr
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x.data
    # cols[n, i, j, a, b, c] = xp[n, i*s + a, j*s + b, c]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * oh * ow, kh * kw * cin)
    kmat = k.data.reshape(kh * kw * cin, cout)
    out = (cols @ kmat).reshape(n, oh, ow, cout)

    def back(g):
        g2 = g.reshape(n * oh * ow, cout)
        gk = (cols.T @ g2).reshape(k.shape)
        gcols = (g2 @ kmat.T).reshape(n, oh, ow, kh, kw, cin)
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        for a in range(kh):
            for b in range(kw):
                gxp[:, a : a + (oh - 1) * stride + 1 : stride, b : b + (ow - 1) * stride + 1 : stride] += gcols[
                    :, :, :, a, b
                ]
        gx = gxp[:, pt : pt + h, pl : pl + w]
        return gx, gk

    return record(out, (x, k), back, "conv2d")


# -- normalisation ------------------------------------------------------------
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record(s, (a,), back, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def back(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return record(out, (a,), back, "log_softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        gg = (g * xhat).reshape(-1, d).sum(axis=0)
        gb = g.reshape(-1, d).sum(axis=0)
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return record(out, (x, gamma, beta), back, "layernorm")


# -- backward -------------------------------------------------------------------
def _reachable(root: Tensor) -> list:
    seen: set = set()
    nodes = []
    stack = [root]
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append((node.seq, t))
        stack.extend(node.parents)
    nodes.sort(key=lambda pair: pair[0], reverse=True)
    return [t for _, t in nodes]


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor the scalar ``loss`` depends on."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    TAPE.backward_calls += 1
    if not np.all(np.isfinite(loss.data)):
        raise NumericError(f"non-finite loss {loss.data.reshape(-1)[0]!r}")
    if not loss.requires_grad:
        return
    if loss._node is None:
        _accumulate(loss, np.ones(loss.shape, dtype=loss.data.dtype))
        return
    pending = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
    for t in _reachable(loss):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        _accumulate(t, g)
        node = t._node
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            if parent._node is None:
                _accumulate(parent, pg)
            elif id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pg
            else:
                pending[id(parent)] = pg


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype).reshape(t.shape)
    else:
        t.grad = t.grad + g


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
