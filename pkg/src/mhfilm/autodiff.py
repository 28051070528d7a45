"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records a node on the graph of its result. Calling
:func:`backward` on a scalar collects the ancestry of that scalar into a :class:`Tape`
(nodes ordered by creation, which is a valid topological order) and replays it once in
reverse. Replaying the same graph twice raises :class:`BackwardError`.

Operations accept an optional leading batch axis wherever the single-instance contract
is written for ``C x H x W`` images or vectors; this is what makes desk-scale training
tractable without changing per-instance semantics.
"""

from __future__ import annotations

import contextlib
import itertools
import logging
import os
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BackwardError, ConfigError, DimensionError, DomainError

logger = logging.getLogger(__name__)

DTYPE = np.float64
DEBUG = bool(os.environ.get("MHFILM_DEBUG"))

_seq = itertools.count()
_grad_enabled = True
_pattern_log: list[np.ndarray] | None = None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def record_patterns() -> Iterator[list[np.ndarray]]:
    """Collect the branch masks of every piecewise op (relu, clamp, smooth_l1) run inside the block."""
    global _pattern_log
    prev = _pattern_log
    _pattern_log = []
    try:
        yield _pattern_log
    finally:
        _pattern_log = prev


def _log_pattern(mask: np.ndarray) -> None:
    if _pattern_log is not None:
        _pattern_log.append(mask)


class _Node:
    __slots__ = ("seq", "op", "parents", "backward_fn", "consumed")

    def __init__(self, op: str, parents: tuple["Tensor", ...], backward_fn: Callable):
        self.seq = next(_seq)
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """A dense real array that optionally participates in gradient recording."""

    __slots__ = ("data", "grad", "requires_grad", "decay", "name", "_node", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.decay = False
        self.name = name
        self._node: _Node | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce(self, "mean", axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None, decay: bool = False) -> Tensor:
    t = Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)
    t.decay = decay
    return t


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.decay = False
    out.name = None
    out._node = None
    out.requires_grad = False
    if DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(op, parents, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary maps
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    """Hadamard product with numpy broadcasting (covers per-channel scaling)."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "hadamard")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, "hadamard", (a, b), bw)


def binary_map(a, b, f: str) -> Tensor:
    try:
        fn = {"add": add, "sub": sub, "hadamard": mul}[f]
    except KeyError:
        raise ConfigError(f"unknown binary map {f!r}") from None
    return fn(a, b)


# ---------------------------------------------------------------------------
# elementwise unary maps
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _log_pattern(mask)
    return _result(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, "tanh", (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    # split on sign to avoid overflow in exp
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        bad = np.argwhere(x.data <= 0)[0]
        raise DomainError(f"log of non-positive entry at index {tuple(int(i) for i in bad)}")
    return _result(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, "neg", (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, "scale", (x,), lambda g: (g * c,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    _log_pattern(inside)
    return _result(np.clip(x.data, lo, hi), "clamp", (x,), lambda g: (g * inside,))


_UNARY = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, "log": log, "neg": neg}


def unary_map(x: Tensor, f: str) -> Tensor:
    try:
        return _UNARY[f](x)
    except KeyError:
        raise ConfigError(f"unknown unary map {f!r}") from None


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes of ``a`` (and ``b``) broadcast as in numpy."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _result(out, "matmul", (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape (..., d_in)."""
    if x.ndim == 1:
        y = matmul(reshape(x, (1, -1)), weight)
        y = reshape(y, (weight.shape[1],))
    else:
        y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``C_in x H x W`` (or ``N x C_in x H x W``) input with a kernel bank."""
    single = x.ndim == 3
    if x.ndim not in (3, 4) or kernel.ndim != 4:
        raise DimensionError(f"conv2d: expected C x H x W input and 4-d kernel, got {x.shape} and {kernel.shape}")
    xd = x.data[None] if single else x.data
    n, c, h, w = xd.shape
    o, ci, kh, kw = kernel.shape
    if ci != c:
        raise DimensionError(f"conv2d: input has {c} channels but kernel {kernel.shape} expects {ci}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d: non-positive output extent {ho}x{wo} for input {x.shape}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    if kh == kw == 1:
        cols = xp[:, :, ::stride, ::stride][:, :, :ho, :wo].transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wm = kernel.data.reshape(o, -1)
    out2 = cols @ wm.T
    if bias is not None:
        out2 = out2 + bias.data
    out = np.ascontiguousarray(out2.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    if single:
        out = out[0]
    xshape = x.shape

    def bw(g):
        g4 = g[None] if single else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(-1, o)
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            if kh == kw == 1:
                dxp = np.zeros(xp.shape, dtype=DTYPE)
                dxp[:, :, : stride * ho : stride, : stride * wo : stride] = (g2 @ wm).reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
            elif stride == 1:
                # full correlation of the output gradient with the flipped kernel
                gp = np.pad(g4, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
                gcols = sliding_window_view(gp, (kh, kw), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5).reshape(-1, o * kh * kw)
                kf = kernel.data[:, :, ::-1, ::-1].transpose(0, 2, 3, 1).reshape(o * kh * kw, c)
                dxp = (gcols @ kf).reshape(n, xp.shape[2], xp.shape[3], c).transpose(0, 3, 1, 2)
            else:
                dxp = np.zeros(xp.shape, dtype=DTYPE)
                d6 = (g2 @ wm).reshape(n, ho, wo, c, kh, kw)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d6[..., i, j].transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding : padding + h, padding : padding + w]
            gx = dxp[0] if single else dxp
            gx = gx.reshape(xshape)
        return (gx, gk) if bias is None else (gx, gk, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, "conv2d", parents, bw)


# ---------------------------------------------------------------------------
# normalization and probability maps
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax; entries where ``mask`` is False get probability 0."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    d = x.data
    if mask is not None:
        d = np.where(mask, d, -np.inf)
    m = np.max(d, axis=axis, keepdims=True)
    e = np.exp(d - m)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _result(y, "softmax", (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        dxhat = g * gain.data
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, "layer_norm", (x, gain, bias), bw)


def frozen_batch_norm(
    x: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.9,
) -> Tensor:
    """Per-channel standardization without affine parameters.

    ``x`` is ``C x H x W`` or ``N x C x H x W``. In training mode the batch statistics are
    used and the running statistics (updated in place) move as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    if x.ndim not in (3, 4):
        raise DimensionError(f"batch norm expects C x H x W or N x C x H x W, got {x.shape}")
    c = x.shape[-3]
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise DimensionError(f"batch norm statistics must have length {c}")
    axes = (0, 2, 3) if x.ndim == 4 else (1, 2)
    bshape = (1, c, 1, 1) if x.ndim == 4 else (c, 1, 1)
    if not training:
        inv = (1.0 / np.sqrt(running_var + eps)).reshape(bshape)
        out = (x.data - running_mean.reshape(bshape)) * inv
        return _result(out, "batch_norm", (x,), lambda g: (g * inv,))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    running_mean *= momentum
    running_mean += (1.0 - momentum) * mu.reshape(c)
    running_var *= momentum
    running_var += (1.0 - momentum) * var.reshape(c)

    def bw(g):
        return (inv * (g - g.mean(axis=axes, keepdims=True) - xhat * (g * xhat).mean(axis=axes, keepdims=True)),)

    return _result(xhat, "batch_norm", (x,), bw)


def smooth_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Mean Huber loss with unit threshold."""
    d = pred.data - target.data
    a = np.abs(d)
    _log_pattern(a < 1.0)
    out = np.where(a < 1.0, 0.5 * d * d, a - 0.5).mean()
    n = d.size

    def bw(g):
        gd = g * np.clip(d, -1.0, 1.0) / n
        return gd, -gd

    return _result(np.asarray(out), "smooth_l1", (pred, target), bw)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p); identity outside training."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * keep, "dropout", (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    norm = tuple(a % ndim if -ndim <= a < ndim else _bad_axis(a, ndim) for a in axes)
    if len(set(norm)) != len(norm):
        raise DimensionError(f"reduction axes must be distinct, got {axes}")
    return norm


def _bad_axis(a, ndim):
    raise DimensionError(f"axis {a} out of range for {ndim}-d tensor")


def reduce(x: Tensor, op: str = "sum", axes=None, keepdims: bool = False) -> Tensor:
    if op not in ("sum", "mean"):
        raise ConfigError(f"unknown reduction {op!r}")
    ax = _norm_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in ax])) if ax else 1
    out = x.data.sum(axis=ax, keepdims=keepdims)
    if op == "mean":
        out = out / count
    factor = 1.0 / count if op == "mean" else 1.0

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g * factor, x.shape).copy(),)

    return _result(np.asarray(out, dtype=DTYPE), op, (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    ref = xs[0]
    ax = axis % ref.ndim
    for t in xs[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise DimensionError(f"concat: shape {t.shape} incompatible with {ref.shape} off axis {axis}")
    sizes = [t.shape[ax] for t in xs]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in xs], axis=ax)

    def bw(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[ax] = slice(lo, hi)
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _result(out, "concat", tuple(xs), bw)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in xs]
    return concat(expanded, axis)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from None
    return _result(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), "transpose", (x,), lambda g: (g.transpose(inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def index(x: Tensor, idx) -> Tensor:
    """Numpy-style indexing; fancy indices scatter-add in the adjoint."""
    out = np.array(x.data[idx], dtype=DTYPE)
    basic = _is_basic_index(idx)

    def bw(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _result(out, "index", (x,), bw)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Gather rows of a ``V x d`` table; any index array shape is allowed."""
    ids = np.asarray(indices, dtype=np.int64)
    v = table.shape[0]
    bad = np.argwhere((ids < 0) | (ids >= v))
    if bad.size:
        pos = tuple(int(i) for i in bad[0])
        raise IndexError(f"token id {int(ids[pos])} at position {pos if len(pos) > 1 else pos[0]} out of range for table of {v} rows")
    out = table.data[ids] if ids.size else np.zeros(ids.shape + (table.shape[1],), dtype=DTYPE)

    def bw(g):
        gt = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(out, "embedding", (table,), bw)


# ---------------------------------------------------------------------------
# tape and backward
# ---------------------------------------------------------------------------

class Tape:
    """Ancestry of a result tensor in execution order."""

    def __init__(self, records: list[Tensor]):
        self.records = records

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        found: list[Tensor] = []
        stack_ = [root]
        while stack_:
            t = stack_.pop()
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            found.append(t)
            stack_.extend(p for p in t._node.parents if p._node is not None)
        found.sort(key=lambda t: t._node.seq)
        return cls(found)

    def __len__(self) -> int:
        return len(self.records)

    def run_backward(self, root: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(root): seed}
        for t in reversed(self.records):
            node = t._node
            if node.consumed:
                raise BackwardError(f"graph through '{node.op}' was already backpropagated; rebuild it first")
            g = grads.pop(id(t), None)
            node.consumed = True
            if g is None:
                continue
            pgrads = node.backward_fn(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if p._node is not None:
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                else:
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
            node.backward_fn = None


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that requires grad in the ancestry of ``loss``."""
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones(loss.shape, dtype=DTYPE)
            return
        raise BackwardError("loss does not depend on any tensor that requires grad")
    if loss._node.consumed:
        raise BackwardError("backward called twice on the same graph")
    Tape.from_root(loss).run_backward(loss, np.ones(loss.shape, dtype=DTYPE))


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def numerical_grad(f: Callable[[], float], x: Tensor, h: float, coords: Iterable[tuple[int, ...]]) -> list[float]:
    """Central differences of ``f`` with respect to selected coordinates of ``x`` (perturbed in place)."""
    out = []
    for c in coords:
        orig = x.data[c]
        x.data[c] = orig + h
        fp = f()
        x.data[c] = orig - h
        fm = f()
        x.data[c] = orig
        out.append((fp - fm) / (2.0 * h))
    return out


def _same_patterns(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def kink_safe_numerical_grad(f: Callable[[], float], x: Tensor, coords: Iterable[tuple[int, ...]],
                             h: float = 1e-4, h_min: float = 1e-8) -> list[float]:
    """Central differences that shrink the step whenever a perturbation flips a piecewise branch.

    A flipped relu/clamp mask means the step straddles a kink, where the difference quotient
    measures a blend of two one-sided slopes rather than the derivative at ``x``.
    """
    with record_patterns() as base:
        f()
    base = list(base)
    out = []
    for c in coords:
        orig = x.data[c]
        step = h
        while True:
            x.data[c] = orig + step
            with record_patterns() as pp:
                fp = f()
            x.data[c] = orig - step
            with record_patterns() as pm:
                fm = f()
            x.data[c] = orig
            if step / 10 < h_min or (_same_patterns(base, pp) and _same_patterns(base, pm)):
                break
            step /= 10
        out.append((fp - fm) / (2.0 * step))
    return out


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-4,
    grad: np.ndarray | None = None,
    coords: Sequence[tuple[int, ...]] | None = None,
) -> float:
    """Max relative error between the analytic gradient of scalar ``f`` at ``x`` and central differences.

    ``grad`` overrides the analytic gradient (used to verify the checker catches corrupted adjoints).
    """
    if h <= 0:
        raise ConfigError("finite-difference step must be positive")
    if grad is None:
        xv = Tensor(x.data.copy(), requires_grad=True)
        backward(f(xv))
        grad = xv.grad if xv.grad is not None else np.zeros(x.shape)
    probe = Tensor(x.data.copy())
    if coords is None:
        coords = list(np.ndindex(*x.shape))
    with no_grad():
        num = numerical_grad(lambda: f(probe).item(), probe, h, coords)
    ana = [grad[c] for c in coords]
    if not coords:
        return 0.0
    return float(np.max(relative_error(ana, num)))
