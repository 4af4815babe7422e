"""Dense N-d tensors with reverse-mode automatic differentiation.

Every tensor produced by an op keeps a reference to its parents and a
closure that pushes the upstream gradient back to them.  ``backward``
orders the recorded ops topologically and runs each closure once.

Layout is N, C, H, W row-major throughout.
"""

from __future__ import annotations

import os
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_EPS = 1e-12
DEFAULT_DTYPE = np.float32

# finite-check every forward result; enabled in tests via MHMTL_DEBUG=1
DEBUG = os.environ.get("MHMTL_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    """Incompatible operand shapes."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (e.g. backward from a non-scalar)."""


class Tensor:
    """Array value plus an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = ""
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- graph ------------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        g = g.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _not_scalar(t: Tensor):
    raise GraphError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if DEBUG and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def topological_order(root: Tensor) -> list[Tensor]:
    """Graph nodes reachable from ``root`` with every input before its consumer."""
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients add onto whatever is already stored, so calling this twice
    without clearing doubles the leaf gradients.  Intermediate nodes get
    scratch gradients that are released afterwards.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward() requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor with requires_grad=True")
    order = topological_order(loss)
    scratch: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = scratch.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node._accumulate(g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in scratch:
                scratch[key] = scratch[key] + pg
            else:
                scratch[key] = pg


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data + b.data

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), _bw, "add")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data * b.data

    def _bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), _bw, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def log(x: Tensor, eps: float = LOG_EPS) -> Tensor:
    """Natural log with inputs clamped below at ``eps`` (the clamp has zero gradient)."""
    clamped = np.maximum(x.data, eps)
    live = x.data > eps
    return _make(np.log(clamped), (x,), lambda g: (np.where(live, g / clamped, 0.0),), "log")


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def absolute(x: Tensor) -> Tensor:
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), _bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index])

    def _bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (x,), _bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _bw(g):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis) for k in range(len(tensors))
        )

    return _make(out, tensors, _bw, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul expects [n,k] @ [k,m], got {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for x [N, in], weight [out, in], bias [out]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"affine: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"affine: bias {bias.shape} does not match weight rows {weight.shape[0]}")
    out = x.data @ weight.data.T + bias.data

    def _bw(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _make(out, (x, weight, bias), _bw, "affine")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), _bw, "softmax")


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate); identity when not training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# spatial ops (N, C, H, W)
# ---------------------------------------------------------------------------


def _check4(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects an [N,C,H,W] tensor, got shape {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of x [N,C,H,W] with weight [F,C,k,k]."""
    _check4(x, "conv2d")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d weight must be [F,C,k,k], got {weight.shape}")
    n, c, h, w = x.shape
    f, wc, k, _ = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {wc}")
    if k < 1 or stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid k={k}, stride={stride}, padding={padding}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({f},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # win: N, C, Ho, Wo, k, k
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, F
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def _bw(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # F, C, k, k
        gcols = np.tensordot(g, weight.data, axes=([1], [0]))  # N, Ho, Wo, C, k, k
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[..., i, j].transpose(
                    0, 3, 1, 2
                )
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, _bw, "conv2d")


def pool_avg_global(x: Tensor) -> Tensor:
    """Spatial mean: [N,C,H,W] -> [N,C]."""
    _check4(x, "pool_avg_global")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def _bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return _make(out, (x,), _bw, "gap")


def pool_max2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Max pooling; gradient goes to the first maximal element in row-major order."""
    _check4(x, "pool_max2d")
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    if k < 1 or k > h or k > w:
        raise ShapeError(f"pool_max2d: window {k} exceeds spatial extent {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)  # first occurrence -> row-major tie rule
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(arg, k)
    rows = np.arange(ho)[None, None, :, None] * stride + di
    cols = np.arange(wo)[None, None, None, :] * stride + dj
    nn_ = np.broadcast_to(np.arange(n)[:, None, None, None], rows.shape)
    cc = np.broadcast_to(np.arange(c)[None, :, None, None], rows.shape)

    def _bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (nn_, cc, rows, cols), g)
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), _bw, "maxpool")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each cell into a factor x factor block."""
    _check4(x, "upsample_nearest")
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    n, c, h, w = x.shape

    def _bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), _bw, "upsample")


def _bilinear_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    # half-pixel centres, edge-clamped (align_corners=False convention)
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=dtype)
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Separable bilinear upsampling; optional alternative to nearest for segmentation logits."""
    _check4(x, "upsample_bilinear")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    ry = _bilinear_matrix(h, factor, x.dtype)
    rx = _bilinear_matrix(w, factor, x.dtype)
    out = np.einsum("yh,nchw,xw->ncyx", ry, x.data, rx, optimize=True)

    def _bw(g):
        return (np.einsum("yh,ncyx,xw->nchw", ry, g, rx, optimize=True),)

    return _make(np.ascontiguousarray(out), (x,), _bw, "upsample_bilinear")


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
