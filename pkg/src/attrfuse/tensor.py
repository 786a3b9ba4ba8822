"""Dense tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor` that remembers its inputs and a
closure mapping the output gradient to input gradients. Node creation order
is a valid topological order, so :func:`backward` replays the recorded graph
by sorting reachable nodes on their sequence number.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "DimensionError",
    "NonFiniteError",
    "Tensor",
    "affine",
    "backward",
    "concat",
    "constant",
    "conv2d",
    "grad_check",
    "log_pick",
    "maxpool2d",
    "relu",
    "reshape",
    "select_last",
    "softmax",
    "tensor_sum",
]

DEFAULT_DTYPE = np.float64

_seq = itertools.count()


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class Tensor:
    """A node in the recorded computation.

    Leaves are created directly by the user; interior nodes are produced by
    the op functions of this module.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _infer_dtype(data))
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_seq)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{grad})"

    # Small arithmetic surface; enough for loss combinations and tests.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return tensor_sum(self)


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return DEFAULT_DTYPE


def _raise_not_scalar(t: Tensor):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def constant(data, dtype=None) -> Tensor:
    """Wrap ``data`` as a leaf that never receives gradient."""
    if isinstance(data, Tensor):
        data = data.data
    return Tensor(np.array(data, dtype=dtype or _infer_dtype(data)), requires_grad=False)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _node(data: np.ndarray, parents: tuple[Tensor, ...], back, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = back
    return out


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def multiply(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"multiply: shapes {a.shape} and {b.shape} differ")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(x, 0)``; the subgradient at 0 is 0."""
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return _node(
        np.asarray(x.data.sum(), dtype=x.dtype),
        (x,),
        lambda g: (np.broadcast_to(g, shape).copy(),),
        "sum",
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _node(out, (x,), lambda g: (g.reshape(old),), "reshape")


# ---------------------------------------------------------------- dense ops


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for ``x`` of shape (N, D), ``w`` (D, K) and ``b`` (K,)."""
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise DimensionError(
            f"affine: expected x[N,D], w[D,K], b[K]; got {x.shape}, {w.shape}, {b.shape}"
        )
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine: inner dimensions differ, x has {x.shape[1]} columns, w has {w.shape[0]} rows")
    if w.shape[1] != b.shape[0]:
        raise DimensionError(f"affine: w has {w.shape[1]} outputs but b has {b.shape[0]}")

    def back(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _node(x.data @ w.data + b.data, (x, w, b), back, "affine")


def conv2d(x: Tensor, k: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 1) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1; spatial size is preserved.

    ``x`` is (N, C, H, W), ``k`` is (F, C, 3, 3) and the optional bias ``b``
    is (F,).
    """
    if stride != 1 or pad != 1:
        raise DimensionError("conv2d: only stride=1, pad=1 is supported")
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d: expected x[N,C,H,W] and k[F,C,3,3], got {x.shape}, {k.shape}")
    if k.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d: kernel must be 3x3, got {k.shape[2:]}")
    n, c, h, w = x.shape
    f = k.shape[0]
    if k.shape[1] != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {k.shape[1]}")
    if b is not None and b.shape != (f,):
        raise DimensionError(f"conv2d: bias shape {b.shape} does not match {f} filters")

    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # (N, C, H, W, 3, 3) -> (N*H*W, C*9)
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)
    kmat = k.data.reshape(f, c * 9)
    out = cols @ kmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(n, h, w, f).transpose(0, 3, 1, 2)

    def back(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * h * w, f)
        dk = (gmat.T @ cols).reshape(k.shape)
        dcols = (gmat @ kmat).reshape(n, h, w, c, 3, 3)
        dxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                dxp[:, :, i : i + h, j : j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, 1:-1, 1:-1]
        if b is None:
            return dx, dk
        return dx, dk, gmat.sum(axis=0)

    parents = (x, k) if b is None else (x, k, b)
    return _node(np.ascontiguousarray(out), parents, back, "conv2d")


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """2x2 max pooling with stride 2.

    Ties route the gradient to the first element of the window in row-major
    order.
    """
    if window != 2 or stride != 2:
        raise DimensionError("maxpool2d: only window=2, stride=2 is supported")
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d: expected x[N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2d: spatial extent {h}x{w} is not even")
    ho, wo = h // 2, w // 2
    win = x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gwin = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        return (gwin.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _node(out, (x,), back, "maxpool2d")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    if x.shape[-1] < 2:
        raise DimensionError(f"softmax: last axis needs at least 2 entries, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (x,), back, "softmax")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise DimensionError("concat: no inputs")
    if len(parts) == 1:
        return parts[0]
    ndim = parts[0].ndim
    ax = axis % ndim
    for p in parts[1:]:
        if p.ndim != ndim or any(p.shape[d] != parts[0].shape[d] for d in range(ndim) if d != ax):
            raise DimensionError(
                f"concat: extents off axis {ax} must match, got {[q.shape for q in parts]}"
            )
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=ax)
    return _node(out, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def select_last(x: Tensor, index: int) -> Tensor:
    """``x[..., index]``; the gradient is scattered back into that slot."""
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., index] = g
        return (full,)

    return _node(np.ascontiguousarray(x.data[..., index]), (x,), back, "select")


def log_pick(probs: Tensor, labels: np.ndarray, floor: float = 1e-12) -> Tensor:
    """``log(max(probs[..., label], floor))`` gathered along the last axis.

    ``labels`` has the shape of ``probs`` without its last axis. Entries
    below ``floor`` are clamped and pass no gradient.
    """
    labels = np.asarray(labels)
    if labels.shape != probs.shape[:-1]:
        raise DimensionError(f"log_pick: labels {labels.shape} do not index probs {probs.shape}")
    idx = labels.astype(np.intp)[..., None]
    picked = np.take_along_axis(probs.data, idx, axis=-1)[..., 0]
    clamped = np.maximum(picked, floor)
    live = picked >= floor

    def back(g):
        full = np.zeros_like(probs.data)
        np.put_along_axis(full, idx, (g * live / clamped)[..., None], axis=-1)
        return (full,)

    return _node(np.log(clamped), (probs,), back, "log_pick")


# ---------------------------------------------------------------- backward


def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    order: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        order.append(node)
        stack.extend(node._parents)
    order.sort(key=lambda t: t._seq, reverse=True)
    return order


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> list[np.ndarray]:
    """Reverse-mode gradients of the scalar ``loss``.

    Gradients are accumulated into ``.grad`` of every leaf that requires
    them (previous values are overwritten). If ``wrt`` is given, the
    gradients of those tensors are returned in order; tensors not reachable
    from ``loss`` get zeros.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    nodes = _reachable(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in nodes:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.requires_grad:
                node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    if wrt is None:
        return []
    reached = {id(n) for n in nodes}
    out = []
    for t in wrt:
        if id(t) in reached and t.grad is not None:
            out.append(t.grad)
        else:
            out.append(np.zeros_like(t.data))
    return out


def grad_check(fn: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences.

    The relative error per coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    x = np.array(x, dtype=np.float64)
    leaf = Tensor(x.copy(), requires_grad=True)
    (analytic,) = backward(fn(leaf), [leaf])
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn(Tensor(x.copy())).item()
        flat[i] = orig - eps
        fm = fn(Tensor(x.copy())).item()
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
