"""Dense f32 tensors with reverse-mode autodiff.

Just enough machinery for the depth-completion net, its losses and the
fake-quantization nodes. Every op builds a node holding its output array,
references to its parents and a closure that maps the output gradient to
parent gradients. Custom surrogate gradients (straight-through estimators)
are expressed through :func:`custom_op`.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float32

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (inference, evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A node of the computation graph.

    ``data`` is a float32 ndarray of rank 0-4 (images are N x C x H x W).
    Rank 0 is reserved for scalar results such as losses.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "custom_backward", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > 4:
            raise ShapeError(f"tensor rank must be <= 4, got shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self.custom_backward = False
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------
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
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

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

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """Leaf tensor that accumulates gradients."""
    return Tensor(data, requires_grad=True)


def custom_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: BackwardFn,
    op: str,
    custom_backward: bool = False,
) -> Tensor:
    """Wrap ``data`` as the output of an op over ``parents``.

    ``backward_fn(grad_out)`` returns one gradient (or None) per parent.
    """
    out = Tensor(data, op=op)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.custom_backward = custom_backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise arithmetic -----------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return custom_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return custom_op(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return custom_op(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return custom_op(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    out = a.data**p

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return custom_op(out, (a,), bw, "pow")


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return custom_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def log(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return custom_op(np.maximum(a.data, DTYPE(0)), (a,), lambda g: (g * pos,), "relu")


def ceil_ste(a) -> Tensor:
    """Ceiling in the forward pass, identity gradient in the backward pass."""
    a = as_tensor(a)
    return custom_op(np.ceil(a.data), (a,), lambda g: (g,), "ceil_ste", custom_backward=True)


# -- reductions and shape ops ---------------------------------------------
def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=DTYPE)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(DTYPE),)

    return custom_op(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return custom_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        if _has_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return custom_op(np.array(out, dtype=DTYPE), (a,), bw, "getitem")


def _has_advanced(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (np.ndarray, list)) for i in idx)


def concat(tensors: Iterable[Tensor], axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {ref} and {t.shape}")
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts))
        )

    return custom_op(out, ts, bw, "concat")


def concat_channels(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels needs matching N,H,W; got {a.shape} and {b.shape}")
    return concat([a, b], axis=1)


def pad_replicate(a, pad: int = 1) -> Tensor:
    """Edge-replicate padding of the last two axes."""
    a = as_tensor(a)
    widths = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(a.data, widths, mode="edge")

    def bw(g):
        g = g.copy()
        # fold padded borders back onto the replicated edge rows/cols
        g[..., pad, :] += g[..., :pad, :].sum(axis=-2)
        g[..., -pad - 1, :] += g[..., -pad:, :].sum(axis=-2)
        g[..., :, pad] += g[..., :, :pad].sum(axis=-1)
        g[..., :, -pad - 1] += g[..., :, -pad:].sum(axis=-1)
        return (np.ascontiguousarray(g[..., pad:-pad, pad:-pad]),)

    return custom_op(out, (a,), bw, "pad_replicate")


# -- image ops --------------------------------------------------------------
def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, h, w), dtype=DTYPE)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i : i + h, j : j + w]
    return cols.reshape(c * k * k, n * h * w)


def _col2im(dcols: np.ndarray, shape, k: int, pad: int, h: int, w: int) -> np.ndarray:
    n, c, hi, wi = shape
    d = dcols.reshape(c, k, k, n, h, w)
    dxp = np.zeros((c, n, hi + 2 * pad, wi + 2 * pad), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + h, j : j + w] += d[:, i, j]
    dx = dxp[:, :, pad : pad + hi, pad : pad + wi]
    return np.ascontiguousarray(dx.transpose(1, 0, 2, 3))


def conv2d(x, weight, bias=None, stride: int = 1, pad: str = "same") -> Tensor:
    """2-D cross-correlation of an N x C x H x W input with odd square kernels."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, hi, wi = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c_in != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {c_in} ({weight.shape})")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    if pad not in ("same", "valid"):
        raise ValueError(f"pad must be 'same' or 'valid', got {pad!r}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {c_out} output channels")
    k = kh
    p = k // 2 if pad == "same" else 0
    h, w = hi + 2 * p - k + 1, wi + 2 * p - k + 1
    if h < 1 or w < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for {k}x{k} valid convolution")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, k, h, w)
    wmat = weight.data.reshape(c_out, -1)
    out = (wmat @ cols).reshape(c_out, n, h, w)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    if stride > 1:
        out = np.ascontiguousarray(out[:, :, ::stride, ::stride])

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        if stride > 1:
            full = np.zeros((n, c_out, h, w), dtype=DTYPE)
            full[:, :, ::stride, ::stride] = g
            g = full
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c_out, -1)
        gx = _col2im(wmat.T @ gmat, x.shape, k, p, h, w) if x.requires_grad else None
        gw = (gmat @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=1)

    return custom_op(out, parents, bw, "conv2d")


def maxpool2(x) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first element."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2 expects N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even H and W, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)  # first max in row-major window order
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4), dtype=DTYPE)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return custom_op(np.ascontiguousarray(out), (x,), bw, "maxpool2")


def upsample2_nearest(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample2_nearest expects N x C x H x W, got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return custom_op(out, (x,), bw, "upsample2")


# -- backward ---------------------------------------------------------------
def _topo_order(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Back-propagate from a scalar ``loss``.

    Returns a map from every node reachable from the loss to its gradient.
    Leaf tensors with ``requires_grad`` also get ``.grad`` set (overwritten,
    not accumulated across calls).
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[Tensor, np.ndarray] = {loss: np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(_topo_order(loss)):
        g = grads.get(node)
        if g is None:
            g = grads[node] = np.zeros(node.shape, dtype=DTYPE)
        if node._backward is None:
            if node.requires_grad:
                node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=DTYPE)
            if pg.shape != parent.shape:
                pg = pg.reshape(parent.shape)
            if parent in grads:
                grads[parent] = grads[parent] + pg
            else:
                grads[parent] = pg
    return grads


def grad_of(grads: dict[Tensor, np.ndarray], t: Tensor) -> np.ndarray:
    """Gradient of ``t`` from a :func:`backward` map; zeros if disconnected."""
    g = grads.get(t)
    return np.zeros(t.shape, dtype=DTYPE) if g is None else g
