"""Reverse-mode differentiation over numpy buffers.

Every primitive returns a new Tensor holding its parents and a backward
closure that maps the upstream gradient to one gradient per parent.
Tensor.backward() walks the graph in reverse topological order and
accumulates into the .grad of leaf tensors. Primitives never mutate
their inputs.
"""

import logging
import threading
from contextlib import contextmanager

import numpy as np

from sanran.errors import NumericError, ShapeError

log = logging.getLogger(__name__)

_state = threading.local()
_debug = False


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def set_debug(enabled: bool) -> None:
    """When enabled, every primitive checks its output for NaN/Inf."""
    global _debug
    _debug = enabled


@contextmanager
def debug_mode(enabled: bool = True):
    """Switch the non-finite checks on for a block. An outer set_debug(True) stays in force."""
    global _debug
    previous = _debug
    _debug = previous or enabled
    try:
        yield
    finally:
        _debug = previous


class Tensor:
    # Lets ndarray <op> Tensor defer to the Tensor reflected operators
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple["Tensor", ...] = ()
        self._backward = None

    # --- introspection ---

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # --- backward pass ---

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"gradient shape {grad.shape} != tensor shape {self.shape}")

        pending = {id(self): grad}
        for node in reversed(_topological_order(self)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # --- operators ---

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


class Parameter(Tensor):
    """Trainable leaf with an SGD momentum buffer."""

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, copy=True), requires_grad=True)
        self.name = name
        self.momentum = np.zeros_like(self.data)

    def astype(self, dtype) -> None:
        self.data = self.data.astype(dtype)
        self.momentum = self.momentum.astype(dtype)
        self.grad = None


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if _debug and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output from {op}")
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to shape, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# --- elementwise ---


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul",
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data / b.data, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
        "div",
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.data > 0
    scale = np.where(mask, 1.0, slope).astype(a.dtype)
    return _result(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


# --- reductions ---


def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    return _result(out, (a,), lambda g: (_expand(g, a.shape, axis, keepdims),), "sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    count = a.data.size // max(out.size, 1)
    return _result(out, (a,), lambda g: (_expand(g / count, a.shape, axis, keepdims),), "mean")


def reduce_max(a: Tensor, axis: int) -> Tensor:
    """Max over one axis. Ties route the gradient to the first maximum."""
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, idx, np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _result(out, (a,), backward, "max")


# --- shape ---


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    return _result(
        np.broadcast_to(a.data, shape).copy(), (a,),
        lambda g: (_unbroadcast(g, a.shape),), "broadcast",
    )


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _result(a.data[index].copy(), (a,), backward, "getitem")


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)), "concat",
    )


def index_select(a: Tensor, index: np.ndarray) -> Tensor:
    """Rows of a along axis 0. Repeated indices accumulate their gradients."""
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _result(np.take(a.data, index, axis=0), (a,), backward, "index_select")


def gather_neighbors(x: Tensor, idx: np.ndarray) -> Tensor:
    """x (B, P, d), idx (B, P, K) -> (B, P, K, d) with out[b, i, k] = x[b, idx[b, i, k]]."""
    if idx.ndim != 3 or idx.shape[:2] != x.shape[:2]:
        raise ShapeError(f"neighbor index {idx.shape} does not match features {x.shape}")
    batch = np.arange(x.shape[0])[:, None, None]

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, (batch, idx), g)
        return (grad,)

    return _result(x.data[batch, idx], (x,), backward, "gather")


# --- linear algebra ---


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a (..., n, k) @ b (k, m), or batched operands with equal leading shape."""
    a, b = _pair(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        if b.ndim == 2:
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols


def conv2d(
    x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """x (N, C, H, W), w (O, C, kh, kw) -> (N, O, Ho, Wo)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, weight {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {h}x{wd}")
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = np.tensordot(cols, w.data, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        gcols = np.tensordot(g, w.data, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                ys = slice(i, i + stride * ho, stride)
                xs = slice(j, j + stride * wo, stride)
                gxp[:, :, ys, xs] += gcols[:, :, i, j]
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _result(np.ascontiguousarray(out), parents, backward, "conv2d")


def batch_norm(
    x: Tensor, gamma: Tensor, beta: Tensor, stats: tuple[np.ndarray, np.ndarray] | None = None,
    eps: float = 1e-5,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize per channel over batch (and spatial) axes.

    With stats=None the batch statistics are used and returned alongside the
    output; otherwise the given (mean, var) are applied as constants.
    """
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    shape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    if stats is None:
        mean = x.data.mean(axis=axes, dtype=np.float64).astype(x.dtype)
        var = x.data.var(axis=axes, dtype=np.float64).astype(x.dtype)
    else:
        mean, var = (np.asarray(s, dtype=x.dtype) for s in stats)
    inv_std = 1.0 / np.sqrt(var.reshape(shape) + eps)
    xhat = (x.data - mean.reshape(shape)) * inv_std
    g_ = gamma.data.reshape(shape)
    out = g_ * xhat + beta.data.reshape(shape)
    count = x.data.size // x.shape[1]

    def backward(g):
        gxhat = g * g_
        if stats is None:
            gx = inv_std / count * (
                count * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv_std
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result(out.astype(x.dtype), (x, gamma, beta), backward, "batch_norm"), mean, var


# --- pooling ---


def _windows(a: np.ndarray, size: int) -> np.ndarray:
    n, c, h, w = a.shape
    if h % size or w % size:
        raise ShapeError(f"pool size {size} does not tile {h}x{w}")
    return a.reshape(n, c, h // size, size, w // size, size).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // size, w // size, size * size
    )


def _unwindows(g: np.ndarray, size: int, shape) -> np.ndarray:
    n, c, h, w = shape
    blocks = g.reshape(n, c, h // size, w // size, size, size)
    return blocks.transpose(0, 1, 2, 4, 3, 5).reshape(shape)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    win = _windows(x.data, size)
    idx = np.argmax(win, axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def backward(g):
        grad = np.zeros_like(win)
        np.put_along_axis(grad, idx, g[..., None], axis=-1)
        return (_unwindows(grad, size, x.shape),)

    return _result(out, (x,), backward, "max_pool2d")


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    out = _windows(x.data, size).mean(axis=-1)

    def backward(g):
        grad = np.repeat(g[..., None] / (size * size), size * size, axis=-1)
        return (_unwindows(grad, size, x.shape),)

    return _result(out.astype(x.dtype), (x,), backward, "avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    return reduce_mean(x, axis=(2, 3))


def global_max_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    n, c = x.shape[:2]
    return reduce_max(x.reshape(n, c, -1), axis=2)


# --- probability ---


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return _result(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return _result(
        out, (a,), lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),), "log_softmax"
    )


def softmax_np(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


# --- optimizer ---


def sgd_step(
    params: list[Parameter], lr: float, momentum: float = 0.0, weight_decay: float = 0.0
) -> None:
    """v <- momentum * v + g + weight_decay * theta;  theta <- theta - lr * v.  Clears grads."""
    for p in params:
        if p.grad is None:
            raise NumericError(f"parameter {p.name or p.shape} has no gradient")
    for p in params:
        p.momentum = momentum * p.momentum + p.grad + weight_decay * p.data
        p.data = p.data - lr * p.momentum
        p.grad = None
