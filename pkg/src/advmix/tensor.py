"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every differentiable operation executed while recording is appended to the
active :class:`Tape`.  ``backward`` walks that tape in reverse from a scalar
loss and accumulates gradients into leaf tensors that require them.
"""

from __future__ import annotations

import contextlib
from typing import Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when input shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class TapeError(RuntimeError):
    """Misuse of the tape: stale tensors, repeated backward, non-scalar loss."""


class Node:
    __slots__ = ("op", "parents", "ctx")

    def __init__(self, op, parents, ctx):
        self.op = op
        self.parents = parents
        self.ctx = ctx


class Tape:
    """Append-only record of the operations executed since the last reset."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.epoch = 0
        self.enabled = True
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def reset(self) -> None:
        """Drop every recorded node; leaf tensors are unaffected."""
        self.nodes = []
        self.epoch += 1
        self.consumed = False


_TAPE = Tape()


def get_tape() -> Tape:
    return _TAPE


@contextlib.contextmanager
def use_tape(tape: Tape) -> Iterator[Tape]:
    global _TAPE
    previous, _TAPE = _TAPE, tape
    try:
        yield tape
    finally:
        _TAPE = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording anything on the tape."""
    tape = _TAPE
    previous, tape.enabled = tape.enabled, False
    try:
        yield
    finally:
        tape.enabled = previous


def reset() -> None:
    _TAPE.reset()


class Tensor:
    """A dense array that can take part in a recorded computation.

    Leaves are created directly by the user; non-leaf tensors are the outputs
    of recorded operations and hold a handle to their tape node.
    """

    __slots__ = ("values", "grad", "requires_grad", "name", "_node", "_epoch", "_tape")
    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(values)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(DEFAULT_DTYPE)
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._node: int | None = None
        self._epoch: int | None = None
        self._tape: Tape | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    @property
    def graph_id(self) -> tuple[int, int] | None:
        """Opaque (tape epoch, node index) handle, or None for leaves."""
        if self._node is None:
            return None
        return (self._epoch, self._node)

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.values!r}{flag})"

    def __len__(self) -> int:
        return len(self.values)

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        return apply(Add, self, other)

    def __radd__(self, other):
        return apply(Add, other, self)

    def __sub__(self, other):
        return apply(Sub, self, other)

    def __rsub__(self, other):
        return apply(Sub, other, self)

    def __mul__(self, other):
        return apply(Mul, self, other)

    def __rmul__(self, other):
        return apply(Mul, other, self)

    def __truediv__(self, other):
        return apply(Div, self, other)

    def __rtruediv__(self, other):
        return apply(Div, other, self)

    def __neg__(self):
        return apply(Neg, self)

    def __matmul__(self, other):
        return apply(MatMul, self, other)

    def __getitem__(self, key):
        if isinstance(key, (list, np.ndarray)):
            return take(self, key)
        return apply(Slice, self, key=key)

    def sum(self, axis=None, keepdims=False):
        return apply(Sum, self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply(Mean, self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply(Reshape, self, shape=shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(t: Tensor) -> Tensor:
    """Same values, no gradient, no tape node.  Shares memory with ``t``."""
    return Tensor(as_tensor(t).values, requires_grad=False)


def apply(op, *inputs, **kwargs) -> Tensor:
    tensors = [as_tensor(t) for t in inputs]
    tape = _TAPE
    for t in tensors:
        if t._node is not None and (t._tape is not tape or t._epoch != tape.epoch):
            raise TapeError(f"{op.name}: input tensor belongs to a reset or foreign tape")
    out, ctx = op.forward(*(t.values for t in tensors), **kwargs)
    needs_grad = tape.enabled and any(t.requires_grad for t in tensors)
    result = Tensor(out, requires_grad=needs_grad)
    if needs_grad:
        result._node = tape.record(Node(op, tensors, ctx))
        result._epoch = tape.epoch
        result._tape = tape
    return result


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``."""
    tape = _TAPE
    if loss.values.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("backward on a tensor that does not require grad")
    if loss._node is None:
        seed = np.ones_like(loss.values)
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    if loss._tape is not tape or loss._epoch != tape.epoch:
        raise TapeError("loss is not on the current tape")
    if tape.consumed:
        raise TapeError("backward called twice without a tape reset")
    tape.consumed = True

    pending: dict[int, np.ndarray] = {loss._node: np.ones_like(loss.values)}
    for index in range(loss._node, -1, -1):
        grad = pending.pop(index, None)
        if grad is None:
            continue
        node = tape.nodes[index]
        parent_grads = node.op.backward(node.ctx, grad)
        for parent, g in zip(node.parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            if parent._node is None:
                parent.grad = np.array(g, copy=True) if parent.grad is None else parent.grad + g
            else:
                prev = pending.get(parent._node)
                pending[parent._node] = g if prev is None else prev + g


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# Operations.  ``forward`` receives raw arrays and returns (output, ctx);
# ``backward`` maps the output gradient to one gradient (or None) per input.
# ---------------------------------------------------------------------------


class Op:
    name = "op"

    @staticmethod
    def forward(*arrays, **kwargs):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):
        raise NotImplementedError


class Add(Op):
    name = "add"

    @staticmethod
    def forward(a, b):
        _broadcast_shape("add", a, b)
        return a + b, (a.shape, b.shape)

    @staticmethod
    def backward(ctx, grad):
        sa, sb = ctx
        return _unbroadcast(grad, sa), _unbroadcast(grad, sb)


class Sub(Op):
    name = "sub"

    @staticmethod
    def forward(a, b):
        _broadcast_shape("sub", a, b)
        return a - b, (a.shape, b.shape)

    @staticmethod
    def backward(ctx, grad):
        sa, sb = ctx
        return _unbroadcast(grad, sa), _unbroadcast(-grad, sb)


class Mul(Op):
    name = "mul"

    @staticmethod
    def forward(a, b):
        _broadcast_shape("mul", a, b)
        return a * b, (a, b)

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx
        return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


class Div(Op):
    name = "div"

    @staticmethod
    def forward(a, b):
        _broadcast_shape("div", a, b)
        return a / b, (a, b)

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx
        ga = grad / b
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a / b, b.shape)


class Neg(Op):
    name = "neg"

    @staticmethod
    def forward(a):
        return -a, None

    @staticmethod
    def backward(ctx, grad):
        return (-grad,)


class MatMul(Op):
    name = "matmul"

    @staticmethod
    def forward(a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError("matmul", a.shape, b.shape)
        return a @ b, (a, b)

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx
        return grad @ b.T, a.T @ grad


class Dot(Op):
    name = "dot"

    @staticmethod
    def forward(a, b):
        if a.ndim != 1 or a.shape != b.shape:
            raise ShapeError("dot", a.shape, b.shape)
        return np.dot(a, b), (a, b)

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx
        return grad * b, grad * a


class ReLU(Op):
    name = "relu"

    @staticmethod
    def forward(a):
        # maximum (not where) so that NaN propagates
        return np.maximum(a, 0.0), a > 0

    @staticmethod
    def backward(mask, grad):
        return (grad * mask,)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


class Sigmoid(Op):
    name = "sigmoid"

    @staticmethod
    def forward(a):
        s = _sigmoid(a)
        return s, s

    @staticmethod
    def backward(s, grad):
        return (grad * s * (1.0 - s),)


class Log(Op):
    name = "log"

    @staticmethod
    def forward(a):
        return np.log(a), a

    @staticmethod
    def backward(a, grad):
        return (grad / a,)


class Exp(Op):
    name = "exp"

    @staticmethod
    def forward(a):
        out = np.exp(a)
        return out, out

    @staticmethod
    def backward(out, grad):
        return (grad * out,)


class XLogX(Op):
    """Elementwise x·log(x) with the convention 0·log 0 = 0."""

    name = "xlogx"

    @staticmethod
    def forward(a):
        if np.any(a < 0):
            raise ValueError("xlogx: negative input")
        pos = a > 0
        safe = np.where(pos, a, 1.0)
        return np.where(pos, a * np.log(safe), 0.0), (pos, safe)

    @staticmethod
    def backward(ctx, grad):
        pos, safe = ctx
        return (np.where(pos, grad * (np.log(safe) + 1.0), 0.0),)


class LogSoftmax(Op):
    name = "log_softmax"

    @staticmethod
    def forward(a, axis=-1):
        shifted = a - a.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        return out, (out, axis)

    @staticmethod
    def backward(ctx, grad):
        out, axis = ctx
        return (grad - np.exp(out) * grad.sum(axis=axis, keepdims=True),)


class Softmax(Op):
    name = "softmax"

    @staticmethod
    def forward(a, axis=-1):
        shifted = a - a.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)
        return out, (out, axis)

    @staticmethod
    def backward(ctx, grad):
        s, axis = ctx
        return (s * (grad - (grad * s).sum(axis=axis, keepdims=True)),)


class Sum(Op):
    name = "sum"

    @staticmethod
    def forward(a, axis=None, keepdims=False):
        return a.sum(axis=axis, keepdims=keepdims), (a.shape, axis, keepdims)

    @staticmethod
    def backward(ctx, grad):
        shape, axis, keepdims = ctx
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, shape).copy(),)


class Mean(Op):
    name = "mean"

    @staticmethod
    def forward(a, axis=None, keepdims=False):
        count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
        return a.mean(axis=axis, keepdims=keepdims), (a.shape, axis, keepdims, count)

    @staticmethod
    def backward(ctx, grad):
        shape, axis, keepdims, count = ctx
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad / count, shape).copy(),)


class Clamp(Op):
    """Clip to [lo, hi]; the gradient passes wherever lo <= x <= hi."""

    name = "clamp"

    @staticmethod
    def forward(a, lo=None, hi=None):
        mask = np.ones(a.shape, dtype=bool)
        if lo is not None:
            mask &= a >= lo
        if hi is not None:
            mask &= a <= hi
        return np.clip(a, lo, hi), mask

    @staticmethod
    def backward(mask, grad):
        return (grad * mask,)


class Reshape(Op):
    name = "reshape"

    @staticmethod
    def forward(a, shape):
        try:
            return a.reshape(shape), a.shape
        except ValueError:
            raise ShapeError("reshape", a.shape, shape) from None

    @staticmethod
    def backward(shape, grad):
        return (grad.reshape(shape),)


class Slice(Op):
    name = "slice"

    @staticmethod
    def forward(a, key):
        return a[key], (a.shape, key)

    @staticmethod
    def backward(ctx, grad):
        shape, key = ctx
        out = np.zeros(shape, dtype=grad.dtype)
        out[key] = grad
        return (out,)


class Take(Op):
    """Gather rows along the leading axis; repeated indices accumulate."""

    name = "take"

    @staticmethod
    def forward(a, indices):
        if indices.size and (indices.min() < -a.shape[0] or indices.max() >= a.shape[0]):
            raise ShapeError("take", a.shape, indices.shape, detail="index out of range")
        return a[indices], (a.shape, indices)

    @staticmethod
    def backward(ctx, grad):
        shape, indices = ctx
        out = np.zeros(shape, dtype=grad.dtype)
        np.add.at(out, indices, grad)
        return (out,)


class Concat(Op):
    name = "concat"

    @staticmethod
    def forward(*arrays, axis=0):
        try:
            out = np.concatenate(arrays, axis=axis)
        except ValueError:
            raise ShapeError("concat", *(a.shape for a in arrays)) from None
        bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return out, (bounds, axis)

    @staticmethod
    def backward(ctx, grad):
        bounds, axis = ctx
        return tuple(np.split(grad, bounds, axis=axis))


class Conv2d(Op):
    """Direct 2-D cross-correlation over NCHW input with an FCkk kernel."""

    name = "conv2d"

    @staticmethod
    def forward(x, w, b=None, stride=1, padding=0):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError("conv2d", x.shape, w.shape)
        if b is not None and b.shape != (w.shape[0],):
            raise ShapeError("conv2d", w.shape, b.shape, detail="bias must have one entry per filter")
        kh, kw = w.shape[2:]
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        if xp.shape[2] < kh or xp.shape[3] < kw:
            raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than padded input")
        windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        windows = windows[:, :, ::stride, ::stride]
        out = np.einsum("nchwij,fcij->nfhw", windows, w, optimize=True)
        if b is not None:
            out = out + b[None, :, None, None]
        return out, (x.shape, xp.shape, w, windows, stride, padding, b is not None)

    @staticmethod
    def backward(ctx, grad):
        x_shape, xp_shape, w, windows, stride, padding, has_bias = ctx
        kh, kw = w.shape[2:]
        ho, wo = grad.shape[2:]
        gw = np.einsum("nfhw,nchwij->fcij", grad, windows, optimize=True)
        gxp = np.zeros(xp_shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                contrib = np.einsum("nfhw,fc->nchw", grad, w[:, :, i, j], optimize=True)
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib
        gx = gxp[:, :, padding:padding + x_shape[2], padding:padding + x_shape[3]] if padding else gxp
        gb = grad.sum(axis=(0, 2, 3)) if has_bias else None
        return (gx, gw, gb) if has_bias else (gx, gw)


# ---------------------------------------------------------------------------
# Functional wrappers
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    return apply(Add, a, b)


def sub(a, b) -> Tensor:
    return apply(Sub, a, b)


def mul(a, b) -> Tensor:
    return apply(Mul, a, b)


def div(a, b) -> Tensor:
    return apply(Div, a, b)


def matmul(a, b) -> Tensor:
    return apply(MatMul, a, b)


def dot(a, b) -> Tensor:
    return apply(Dot, a, b)


def relu(a) -> Tensor:
    return apply(ReLU, a)


def sigmoid(a) -> Tensor:
    return apply(Sigmoid, a)


def log(a) -> Tensor:
    return apply(Log, a)


def exp(a) -> Tensor:
    return apply(Exp, a)


def xlogx(a) -> Tensor:
    return apply(XLogX, a)


def softmax(a, axis: int = -1) -> Tensor:
    return apply(Softmax, a, axis=axis)


def log_softmax(a, axis: int = -1) -> Tensor:
    return apply(LogSoftmax, a, axis=axis)


def clamp(a, lo=None, hi=None) -> Tensor:
    return apply(Clamp, a, lo=lo, hi=hi)


def take(a, indices) -> Tensor:
    return apply(Take, a, indices=np.asarray(indices, dtype=np.intp))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return apply(Concat, *tensors, axis=axis)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    if b is None:
        return apply(Conv2d, x, w, stride=stride, padding=padding)
    return apply(Conv2d, x, w, b, stride=stride, padding=padding)


def sign(a) -> np.ndarray:
    """Elementwise sign with sign(0) = 0.  Forward-only, never recorded."""
    values = a.values if isinstance(a, Tensor) else np.asarray(a)
    return np.sign(values)
