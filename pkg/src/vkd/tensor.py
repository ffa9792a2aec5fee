"""A small reverse-mode automatic differentiation engine over float64 numpy arrays.

Only what the model and its objectives need: dense 2-D/1-D arithmetic,
a handful of pointwise nonlinearities, reductions, concatenation, slicing
and inverted dropout. Broadcasting is limited to a leading batch dimension
(``(B, n)`` against ``(n,)``) and to scalar constants.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Operands of an op have incompatible shapes."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        shown = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


class GradCheckError(ArithmeticError):
    """A finite-difference evaluation produced a non-finite value."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording operations for backward."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_ctx", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError("tensor", arr.shape)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._ctx = None
        self.name = name

    # -- introspection -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def values(self):
        """Row-major flat copy of the values."""
        return self.data.ravel().copy()

    def item(self):
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- operator sugar ----------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, exp(-log(other)))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def backward(self, accumulate=False):
        backward(self, accumulate=accumulate)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# graph machinery
# ---------------------------------------------------------------------------


class Function:
    """One recorded op. Subclasses implement ``forward`` on arrays and
    ``backward`` mapping the output gradient to one gradient per input
    (``None`` where no gradient is needed)."""

    name = "op"

    def __init__(self):
        self.inputs = ()
        self.saved = ()

    @classmethod
    def apply(cls, *inputs, **kwargs):
        inputs = tuple(as_tensor(t) for t in inputs)
        fn = cls()
        out_data = fn.forward(*(t.data for t in inputs), **kwargs)
        needs_grad = _grad_enabled and any(t.requires_grad for t in inputs)
        out = Tensor.__new__(Tensor)
        out.data = out_data
        out.requires_grad = needs_grad
        out.grad = None
        out.name = None
        out._ctx = None
        if needs_grad:
            fn.inputs = inputs
            out._ctx = fn
        return out

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


@dataclass
class Graph:
    """Nodes reachable from a root, inputs before the ops that consume them."""

    nodes: list

    @classmethod
    def trace(cls, root):
        order = []
        seen = set()
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
            if node._ctx is not None:
                for parent in node._ctx.inputs:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        return cls(order)

    @property
    def leaves(self):
        return [n for n in self.nodes if n._ctx is None]


def backward(root, accumulate=False):
    """Populate ``.grad`` on every requires-grad tensor reachable from ``root``.

    Leaf gradients are reset first unless ``accumulate`` is true.
    """
    if root.data.size != 1:
        raise ShapeError("backward (root must be scalar)", root.shape)
    if not root.requires_grad or root._ctx is None:
        raise RuntimeError("backward: root is not attached to a graph")
    graph = Graph.trace(root)
    grads = {id(root): np.ones_like(root.data)}
    for node in graph.nodes:
        if node._ctx is None and not accumulate:
            node.grad = np.zeros_like(node.data)
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._ctx is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad = node.grad + g
            continue
        node.grad = g
        parent_grads = node._ctx.backward(g)
        for parent, pg in zip(node._ctx.inputs, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# shape helpers
# ---------------------------------------------------------------------------


def _broadcast_shape(op, a, b):
    if a == b:
        return a
    if a == ():
        return b
    if b == ():
        return a
    if len(a) == len(b) + 1 and a[1:] == b:
        return a
    if len(b) == len(a) + 1 and b[1:] == a:
        return b
    raise ShapeError(op, a, b)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    return grad.sum(axis=0)


# ---------------------------------------------------------------------------
# binary ops
# ---------------------------------------------------------------------------


class Add(Function):
    name = "add"

    def forward(self, a, b):
        _broadcast_shape(self.name, a.shape, b.shape)
        self.saved = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        sa, sb = self.saved
        return _unbroadcast(grad, sa), _unbroadcast(grad, sb)


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _broadcast_shape(self.name, a.shape, b.shape)
        self.saved = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        sa, sb = self.saved
        return _unbroadcast(grad, sa), _unbroadcast(-grad, sb)


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _broadcast_shape(self.name, a.shape, b.shape)
        self.saved = (a, b)
        return a * b

    def backward(self, grad):
        a, b = self.saved
        return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
            raise ShapeError(self.name, a.shape, b.shape)
        self.saved = (a, b)
        return a @ b

    def backward(self, grad):
        a, b = self.saved
        a2 = a if a.ndim == 2 else a[None, :]
        b2 = b if b.ndim == 2 else b[:, None]
        g2 = grad.reshape(a2.shape[0], b2.shape[1])
        ga = (g2 @ b2.T).reshape(a.shape)
        gb = (a2.T @ g2).reshape(b.shape)
        return ga, gb


def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def matmul(a, b):
    return MatMul.apply(a, b)


# ---------------------------------------------------------------------------
# pointwise ops
# ---------------------------------------------------------------------------


class Relu(Function):
    name = "relu"

    def forward(self, x):
        self.saved = (x > 0,)
        return np.where(x > 0, x, 0.0)

    def backward(self, grad):
        (mask,) = self.saved
        return (grad * mask,)


class Tanh(Function):
    name = "tanh"

    def forward(self, x):
        out = np.tanh(x)
        self.saved = (out,)
        return out

    def backward(self, grad):
        (out,) = self.saved
        return (grad * (1.0 - out * out),)


class Exp(Function):
    name = "exp"

    def forward(self, x):
        out = np.exp(x)
        self.saved = (out,)
        return out

    def backward(self, grad):
        (out,) = self.saved
        return (grad * out,)


class Log(Function):
    name = "log"

    def forward(self, x):
        self.saved = (x,)
        return np.log(x)

    def backward(self, grad):
        (x,) = self.saved
        return (grad / x,)


class Softplus(Function):
    name = "softplus"

    def forward(self, x):
        self.saved = (x,)
        return _kernels.softplus(x)

    def backward(self, grad):
        (x,) = self.saved
        return (grad * _kernels.sigmoid(x),)


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, x):
        out = _kernels.sigmoid(x)
        self.saved = (out,)
        return out

    def backward(self, grad):
        (out,) = self.saved
        return (grad * out * (1.0 - out),)


class Clamp(Function):
    name = "clamp"

    def forward(self, x, lo, hi):
        self.saved = ((x >= lo) & (x <= hi),)
        return np.clip(x, lo, hi)

    def backward(self, grad):
        (inside,) = self.saved
        return (grad * inside,)


class Square(Function):
    name = "square"

    def forward(self, x):
        self.saved = (x,)
        return x * x

    def backward(self, grad):
        (x,) = self.saved
        return (2.0 * grad * x,)


def relu(x):
    return Relu.apply(x)


def tanh(x):
    return Tanh.apply(x)


def exp(x):
    return Exp.apply(x)


def log(x):
    return Log.apply(x)


def softplus(x):
    return Softplus.apply(x)


def sigmoid(x):
    return Sigmoid.apply(x)


def clamp(x, lo, hi):
    """Clip to ``[lo, hi]``; gradient is zero where clipping is active."""
    return Clamp.apply(x, lo=lo, hi=hi)


def square(x):
    return Square.apply(x)


# ---------------------------------------------------------------------------
# reductions and layout
# ---------------------------------------------------------------------------


class Sum(Function):
    name = "sum"

    def forward(self, x, axis=None):
        self.saved = (x.shape, axis)
        return np.asarray(x.sum(axis=axis))

    def backward(self, grad):
        shape, axis = self.saved
        if axis is not None:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, shape).copy(),)


class Mean(Function):
    name = "mean"

    def forward(self, x, axis=None):
        count = x.size if axis is None else x.shape[axis]
        self.saved = (x.shape, axis, count)
        return np.asarray(x.mean(axis=axis))

    def backward(self, grad):
        shape, axis, count = self.saved
        if axis is not None:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad / count, shape).copy(),)


class Concat(Function):
    name = "concat"

    def forward(self, *arrays, axis=-1):
        ref = arrays[0].shape
        ax = axis % len(ref)
        for arr in arrays[1:]:
            if arr.ndim != len(ref) or any(arr.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
                raise ShapeError(self.name, ref, arr.shape)
        self.saved = (ax, np.cumsum([a.shape[ax] for a in arrays])[:-1])
        return np.concatenate(arrays, axis=ax)

    def backward(self, grad):
        ax, splits = self.saved
        return tuple(np.split(grad, splits, axis=ax))


class Slice(Function):
    name = "slice"

    def forward(self, x, index=None):
        self.saved = (x.shape, index)
        return np.array(x[index])

    def backward(self, grad):
        shape, index = self.saved
        out = np.zeros(shape)
        out[index] = grad
        return (out,)


class Dropout(Function):
    name = "dropout"

    def forward(self, x, mask=None, scale=1.0):
        m = mask * scale
        self.saved = (m,)
        return x * m

    def backward(self, grad):
        (m,) = self.saved
        return (grad * m,)


def sum_(x, axis=None):
    return Sum.apply(x, axis=axis)


def mean(x, axis=None):
    return Mean.apply(x, axis=axis)


def concat(tensors, axis=-1):
    return Concat.apply(*tensors, axis=axis)


def _check_basic_index(index):
    parts = index if isinstance(index, tuple) else (index,)
    for p in parts:
        if not isinstance(p, (int, np.integer, slice)) and p is not Ellipsis:
            raise TypeError(f"slice: only basic indexing is supported, got {type(p).__name__}")


def slice_(x, index):
    _check_basic_index(index)
    return Slice.apply(x, index=index)


def dropout_mask(shape, rate, seed):
    """Keep-mask for inverted dropout; ``seed`` is any int or tuple of ints."""
    key = list(seed) if isinstance(seed, (tuple, list)) else [seed]
    rng = np.random.default_rng(key)
    return (rng.random(shape) >= rate).astype(np.float64)


def dropout(x, rate, train, seed):
    """Inverted dropout: identity when not training, else zero a ``rate``
    fraction and scale survivors by ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    mask = dropout_mask(x.shape, rate, seed)
    return Dropout.apply(x, mask=mask, scale=1.0 / (1.0 - rate))


# ---------------------------------------------------------------------------
# fused ops backed by kernels
# ---------------------------------------------------------------------------


class EmbedMean(Function):
    name = "embed_mean"

    def forward(self, table, tokens=None):
        pooled, counts = _kernels.embed_mean_forward(table, tokens)
        self.saved = (tokens, counts, table.shape[0])
        return pooled

    def backward(self, grad):
        tokens, counts, vocab = self.saved
        return (_kernels.embed_mean_backward(grad, tokens, counts, vocab),)


class BceWithLogits(Function):
    name = "bce_with_logits"

    def forward(self, logits, targets):
        if logits.ndim != 2 or logits.shape != targets.shape:
            raise ShapeError(self.name, logits.shape, targets.shape)
        loss, dlogits = _kernels.bce_logits(logits, targets)
        self.saved = (dlogits,)
        return loss

    def backward(self, grad):
        (dlogits,) = self.saved
        return grad[:, None] * dlogits, None


def embed_mean(table, tokens):
    """Mean of ``table`` rows selected by ``tokens`` (B, S), skipping id 0.

    Rows with no non-padding token pool to the zero vector.
    """
    tokens = np.ascontiguousarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ShapeError("embed_mean", tokens.shape)
    return EmbedMean.apply(table, tokens=tokens)


def bce_with_logits(logits, targets):
    """Per-row sum of the numerically stable binary cross entropy."""
    return BceWithLogits.apply(logits, as_tensor(targets))


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    param_index: int
    coordinate: tuple
    analytic: float
    numeric: float


def gradcheck(f, params, h=1e-5):
    """Compare reverse-mode gradients of ``f()`` with central differences.

    ``f`` takes no arguments and must be deterministic; it reads ``params``
    (leaf tensors) which are perturbed in place and restored. The error per
    coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not (0.0 < h <= 1e-3):
        raise ValueError(f"gradcheck: step h must lie in (0, 1e-3], got {h}")
    root = f()
    backward(root)
    analytic = [p.grad.copy() for p in params]
    worst = GradCheckResult(0.0, -1, (), 0.0, 0.0)
    with no_grad():
        for pi, p in enumerate(params):
            flat = p.data.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                fp = f().item()
                flat[j] = orig - h
                fm = f().item()
                flat[j] = orig
                coord = np.unravel_index(j, p.shape) if p.shape else ()
                coord = tuple(int(c) for c in coord)
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise GradCheckError(f"non-finite value perturbing param {pi} at {coord}")
                numeric = (fp - fm) / (2.0 * h)
                a = float(analytic[pi].reshape(-1)[j])
                err = abs(a - numeric) / max(1.0, abs(a))
                if err > worst.max_rel_error or worst.param_index < 0:
                    worst = GradCheckResult(err, pi, coord, a, numeric)
    return worst


def finite_difference_check(f, params, h=1e-5):
    """Max relative error between analytic and central-difference gradients."""
    return gradcheck(f, params, h).max_rel_error
