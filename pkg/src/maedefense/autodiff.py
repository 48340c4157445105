"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Every operation returns a new :class:`Tensor`. When any operand requires a
gradient, the result records its parents and a backward closure; the chain of
parent links is the computation graph (built fresh per evaluation, no
persistent tape). :func:`backward` walks that graph once, in exact reverse
topological order, accumulating gradients additively across fan-out.

Broadcasting is deliberately restricted: two shapes are compatible only when
they are identical or one is a trailing suffix of the other (the bias-add
pattern). Anything else raises :class:`ShapeError` naming the operator and
both shapes.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

LAYER_NORM_EPS = 1e-5

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operator."""


class GraphError(RuntimeError):
    """Backward-pass misuse: non-scalar loss, spent graph, detached input."""


class Tensor:
    """Dense n-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_op",
                 "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._grad_fn = None
        self._op = "leaf"
        self._backward_done = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Copy of the value with no graph history and no gradient."""
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: tuple, grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._backward_done = False
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
    return out


def _suffix_reduce(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the leading axes it was broadcast along."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def _check_suffix(op: str, a_shape: tuple, b_shape: tuple) -> None:
    small, big = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    if len(small) and big[len(big) - len(small):] != small:
        raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} are neither equal "
                         f"nor in a trailing-suffix (bias) pattern")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix("add", a.shape, b.shape)
    data = a.data + b.data

    def grad_fn(g):
        return _suffix_reduce(g, a.shape), _suffix_reduce(g, b.shape)

    return _result(data, "add", (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix("sub", a.shape, b.shape)
    data = a.data - b.data

    def grad_fn(g):
        return _suffix_reduce(g, a.shape), -_suffix_reduce(g, b.shape)

    return _result(data, "sub", (a, b), grad_fn)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a Tensor or a plain scalar."""
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data * c, "mul", (a,), lambda g: (g * c,))
    _check_suffix("mul", a.shape, b.shape)
    data = a.data * b.data

    def grad_fn(g):
        return (_suffix_reduce(g * b.data, a.shape),
                _suffix_reduce(g * a.data, b.shape))

    return _result(data, "mul", (a, b), grad_fn)


# ---------------------------------------------------------------------------
# linear algebra and rearrangement


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for (…, n, k) × (k, m) or (…, n, k) × (…, k, m)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading (batch) dimensions differ for shapes "
                         f"{a.shape} and {b.shape}")
    data = a.data @ b.data

    def grad_fn(g):
        if b.ndim == 2:
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(data, "matmul", (a, b), grad_fn)


def transpose(a: Tensor, axes=None) -> Tensor:
    """Permute axes; default swaps the last two."""
    a = _as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose: need at least 2 axes, got shape {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of axes for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    data = np.transpose(a.data, axes)

    def grad_fn(g):
        return (np.transpose(g, inverse),)

    return _result(data, "transpose", (a,), grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot reshape {a.shape} ({a.size} elements) to {shape}")
    old = a.shape
    data = a.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(old),)

    return _result(data, "reshape", (a,), grad_fn)


def gather(a: Tensor, index, axis: int = 0) -> Tensor:
    """Select sub-tensors along ``axis`` with a 1-D integer index.

    Duplicate indices accumulate gradient additively (fan-out rule).
    """
    a = _as_tensor(a)
    index = np.asarray(index)
    if index.ndim != 1 or not np.issubdtype(index.dtype, np.integer):
        raise ShapeError(f"gather: index must be a 1-D integer array, got shape {index.shape} "
                         f"dtype {index.dtype}")
    n = a.shape[axis]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"gather: index out of range for axis {axis} of length {n}")
    data = np.take(a.data, index, axis=axis)
    key = (slice(None),) * axis + (index,)

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        return (ga,)

    return _result(data, "gather", (a,), grad_fn)


def gather_rows(a: Tensor, index) -> Tensor:
    """Per-row gather: for ``a`` of shape (B, N, …) and ``index`` (B, K),
    returns out[b, k] = a[b, index[b, k]]."""
    a = _as_tensor(a)
    index = np.asarray(index)
    if a.ndim < 2 or index.ndim != 2 or index.shape[0] != a.shape[0]:
        raise ShapeError(f"gather_rows: expected (B, N, ...) data with (B, K) index, "
                         f"got {a.shape} and {index.shape}")
    if not np.issubdtype(index.dtype, np.integer):
        raise ShapeError(f"gather_rows: index dtype must be integer, got {index.dtype}")
    n = a.shape[1]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"gather_rows: index out of range for axis 1 of length {n}")
    rows = np.arange(a.shape[0])[:, None]
    data = a.data[rows, index]

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, index), g)
        return (ga,)

    return _result(data, "gather_rows", (a,), grad_fn)


def where(cond, a: Tensor, b) -> Tensor:
    """Masked elementwise select: ``cond`` picks from ``a``, else from ``b``.

    ``cond`` is a constant boolean array broadcastable to ``a``'s shape;
    ``b`` may be a Tensor of the same shape or a plain scalar.
    """
    a = _as_tensor(a)
    cond = np.broadcast_to(np.asarray(cond, dtype=bool), a.shape)
    if not isinstance(b, Tensor):
        data = np.where(cond, a.data, float(b))
        return _result(data, "where", (a,), lambda g: (np.where(cond, g, 0.0),))
    if b.shape != a.shape:
        raise ShapeError(f"where: branch shapes differ, {a.shape} vs {b.shape}")
    data = np.where(cond, a.data, b.data)

    def grad_fn(g):
        return np.where(cond, g, 0.0), np.where(cond, 0.0, g)

    return _result(data, "where", (a, b), grad_fn)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def softmax(a: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    a = _as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError(f"softmax: last axis is empty for shape {a.shape}")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _result(s, "softmax", (a,), grad_fn)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf

    def grad_fn(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return _result(data, "gelu", (a,), grad_fn)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Layer normalization over the last axis with affine parameters."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    d = a.shape[-1] if a.ndim else 0
    if d == 0:
        raise ShapeError(f"layer_norm: last axis is empty for shape {a.shape}")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine parameters must have shape ({d},), "
                         f"got {gamma.shape} and {beta.shape}")
    mean = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat * gamma.data + beta.data

    def grad_fn(g):
        reduce_axes = tuple(range(g.ndim - 1))
        g_gamma = (g * xhat).sum(axis=reduce_axes)
        g_beta = g.sum(axis=reduce_axes)
        gh = g * gamma.data
        g_a = inv_std * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return g_a, g_gamma, g_beta

    return _result(data, "layer_norm", (a, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------
# reductions and losses


def tensor_sum(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.asarray(a.data.sum())

    def grad_fn(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(data, "sum", (a,), grad_fn)


def tensor_mean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.size == 0:
        raise ShapeError("mean: cannot reduce an empty tensor")
    n = a.size
    data = np.asarray(a.data.mean())

    def grad_fn(g):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _result(data, "mean", (a,), grad_fn)


def mean_axis(a: Tensor, axis: int) -> Tensor:
    """Mean over one axis (no keepdims)."""
    a = _as_tensor(a)
    axis = axis % a.ndim
    n = a.shape[axis]
    if n == 0:
        raise ShapeError(f"mean_axis: axis {axis} is empty for shape {a.shape}")
    data = a.data.mean(axis=axis)

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy(),)

    return _result(data, "mean_axis", (a,), grad_fn)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ, {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ShapeError("mse: cannot reduce empty tensors")
    diff = a.data - b.data
    n = a.size
    data = np.asarray((diff * diff).mean())

    def grad_fn(g):
        scaled = (2.0 / n) * diff * g
        return scaled, -scaled

    return _result(data, "mse", (a, b), grad_fn)


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy between integer labels and raw logits (B, K)."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[-1] == 0:
        raise ShapeError(f"cross_entropy: logits must be (batch, classes) with classes >= 1, "
                         f"got {logits.shape}")
    if labels.shape != (logits.shape[0],) or not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError(f"cross_entropy: labels must be integer of shape ({logits.shape[0]},), "
                         f"got {labels.shape} dtype {labels.dtype}")
    b, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"cross_entropy: label outside [0, {k})")
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    logsumexp = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=-1))
    data = np.asarray((logsumexp - z[np.arange(b), labels]).mean())

    def grad_fn(g):
        p = np.exp(z - zmax)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(b), labels] -= 1.0
        return (p * (g / b),)

    return _result(data, "cross_entropy", (logits,), grad_fn)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list:
    """All grad-requiring nodes reachable from root, parents before children."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring tensor the loss depends on.

    The loss must be scalar and its graph fresh: running backward twice on
    the same loss raises :class:`GraphError` (rebuild the graph instead of
    relying on silent re-accumulation).
    """
    if not isinstance(loss, Tensor):
        raise TypeError(f"backward expects a Tensor, got {type(loss).__name__}")
    if loss.ndim != 0:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise GraphError("backward already ran for this loss; rebuild the graph")
    if not loss.requires_grad:
        raise GraphError("loss does not require grad: the graph is empty")
    loss._backward_done = True
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._grad_fn is None or node.grad is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(node.grad)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += pg


def grad_wrt_input(loss: Tensor, inp: Tensor) -> Tensor:
    """Run backward and return dLoss/dInput as a fresh constant tensor.

    Callers that must leave model parameters untouched freeze them
    (``requires_grad=False``) before building the graph.
    """
    if not inp.requires_grad:
        raise GraphError("input does not require grad, so it cannot be differentiated against")
    backward(loss)
    if inp.grad is None:
        raise GraphError("input did not participate in the loss graph")
    return Tensor(inp.grad.copy())
