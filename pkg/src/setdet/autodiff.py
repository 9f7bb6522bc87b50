"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every operation returns a :class:`Node`. Calling :func:`backward` on a scalar
node walks the graph in reverse topological order and accumulates
``d(root)/d(node)`` into ``node.grad`` for every node with
``requires_grad=True``. Accumulation is additive; callers zero gradients.

Only the operations needed by the transformer, the losses and the box
geometry are provided. Elementwise binary ops broadcast like numpy.
"""

import numpy as np

from .errors import ContractViolation, NumericError

MASK_FILL = -1e9


class Node:
    """A value in the computation graph.

    ``grad`` always has the same shape as ``value``; it is allocated lazily
    and reads as zeros until something accumulates into it.
    """

    __slots__ = ("value", "_grad", "requires_grad", "op", "parents", "_backward")
    __array_ufunc__ = None  # make numpy defer to the reflected Node operators

    def __init__(self, value, requires_grad=False, op="leaf", parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self._grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = tuple(parents)
        self._backward = backward

    @property
    def grad(self):
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.value.shape:
            raise ContractViolation(f"grad shape {g.shape} != value shape {self.value.shape}")
        self._grad = g

    def zero_grad(self):
        self._grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def item(self):
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else self.value.item()

    def detach(self):
        return Node(self.value)

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_node(x):
    return x if isinstance(x, Node) else Node(x)


def _make(value, parents, backward, op):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Node(value, True, op, parents, backward)
    return Node(value, False, op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(root):
    """Accumulate gradients of scalar ``root`` into every reachable node."""
    if root.value.size != 1:
        raise ContractViolation(f"backward needs a scalar root, got shape {root.shape}")
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    pending = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = node.grad + g
        if node._backward is None:
            continue
        for p, pg in zip(node.parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            pending[key] = pending[key] + pg if key in pending else pg


def grad_check(f, x, eps=1e-5):
    """Max relative error between backprop and central differences.

    ``f`` maps ``x`` to a scalar node. ``x.grad`` is left holding the
    analytic gradient.
    """
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    x.zero_grad()
    out = f(x)
    if not np.all(np.isfinite(out.value)):
        raise NumericError("f(x) is not finite")
    backward(out)
    analytic = x.grad.copy()

    numeric = np.zeros_like(x.value)
    flat = x.value.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).value.item()
        flat[i] = orig - eps
        fm = f(x).value.item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("f(x) is not finite near x")
        numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_node(a), as_node(b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_node(a), as_node(b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_node(a), as_node(b)
    return _make(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape),
                            _unbroadcast(g * a.value, b.shape)), "mul")


def div(a, b):
    a, b = as_node(a), as_node(b)
    out = a.value / b.value

    def bw(g):
        return (_unbroadcast(g / b.value, a.shape),
                _unbroadcast(-g * out / b.value, b.shape))

    return _make(out, (a, b), bw, "div")


def neg(a):
    a = as_node(a)
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def power(a, p):
    a = as_node(a)
    p = float(p)
    return _make(a.value ** p, (a,), lambda g: (g * p * a.value ** (p - 1),), "pow")


def exp(a):
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_node(a)
    return _make(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def abs_(a):
    a = as_node(a)
    return _make(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),), "abs")


def relu(a):
    a = as_node(a)
    on = a.value > 0
    return _make(np.where(on, a.value, 0.0), (a,), lambda g: (g * on,), "relu")


def sigmoid(a):
    a = as_node(a)
    v = a.value
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clip(a, lo, hi):
    a = as_node(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return _make(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,), "clip")


def maximum(a, b):
    a, b = as_node(a), as_node(b)
    pick_a = a.value >= b.value
    return _make(np.maximum(a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape),
                            _unbroadcast(g * ~pick_a, b.shape)), "maximum")


def minimum(a, b):
    a, b = as_node(a), as_node(b)
    pick_a = a.value <= b.value
    return _make(np.minimum(a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape),
                            _unbroadcast(g * ~pick_a, b.shape)), "minimum")


# ---------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.value @ b.value, (a, b), bw, "matmul")


def mask_to_additive(mask):
    """Boolean "allowed" mask -> additive logits offset (0 or -1e9)."""
    mask = np.asarray(mask)
    if mask.dtype == bool:
        return np.where(mask, 0.0, MASK_FILL)
    return mask.astype(np.float64)


def softmax(a, axis=-1, mask=None):
    """Softmax along ``axis``; ``mask`` is a boolean allowed-table or an
    additive offset broadcastable to ``a``."""
    a = as_node(a)
    z = a.value
    if mask is not None:
        z = z + mask_to_additive(mask)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise over the last axis, then scale and shift."""
    x, gain, bias = as_node(x), as_node(gain), as_node(bias)
    mu = x.value.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(x.value.var(axis=-1, keepdims=True) + eps)
    xhat = (x.value - mu) * inv

    def bw(g):
        dxhat = g * gain.value
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _make(gain.value * xhat + bias.value, (x, gain, bias), bw, "layer_norm")


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def concat(nodes, axis=-1):
    nodes = [as_node(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([n.value for n in nodes], axis=axis), nodes, bw, "concat")


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a, idx):
    a = as_node(a)
    basic = _is_basic_index(idx)

    def bw(g):
        ga = np.zeros_like(a.value)
        if basic:
            ga[idx] = g
        else:
            np.add.at(ga, idx, g)
        return (ga,)

    return _make(a.value[idx], (a,), bw, "getitem")


def reshape(a, shape):
    a = as_node(a)
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_node(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(a.value, axes), (a,),
                 lambda g: (np.transpose(g, inv),), "transpose")


def sum_(a, axis=None, keepdims=False):
    a = as_node(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_node(a)
    count = a.value.size if axis is None else np.prod(
        [a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / count)
