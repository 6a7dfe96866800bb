"""Dense float64 tensors with tape-based reverse-mode differentiation.

The engine is deliberately small: it supports the operations the encoder,
decoder and divergence code need (broadcasting arithmetic, 2-D matmul,
reductions, a handful of pointwise nonlinearities, slicing and
concatenation) and nothing else.  Graphs are rebuilt on every forward pass.
"""

from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np

from .errors import NonFiniteLoss, ShapeMismatch


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array that records how it was computed.

    Only tensors created with ``requires_grad=True`` (and everything computed
    from them) carry a graph; constants are plain wrappers.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 1000.0

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # differentiation ------------------------------------------------------

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        if grad is None:
            if self.size != 1:
                raise ShapeMismatch("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root):
    order, seen = [], set()
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# primitive operations -------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def power(a, exponent):
    a = as_tensor(a)
    p = float(exponent)
    return _node(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul of {a.shape} and {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a):
    return _node(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def _is_basic_index(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)


def getitem(a, index):
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)
    return _node(a.data[index], (a,), backward)


def tsum(a, axis=None, keepdims=False):
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a, axis=None, keepdims=False):
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) / float(count)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def exp(a):
    if not isinstance(a, Tensor):
        return np.exp(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    if not isinstance(a, Tensor):
        return np.log(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a):
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid_array(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a):
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _node(out, (a,), lambda g: (g * sigmoid_array(x),))


def clip(a, lo, hi):
    """Clamp values; the gradient is zero where the clamp is active."""
    if not isinstance(a, Tensor):
        return np.clip(a, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def log_softmax(a, axis=-1):
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return _node(out, (a,), backward)


ACTIVATIONS = {"tanh": tanh, "relu": relu, "softplus": softplus}


# parameter vectors ----------------------------------------------------------


class ParamVector:
    """Flat float64 parameter vector split into named, ordered segments.

    Arithmetic is segment-aligned and returns new vectors; operands must have
    the same segment names, order and lengths.
    """

    __slots__ = ("segments",)

    def __init__(self, segments):
        self.segments = OrderedDict(
            (name, np.array(arr, dtype=np.float64).reshape(-1)) for name, arr in segments.items())

    @property
    def names(self):
        return tuple(self.segments)

    @property
    def total_dim(self):
        return sum(arr.size for arr in self.segments.values())

    def __getitem__(self, name):
        return self.segments[name]

    def __repr__(self):
        parts = ", ".join(f"{k}[{v.size}]" for k, v in self.segments.items())
        return f"ParamVector({parts})"

    def check_aligned(self, other):
        if not isinstance(other, ParamVector):
            raise ShapeMismatch(f"expected ParamVector, got {type(other).__name__}")
        if self.names != other.names or any(
                a.size != b.size for a, b in zip(self.segments.values(), other.segments.values())):
            raise ShapeMismatch(f"segment structure differs: {self!r} vs {other!r}")

    def _binary(self, other, op):
        if isinstance(other, ParamVector):
            self.check_aligned(other)
            return ParamVector({k: op(v, other.segments[k]) for k, v in self.segments.items()})
        return ParamVector({k: op(v, other) for k, v in self.segments.items()})

    def __add__(self, other):
        return self._binary(other, np.add)

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __mul__(self, scalar):
        if isinstance(scalar, ParamVector):
            return self._binary(scalar, np.multiply)
        return ParamVector({k: v * float(scalar) for k, v in self.segments.items()})

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return self * (1.0 / float(scalar))

    def __neg__(self):
        return self * -1.0

    def dot(self, other):
        self.check_aligned(other)
        return float(sum(np.dot(v, other.segments[k]) for k, v in self.segments.items()))

    def norm(self):
        return float(np.sqrt(self.dot(self)))

    def flat(self):
        return np.concatenate(list(self.segments.values()))

    def with_segment(self, name, values):
        """Copy with one segment replaced."""
        if name not in self.segments or np.size(values) != self.segments[name].size:
            raise ShapeMismatch(f"cannot replace segment {name!r}")
        out = self.copy()
        out.segments[name] = np.array(values, dtype=np.float64).reshape(-1)
        return out

    def copy(self):
        return ParamVector(self.segments)

    def zeros_like(self):
        return ParamVector({k: np.zeros_like(v) for k, v in self.segments.items()})

    def equals(self, other):
        """Bit-exact equality of structure and values."""
        try:
            self.check_aligned(other)
        except ShapeMismatch:
            return False
        return all(np.array_equal(v, other.segments[k]) for k, v in self.segments.items())

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.segments.values())

    def to_dict(self):
        return {k: v.tolist() for k, v in self.segments.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(OrderedDict((k, np.asarray(v, dtype=np.float64)) for k, v in d.items()))

    @classmethod
    def from_flat(cls, like, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != like.total_dim:
            raise ShapeMismatch(f"flat vector of size {flat.size}, expected {like.total_dim}")
        out, start = OrderedDict(), 0
        for k, v in like.segments.items():
            out[k] = flat[start:start + v.size]
            start += v.size
        return cls(out)


def param_distance_sq(a, b):
    """Squared Euclidean distance between two aligned parameter vectors."""
    a.check_aligned(b)
    return float(sum(np.sum((v - b.segments[k]) ** 2) for k, v in a.segments.items()))


# optimisation -------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    m: ParamVector
    v: ParamVector
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(params.zeros_like(), params.zeros_like(), 0, lr, beta1, beta2, eps)

    def with_lr(self, lr):
        return replace(self, lr=lr)


def adam_step(params, grads, state):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    params.check_aligned(grads)
    params.check_aligned(state.m)
    if state.lr <= 0:
        raise ValueError("Adam learning rate must be positive")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    step = state.lr / (1.0 - b1 ** t)
    bc2 = 1.0 - b2 ** t
    new_p, new_m, new_v = OrderedDict(), OrderedDict(), OrderedDict()
    for k, p in params.segments.items():
        g = grads.segments[k]
        m = b1 * state.m.segments[k] + (1.0 - b1) * g
        v = b2 * state.v.segments[k] + (1.0 - b2) * (g * g)
        new_p[k] = p - step * m / (np.sqrt(v / bc2) + state.eps)
        new_m[k], new_v[k] = m, v
    return ParamVector(new_p), replace(state, m=ParamVector(new_m), v=ParamVector(new_v), step_count=t)


# evaluation helpers -------------------------------------------------------


def _leaves(params, requires_grad):
    return OrderedDict((k, Tensor(v, requires_grad=requires_grad)) for k, v in params.segments.items())


def loss_value(model_fn, params, batch):
    """Evaluate ``model_fn`` without recording a graph."""
    out = model_fn(_leaves(params, False), batch)
    value = as_tensor(out).data.item()
    if not np.isfinite(value):
        raise NonFiniteLoss(f"loss evaluated to {value}")
    return value


def forward_backward(model_fn, params, batch):
    """Return ``(loss, grads)`` for a scalar ``model_fn(tensors, batch)``.

    ``tensors`` maps each segment name to a leaf tensor; ``grads`` has the same
    segment structure as ``params`` (zero for segments the loss ignores).
    """
    leaves = _leaves(params, True)
    out = as_tensor(model_fn(leaves, batch))
    if out.size != 1:
        raise ShapeMismatch(f"model_fn must return a scalar, got shape {out.shape}")
    value = out.data.item()
    if not np.isfinite(value):
        raise NonFiniteLoss(f"loss evaluated to {value}")
    if out.requires_grad:
        out.backward()
    grads = ParamVector(OrderedDict(
        (k, leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
        for k, leaf in leaves.items()))
    if not grads.all_finite():
        raise NonFiniteLoss("non-finite gradient entry")
    return value, grads


def finite_diff_check(model_fn, params, batch, eps=1e-5, max_coords=256, rng=None, floor=1e-6):
    """Max relative error between analytic and central-difference gradients.

    When ``params.total_dim > max_coords`` a random subset of coordinates is
    checked.  The relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    _, grads = forward_backward(model_fn, params, batch)
    flat, analytic = params.flat(), grads.flat()
    n = flat.size
    if n > max_coords:
        rng = np.random.default_rng(0) if rng is None else rng
        coords = np.sort(rng.choice(n, size=max_coords, replace=False))
    else:
        coords = np.arange(n)
    worst = 0.0
    for i in coords:
        plus, minus = flat.copy(), flat.copy()
        plus[i] += eps
        minus[i] -= eps
        fp = loss_value(model_fn, ParamVector.from_flat(params, plus), batch)
        fm = loss_value(model_fn, ParamVector.from_flat(params, minus), batch)
        numeric = (fp - fm) / (2.0 * eps)
        a = analytic[i]
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
    return worst
