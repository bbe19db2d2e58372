"""Reverse-mode automatic differentiation over numpy arrays.

A Tape keeps a node list in creation order: the operation kind, the parent node
indices and one local-partial closure per parent. Nodes are appended only after
their parents exist, so the list is already topologically sorted and the
backward pass is a single reverse sweep.

Every operation below is also usable on plain arrays: when no argument is a
Tensor it simply returns the numpy result. Problem coefficients written with
these functions therefore run unchanged inside and outside a recorded rollout.
"""
import numpy as np

from fbsdej.exceptions import DivergenceError


class Tape:
    """Recorded computation graph with value and adjoint buffers."""

    def __init__(self):
        self.kinds = []
        self.values = []
        self.parents = []
        self.partials = []
        self.param_slots = []
        self.param_size = 0
        self.adjoints = None

    def __len__(self):
        return len(self.values)

    def _append(self, kind, value, parents, partials):
        self.kinds.append(kind)
        self.values.append(value)
        self.parents.append(parents)
        self.partials.append(partials)
        return Tensor(self, len(self.values) - 1)

    def variable(self, value):
        """Leaf node that is differentiated but not part of a ParamSet."""
        return self._append("leaf", np.asarray(value, dtype=float), (), ())

    def watch(self, value, offset):
        """Leaf node tied to slot [offset, offset + size) of a flat parameter vector."""
        value = np.asarray(value, dtype=float)
        tensor = self._append("param", value, (), ())
        self.param_slots.append((tensor.index, int(offset)))
        self.param_size = max(self.param_size, int(offset) + value.size)
        return tensor

    def record(self, kind, value, inputs, partials):
        parents = tuple(x.index if isinstance(x, Tensor) else None for x in inputs)
        return self._append(kind, value, parents, tuple(partials))

    def backward(self, output):
        """Propagate adjoints from `output` to every node it depends on."""
        if not isinstance(output, Tensor) or output.tape is not self:
            raise ValueError("backward() needs a Tensor recorded on this tape")

        adjoints = [None] * len(self.values)
        adjoints[output.index] = np.ones_like(self.values[output.index])
        for i in range(output.index, -1, -1):
            g = adjoints[i]
            if g is None or not self.parents[i]:
                continue
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"Non-finite adjoint at node {i}", node_kind=self.kinds[i])
            for parent, partial in zip(self.parents[i], self.partials[i]):
                if parent is None:
                    continue
                contribution = partial(g)
                adjoints[parent] = contribution if adjoints[parent] is None else adjoints[parent] + contribution
        self.adjoints = adjoints
        return adjoints


class Tensor:
    """Handle to one node of a Tape."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None

    def __init__(self, tape, index):
        self.tape = tape
        self.index = index

    @property
    def value(self):
        return self.tape.values[self.index]

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    @property
    def size(self):
        return np.size(self.value)

    @property
    def kind(self):
        return self.tape.kinds[self.index]

    def __repr__(self):
        return f"<Tensor #{self.index} {self.kind} shape={self.shape}>"

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return mean(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


# ─── Helpers ────────────────────────────────────────────────────────────────

def is_tensor(a):
    return isinstance(a, Tensor)


def value_of(a):
    return a.value if isinstance(a, Tensor) else a


def _tape_of(*args):
    tape = None
    for a in args:
        if isinstance(a, Tensor):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("Cannot combine tensors recorded on different tapes")
    return tape


def unbroadcast(g, shape):
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _normal_axes(axis, ndim):
    axes = axis if isinstance(axis, tuple) else (axis,)
    return tuple(a % ndim for a in axes)


# ─── Elementwise ────────────────────────────────────────────────────────────

def add(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.add(av, bv)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record("add", out, (a, b), (lambda g: unbroadcast(g, sa), lambda g: unbroadcast(g, sb)))


def sub(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.subtract(av, bv)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record("sub", out, (a, b), (lambda g: unbroadcast(g, sa), lambda g: -unbroadcast(g, sb)))


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.multiply(av, bv)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record("mul", out, (a, b), (lambda g: unbroadcast(g * bv, sa), lambda g: unbroadcast(g * av, sb)))


def div(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.divide(av, bv)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record("div", out, (a, b), (
        lambda g: unbroadcast(g / bv, sa),
        lambda g: unbroadcast(-g * out / bv, sb),
    ))


def neg(a):
    tape = _tape_of(a)
    out = np.negative(value_of(a))
    if tape is None:
        return out
    return tape.record("neg", out, (a,), (lambda g: -g,))


def power(a, exponent):
    """a ** exponent for a constant scalar exponent."""
    if isinstance(exponent, Tensor):
        raise TypeError("power() supports constant exponents only")
    tape = _tape_of(a)
    av = value_of(a)
    out = np.power(av, exponent)
    if tape is None:
        return out
    return tape.record("power", out, (a,), (lambda g: g * exponent * np.power(av, exponent - 1),))


def square(a):
    tape = _tape_of(a)
    av = value_of(a)
    out = np.square(av)
    if tape is None:
        return out
    return tape.record("square", out, (a,), (lambda g: 2.0 * g * av,))


def exp(a):
    tape = _tape_of(a)
    out = np.exp(value_of(a))
    if tape is None:
        return out
    return tape.record("exp", out, (a,), (lambda g: g * out,))


def log(a):
    tape = _tape_of(a)
    av = value_of(a)
    out = np.log(av)
    if tape is None:
        return out
    return tape.record("log", out, (a,), (lambda g: g / av,))


def sin(a):
    tape = _tape_of(a)
    av = value_of(a)
    out = np.sin(av)
    if tape is None:
        return out
    return tape.record("sin", out, (a,), (lambda g: g * np.cos(av),))


def cos(a):
    tape = _tape_of(a)
    av = value_of(a)
    out = np.cos(av)
    if tape is None:
        return out
    return tape.record("cos", out, (a,), (lambda g: -g * np.sin(av),))


def tanh(a):
    tape = _tape_of(a)
    out = np.tanh(value_of(a))
    if tape is None:
        return out
    return tape.record("tanh", out, (a,), (lambda g: g * (1.0 - out * out),))


def relu(a):
    """max(a, 0); the subgradient at 0 is 0."""
    tape = _tape_of(a)
    av = value_of(a)
    out = np.maximum(av, 0.0)
    if tape is None:
        return out
    return tape.record("relu", out, (a,), (lambda g: g * (av > 0.0),))


# ─── Reductions and shape ───────────────────────────────────────────────────

def sum(a, axis=None, keepdims=False):
    tape = _tape_of(a)
    av = value_of(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    if tape is None:
        return out
    shape = np.shape(av)

    def partial(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, _normal_axes(axis, len(shape)))
        return np.broadcast_to(g, shape)

    return tape.record("sum", out, (a,), (partial,))


def mean(a, axis=None):
    av = value_of(a)
    if axis is None:
        count = np.size(av)
    else:
        count = int(np.prod([np.shape(av)[i] for i in _normal_axes(axis, np.ndim(av))]))
    return div(sum(a, axis=axis), float(count))


def reshape(a, shape):
    tape = _tape_of(a)
    av = value_of(a)
    out = np.reshape(av, shape)
    if tape is None:
        return out
    original = np.shape(av)
    return tape.record("reshape", out, (a,), (lambda g: np.reshape(g, original),))


def broadcast_to(a, shape):
    tape = _tape_of(a)
    av = value_of(a)
    out = np.broadcast_to(av, shape)
    if tape is None:
        return out
    original = np.shape(av)
    return tape.record("broadcast", out, (a,), (lambda g: unbroadcast(g, original),))


def concat(parts, axis=-1):
    parts = list(parts)
    tape = _tape_of(*parts)
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    if tape is None:
        return out
    bounds = np.cumsum([0] + [np.shape(v)[axis] for v in values])

    def slicer(start, stop):
        def partial(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, stop)
            return g[tuple(index)]
        return partial

    partials = [slicer(bounds[i], bounds[i + 1]) for i in range(len(parts))]
    return tape.record("concat", out, parts, partials)


def getitem(a, index):
    tape = _tape_of(a)
    av = value_of(a)
    out = av[index]
    if tape is None:
        return out
    shape = np.shape(av)

    def partial(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return full

    return tape.record("getitem", out, (a,), (partial,))


# ─── Linear algebra ─────────────────────────────────────────────────────────

def matmul(a, b):
    """a @ b for a of any rank with b a vector or matrix, or a vector with b a matrix."""
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.matmul(av, bv)
    if tape is None:
        return out

    if np.ndim(bv) == 1:
        k = bv.shape[0]
        partials = (
            lambda g: g[..., None] * bv,
            lambda g: (av * g[..., None]).reshape(-1, k).sum(axis=0),
        )
    elif np.ndim(av) == 1:
        partials = (lambda g: bv @ g, lambda g: np.outer(av, g))
    else:
        k, m = bv.shape
        partials = (
            lambda g: g @ bv.T,
            lambda g: av.reshape(-1, k).T @ g.reshape(-1, m),
        )
    return tape.record("matmul", out, (a, b), partials)


def affine(x, weight, bias):
    """x @ weight + bias over the last axis of x, as one node."""
    tape = _tape_of(x, weight, bias)
    xv, wv, bv = value_of(x), value_of(weight), value_of(bias)
    out = np.matmul(xv, wv) + bv
    if tape is None:
        return out
    fan_in, fan_out = wv.shape
    return tape.record("affine", out, (x, weight, bias), (
        lambda g: g @ wv.T,
        lambda g: np.reshape(xv, (-1, fan_in)).T @ g.reshape(-1, fan_out),
        lambda g: g.reshape(-1, fan_out).sum(axis=0),
    ))


def bmv(matrices, vectors):
    """Batched matrix-vector product: [M, d, k] x [M, k] -> [M, d]."""
    tape = _tape_of(matrices, vectors)
    mv, vv = value_of(matrices), value_of(vectors)
    out = np.einsum("mij,mj->mi", mv, vv)
    if tape is None:
        return out
    return tape.record("bmv", out, (matrices, vectors), (
        lambda g: unbroadcast(g[:, :, None] * vv[:, None, :], np.shape(mv)),
        lambda g: unbroadcast(np.einsum("mij,mi->mj", mv, g), np.shape(vv)),
    ))
