"""Reverse-mode automatic differentiation over dense float64 arrays.

Small, closed op set: elementwise arithmetic (same shape or scalar
broadcast), exp/log/tanh/sigmoid/softplus, 2-D matmul, dilated 1-D
convolution, embedding lookup, full sum/mean reduction, concat, basic
slicing, masked fill. No general broadcasting; every backward rule is a
few lines and auditable.

Every tensor created by an op remembers its parents and a node id from a
global counter. Creation order is a topological order of the graph, so
``backward`` just walks reachable nodes by descending id — gradient
accumulation order is fixed and reruns are bit-identical.

All forward ops raise on non-finite outputs rather than letting NaN/Inf
propagate silently.
"""

import itertools
import math
from contextlib import contextmanager

import numpy as np

_node_counter = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


def _check_finite(arr, op):
    # a single reduction: any NaN/Inf makes the sum non-finite
    if not math.isfinite(float(np.sum(arr))):
        raise FloatingPointError(f"{op}: non-finite output")


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A float64 array plus optional gradient buffer and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_bwd", "_nid")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents = ()
        self._bwd = None
        self._nid = next(_node_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Populate ``grad`` on every reachable tensor that requires it.

        The loss must be scalar. Visits nodes in exact reverse creation
        order, which is a reverse topological order of the graph.
        """
        if self.data.shape != ():
            raise ValueError(f"backward: loss must be scalar, got shape {self.data.shape}")
        nodes = toposort(self)
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(nodes):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    # -- operator sugar ------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self):
        return sum_(self)

    def mean(self):
        return mean_(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)

    def masked_fill(self, mask, value):
        return masked_fill(self, mask, value)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def toposort(root):
    """All tensors reachable from ``root``, sorted by creation id."""
    seen = set()
    stack = [root]
    nodes = []
    while stack:
        node = stack.pop()
        if node._nid in seen:
            continue
        seen.add(node._nid)
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda t: t._nid)
    return nodes


def _make(data, op, parents, bwd):
    out = Tensor(data)
    out.op = op
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if track:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
    return out


def _coerce(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _is_scalar(t):
    return t.data.shape == ()


def _binary_shapes(a, b, op):
    if a.data.shape == b.data.shape or _is_scalar(a) or _is_scalar(b):
        return
    raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape} (only scalar broadcast supported)")


def _reduce_to(g, t):
    # collapse a full-shape gradient back onto a scalar operand
    if _is_scalar(t) and g.shape != ():
        return g.sum()
    return g


# -- elementwise arithmetic ---------------------------------------------


def add(a, b):
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "add")
    data = a.data + b.data
    _check_finite(data, "add")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a))
        if b.requires_grad:
            b._accumulate(_reduce_to(g, b))

    return _make(data, "add", (a, b), bwd)


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "sub")
    data = a.data - b.data
    _check_finite(data, "sub")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a))
        if b.requires_grad:
            b._accumulate(_reduce_to(-g, b))

    return _make(data, "sub", (a, b), bwd)


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "mul")
    data = a.data * b.data
    _check_finite(data, "mul")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, a))
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b))

    return _make(data, "mul", (a, b), bwd)


# -- elementwise nonlinearities ------------------------------------------


def exp(x):
    x = _coerce(x)
    data = np.exp(x.data)
    _check_finite(data, "exp")

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * data)

    return _make(data, "exp", (x,), bwd)


def log(x):
    x = _coerce(x)
    if np.any(x.data <= 0.0):
        raise ValueError("log: non-positive input")
    data = np.log(x.data)
    _check_finite(data, "log")

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g / x.data)

    return _make(data, "log", (x,), bwd)


def tanh(x):
    x = _coerce(x)
    data = np.tanh(x.data)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * (1.0 - data * data))

    return _make(data, "tanh", (x,), bwd)


def sigmoid(x):
    x = _coerce(x)
    # two-branch form avoids overflow for large |x|
    d = x.data
    data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    _check_finite(data, "sigmoid")

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * data * (1.0 - data))

    return _make(data, "sigmoid", (x,), bwd)


def softplus(x):
    x = _coerce(x)
    data = np.logaddexp(0.0, x.data)
    _check_finite(data, "softplus")

    def bwd(g):
        if x.requires_grad:
            d = x.data
            sig = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
            x._accumulate(g * sig)

    return _make(data, "softplus", (x,), bwd)


# -- linear algebra -------------------------------------------------------


def matmul(a, b):
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data
    _check_finite(data, "matmul")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(data, "matmul", (a, b), bwd)


def _shifted(a, offset):
    """Zero-padded shift along axis 0: out[t] = a[t + offset]."""
    n = a.shape[0]
    out = np.zeros_like(a)
    if offset >= 0:
        if offset < n:
            out[: n - offset] = a[offset:]
    else:
        if -offset < n:
            out[-offset:] = a[:n + offset]
    return out


def conv1d(x, w, dilation=1):
    """Same-padded dilated 1-D convolution.

    x: (P, C_in) token sequence, w: (K, C_in, C_out) with K odd. Output
    position t sees inputs t + (k - K//2) * dilation, zeros outside.
    """
    x, w = _coerce(x), _coerce(w)
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise ValueError(f"conv1d: expected x (P, C_in), w (K, C_in, C_out); got {x.data.shape}, {w.data.shape}")
    K, c_in, _ = w.data.shape
    if K % 2 != 1:
        raise ValueError("conv1d: kernel width must be odd")
    if x.data.shape[1] != c_in:
        raise ValueError(f"conv1d: channel mismatch {x.data.shape[1]} vs {c_in}")
    if dilation < 1:
        raise ValueError("conv1d: dilation must be >= 1")
    half = K // 2
    offsets = [(k - half) * dilation for k in range(K)]
    data = np.zeros((x.data.shape[0], w.data.shape[2]))
    for k, off in enumerate(offsets):
        data += _shifted(x.data, off) @ w.data[k]
    _check_finite(data, "conv1d")

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for k, off in enumerate(offsets):
                gx += _shifted(g @ w.data[k].T, -off)
            x._accumulate(gx)
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for k, off in enumerate(offsets):
                gw[k] = _shifted(x.data, off).T @ g
            w._accumulate(gw)

    return _make(data, "conv1d", (x, w), bwd)


def embedding(table, ids):
    """Row lookup: table (V, E) indexed by integer ids (P,)."""
    table = _coerce(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or table.data.ndim != 2:
        raise ValueError(f"embedding: expected table (V, E) and ids (P,); got {table.data.shape}, {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError("embedding: id out of range")
    data = table.data[ids]

    def bwd(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
            table._accumulate(gt)

    return _make(data, "embedding", (table,), bwd)


# -- reductions and shape ops ---------------------------------------------


def sum_(x):
    x = _coerce(x)
    data = x.data.sum()
    _check_finite(data, "sum")

    def bwd(g):
        if x.requires_grad:
            x._accumulate(np.full(x.data.shape, float(g)))

    return _make(data, "sum", (x,), bwd)


def mean_(x):
    x = _coerce(x)
    if x.data.size == 0:
        raise ValueError("mean: empty tensor")
    data = x.data.mean()
    _check_finite(data, "mean")

    def bwd(g):
        if x.requires_grad:
            x._accumulate(np.full(x.data.shape, float(g) / x.data.size))

    return _make(data, "mean", (x,), bwd)


def concat(tensors, axis=0):
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: empty input list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(data, "concat", tuple(tensors), bwd)


def slice_(x, key):
    x = _coerce(x)
    data = x.data[key]
    if np.isscalar(data) or data.ndim == 0:
        data = np.asarray(data, dtype=np.float64)

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[key] += g
            x._accumulate(gx)

    return _make(data, "slice", (x,), bwd)


def masked_fill(x, mask, value):
    """Replace entries where ``mask`` is True with ``value`` (constant)."""
    x = _coerce(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.data.shape:
        raise ValueError(f"masked_fill: mask shape {mask.shape} != data shape {x.data.shape}")
    data = np.where(mask, float(value), x.data)
    _check_finite(data, "masked_fill")

    def bwd(g):
        if x.requires_grad:
            x._accumulate(np.where(mask, 0.0, g))

    return _make(data, "masked_fill", (x,), bwd)


# -- op registry ----------------------------------------------------------

OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "matmul": matmul,
    "conv1d": conv1d,
    "embedding": embedding,
    "sum": sum_,
    "mean": mean_,
    "concat": concat,
    "slice": slice_,
    "masked_fill": masked_fill,
}


def apply_op(kind, *args, **kwargs):
    """Dispatch an op by name; the supported kinds are the keys of OPS."""
    if kind not in OPS:
        raise ValueError(f"unknown op kind: {kind!r}")
    return OPS[kind](*args, **kwargs)
