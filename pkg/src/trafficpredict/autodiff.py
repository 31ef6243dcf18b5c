"""Dense float64 tensors with a dynamic tape for reverse-mode differentiation.

Every forward operation appends one record to the tape of its inputs; calling
:meth:`Tape.backward` walks the records in reverse order and accumulates
adjoints into ``Tensor.grad``.  Tensors are rank 0, 1, 2 or 3; rank-2 tensors
are usually row batches (one row per agent or per edge).

Broadcasting is deliberately absent: binary elementwise ops require equal
shapes, with the single exception of a Python scalar operand.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericDomainError, NumericError, UsageError

__all__ = [
    "Tensor", "Tape",
    "matmul", "linear", "grouped_linear",
    "add", "sub", "mul", "div", "neg", "scale", "add_scalar",
    "tanh", "sigmoid", "exp", "log", "relu", "square",
    "softmax", "concat", "hstack", "vstack", "stack", "cols", "col",
    "take_rows", "segment_sum", "segment_softmax", "rowdot", "scale_rows",
    "mean_rows", "sum",
]


class Tensor:
    __slots__ = ("value", "grad", "tape", "requires_grad", "name", "_owns_grad", "_pending",
                 "_transposed")

    def __init__(self, value, tape=None, requires_grad=False, name=None):
        self.value = value
        self.grad = None
        self._owns_grad = False
        self._pending = None
        self._transposed = None
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def numpy(self):
        return self.value

    # operator sugar, mainly for tests and small scalar expressions
    def __add__(self, other):
        return add_scalar(self, other) if np.isscalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add_scalar(self, -other) if np.isscalar(other) else sub(self, other)

    def __mul__(self, other):
        return scale(self, other) if np.isscalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of primitive operations.

    A tape is rebuilt for every sequence; records are appended in execution
    order, which is already a topological order of the computation.
    """

    def __init__(self):
        self._records = []
        self._leaves = []
        self._deferred = []

    def __len__(self):
        return len(self._records)

    def leaf(self, value, name=None):
        """Differentiable input (a parameter); ``value`` is not copied."""
        t = Tensor(_as_array(value, copy=False), self, True, name)
        self._leaves.append(t)
        return t

    def constant(self, value):
        return Tensor(_as_array(value, copy=False), self, False)

    def zeros(self, *shape):
        return Tensor(np.zeros(shape), self, False)

    def bind(self, params):
        """Create one leaf per entry of a ``{name: ndarray}`` mapping."""
        return {name: self.leaf(value, name) for name, value in params.items()}

    def record(self, out, backward):
        self._records.append((out, backward))

    def backward(self, loss):
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise UsageError("loss must be a tensor recorded on this tape")
        if loss.value.size != 1 or loss.ndim > 1:
            raise UsageError(f"loss must be a scalar, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.value)
        for out, fn in reversed(self._records):
            if out._pending is not None:
                _flush(out)
            if out.grad is not None:
                fn(out.grad)
        for t in self._deferred:
            if t._pending is not None:
                _flush(t)
        self._deferred = []

    def zero_grad(self):
        for out, _ in self._records:
            out.grad, out._owns_grad, out._pending = None, False, None
        for t in self._leaves:
            t.grad, t._owns_grad, t._pending = None, False, None
        self._deferred = []


def _finite(arr):
    # one reduction: any NaN or Inf makes the sum non-finite
    return np.isfinite(arr.sum())


def _as_array(value, copy=True):
    arr = np.array(value, dtype=np.float64) if copy else np.asarray(value, dtype=np.float64)
    if not _finite(arr):
        raise NumericError("non-finite value supplied to the tape")
    return arr


def _acc(t, g):
    # A tensor may alias an upstream gradient array until it needs to add to
    # it; from then on it owns a private buffer and accumulates in place.
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    elif t._owns_grad:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._owns_grad = True


def _acc_part(t, index, g):
    """Accumulate ``g`` into ``t.grad[index]``."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros(t.value.shape)
        t._owns_grad = True
    elif not t._owns_grad:
        t.grad = t.grad.copy()
        t._owns_grad = True
    t.grad[index] += g


def _wt(w):
    """Contiguous transpose of the last two axes, cached on the tensor."""
    if w._transposed is None:
        w._transposed = np.ascontiguousarray(np.swapaxes(w.value, -1, -2))
    return w._transposed


def _defer_outer(t, index, g, x):
    """Queue ``g.T @ x`` for ``t.grad[index]`` (whole tensor when index is None).

    Weight gradients of one parameter arrive once per frame; queuing them and
    reducing with a single stacked matmul at flush time is much cheaper than
    accumulating many small outer products.
    """
    if not t.requires_grad:
        return
    if t._pending is None:
        t._pending = []
        t.tape._deferred.append(t)
    t._pending.append((index, g.reshape(-1, g.shape[-1]), x.reshape(-1, x.shape[-1])))


def _flush(t):
    groups = {}
    for index, g, x in t._pending:
        gs, xs = groups.setdefault(index, ([], []))
        gs.append(g)
        xs.append(x)
    t._pending = None
    for index, (gs, xs) in groups.items():
        contrib = np.concatenate(gs).T @ np.concatenate(xs)
        if index is None:
            _acc(t, contrib)
        else:
            _acc_part(t, index, contrib)


def _tape_of(*ts):
    for t in ts:
        if t.tape is not None:
            return t.tape
    return None


def _out(value, parents, backward, op):
    if not _finite(value):
        raise NumericError(f"{op} produced a non-finite value")
    rg = any(p.requires_grad for p in parents)
    tape = _tape_of(*parents)
    out = Tensor(value, tape, rg)
    if rg:
        if tape is None:
            raise UsageError("differentiable tensor without a tape")
        tape.record(out, backward)
    return out


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        _acc(a, g @ bv.T)
        _acc(b, av.T @ g)

    return _out(av @ bv, (a, b), backward, "matmul")


def linear(x, w, b=None):
    """``x @ w.T + b`` for a vector ``x`` of length ``in`` or a row batch ``(n, in)``."""
    if w.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not fit weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"linear: bias {b.shape} does not fit weight {w.shape}")
    xv, wv = x.value, w.value
    y = xv @ _wt(w)
    if b is not None:
        y = y + b.value
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        _acc(x, g @ wv)
        _defer_outer(w, None, g, xv)
        if b is not None:
            _acc(b, g if g.ndim == 1 else g.sum(axis=0))

    return _out(y, parents, backward, "linear")


def grouped_linear(x, w, b, groups):
    """Row-wise affine map with a per-row choice of weights.

    ``w`` has shape ``(G, out, in)`` and ``b`` ``(G, out)`` (or None); row ``r``
    of ``x`` is mapped with ``w[groups[r]]``.
    """
    groups = np.asarray(groups, dtype=np.intp)
    if w.ndim != 3 or x.ndim != 2 or x.shape[1] != w.shape[2] or len(groups) != x.shape[0]:
        raise DimensionError(f"grouped_linear: input {x.shape} does not fit weight {w.shape}")
    if b is not None and b.shape != w.shape[:2]:
        raise DimensionError(f"grouped_linear: bias {b.shape} does not fit weight {w.shape}")
    xv, wv, wt = x.value, w.value, _wt(w)
    members = [(k, np.flatnonzero(groups == k)) for k in np.unique(groups)]
    y = np.empty((xv.shape[0], wv.shape[1]))
    for k, rows in members:
        y[rows] = xv[rows] @ wt[k]
        if b is not None:
            y[rows] += b.value[k]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if x.requires_grad:
            gx = np.empty_like(xv)
            for k, rows in members:
                gx[rows] = g[rows] @ wv[k]
            _acc(x, gx)
        for k, rows in members:
            _defer_outer(w, k, g[rows], xv[rows])
            if b is not None:
                _acc_part(b, k, g[rows].sum(axis=0))

    return _out(y, parents, backward, "grouped_linear")


# ---------------------------------------------------------------------------
# elementwise

def add(a, b):
    _same_shape(a, b, "add")

    def backward(g):
        _acc(a, g)
        _acc(b, g)

    return _out(a.value + b.value, (a, b), backward, "add")


def sub(a, b):
    _same_shape(a, b, "sub")

    def backward(g):
        _acc(a, g)
        _acc(b, -g)

    return _out(a.value - b.value, (a, b), backward, "sub")


def mul(a, b):
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value

    def backward(g):
        _acc(a, g * bv)
        _acc(b, g * av)

    return _out(av * bv, (a, b), backward, "mul")


def div(a, b):
    _same_shape(a, b, "div")
    av, bv = a.value, b.value
    if (bv == 0).any():
        raise NumericDomainError("div: division by zero")
    y = av / bv

    def backward(g):
        _acc(a, g / bv)
        _acc(b, -g * y / bv)

    return _out(y, (a, b), backward, "div")


def neg(a):
    return _out(-a.value, (a,), lambda g: _acc(a, -g), "neg")


def scale(a, c):
    c = float(c)
    return _out(a.value * c, (a,), lambda g: _acc(a, g * c), "scale")


def add_scalar(a, c):
    return _out(a.value + float(c), (a,), lambda g: _acc(a, g), "add_scalar")


def square(a):
    av = a.value
    return _out(av * av, (a,), lambda g: _acc(a, 2.0 * g * av), "square")


def tanh(a):
    y = np.tanh(a.value)
    return _out(y, (a,), lambda g: _acc(a, g * (1.0 - y * y)), "tanh")


def sigmoid(a):
    # tanh form cannot overflow for any input
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _out(y, (a,), lambda g: _acc(a, g * y * (1.0 - y)), "sigmoid")


def exp(a):
    with np.errstate(over="ignore"):
        y = np.exp(a.value)
    return _out(y, (a,), lambda g: _acc(a, g * y), "exp")


def log(a):
    v = a.value
    if (v <= 0).any():
        raise NumericDomainError(f"log: non-positive input (min {v.min()!r})")
    return _out(np.log(v), (a,), lambda g: _acc(a, g / v), "log")


def relu(a):
    mask = a.value > 0
    return _out(a.value * mask, (a,), lambda g: _acc(a, g * mask), "relu")


def softmax(a):
    """Softmax over the last axis (a vector, or each row of a matrix)."""
    if a.ndim not in (1, 2) or a.shape[-1] == 0:
        raise DimensionError(f"softmax: needs a non-empty vector or row batch, got {a.shape}")
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _acc(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _out(y, (a,), backward, "softmax")


# ---------------------------------------------------------------------------
# structural

def concat(a, b):
    """Join two vectors."""
    if a.ndim != 1 or b.ndim != 1:
        raise DimensionError(f"concat: vectors required, got {a.shape} and {b.shape}")
    n = a.shape[0]

    def backward(g):
        _acc(a, g[:n])
        _acc(b, g[n:])

    return _out(np.concatenate([a.value, b.value]), (a, b), backward, "concat")


def hstack(ts):
    """Concatenate along the last axis (vectors or row batches with equal row count)."""
    ts = list(ts)
    if len({t.shape[:-1] for t in ts}) != 1:
        raise DimensionError(f"hstack: incompatible shapes {[t.shape for t in ts]}")
    edges = np.cumsum([0] + [t.shape[-1] for t in ts])

    def backward(g):
        for t, lo, hi in zip(ts, edges[:-1], edges[1:]):
            _acc(t, g[..., lo:hi])

    return _out(np.concatenate([t.value for t in ts], axis=-1), ts, backward, "hstack")


def vstack(ts):
    """Concatenate row batches along the first axis."""
    ts = list(ts)
    if len({t.shape[1:] for t in ts}) != 1 or any(t.ndim != 2 for t in ts):
        raise DimensionError(f"vstack: incompatible shapes {[t.shape for t in ts]}")
    edges = np.cumsum([0] + [t.shape[0] for t in ts])

    def backward(g):
        for t, lo, hi in zip(ts, edges[:-1], edges[1:]):
            _acc(t, g[lo:hi])

    return _out(np.concatenate([t.value for t in ts], axis=0), ts, backward, "vstack")


def stack(ts):
    """Stack equally shaped tensors along a new leading axis."""
    ts = list(ts)
    if len({t.shape for t in ts}) != 1:
        raise DimensionError(f"stack: shapes differ {[t.shape for t in ts]}")

    def backward(g):
        for k, t in enumerate(ts):
            _acc(t, g[k])

    return _out(np.stack([t.value for t in ts]), ts, backward, "stack")


def cols(a, start, stop):
    """Slice ``[start:stop]`` of the last axis."""
    if not 0 <= start <= stop <= a.shape[-1]:
        raise DimensionError(f"cols: [{start}:{stop}] out of range for {a.shape}")
    part = (Ellipsis, slice(start, stop))

    def backward(g):
        _acc_part(a, part, g)

    return _out(a.value[..., start:stop], (a,), backward, "cols")


def col(a, k):
    """Column ``k`` of a row batch as a vector."""
    if a.ndim != 2 or not 0 <= k < a.shape[1]:
        raise DimensionError(f"col: column {k} out of range for {a.shape}")
    def backward(g):
        _acc_part(a, (slice(None), k), g)

    return _out(a.value[:, k].copy(), (a,), backward, "col")


def take_rows(a, index):
    """Gather rows of ``a``; an index of -1 yields a row of zeros.

    A vector ``a`` is treated as a single row, so ``take_rows(v, [0, 0])``
    broadcasts ``v`` to two rows.
    """
    index = np.asarray(index, dtype=np.intp)
    vector = a.ndim == 1
    av = a.value[None, :] if vector else a.value
    if av.ndim != 2 or (index >= av.shape[0]).any() or (index < -1).any():
        raise DimensionError(f"take_rows: index out of range for {a.shape}")
    valid = index >= 0
    y = np.zeros((len(index), av.shape[1]))
    y[valid] = av[index[valid]]

    def backward(g):
        gz = np.zeros_like(av)
        np.add.at(gz, index[valid], g[valid])
        _acc(a, gz[0] if vector else gz)

    return _out(y, (a,), backward, "take_rows")


def segment_sum(a, segments, n):
    """Sum rows of ``a`` into ``n`` buckets; ``segments[r]`` is row r's bucket."""
    segments = np.asarray(segments, dtype=np.intp)
    if a.ndim not in (1, 2) or len(segments) != a.shape[0]:
        raise DimensionError(f"segment_sum: {len(segments)} segment ids for {a.shape}")
    y = np.zeros((n,) + a.shape[1:])
    np.add.at(y, segments, a.value)
    return _out(y, (a,), lambda g: _acc(a, g[segments]), "segment_sum")


def segment_softmax(a, segments, n):
    """Softmax of a score vector computed independently within each segment."""
    segments = np.asarray(segments, dtype=np.intp)
    if a.ndim != 1 or len(segments) != a.shape[0]:
        raise DimensionError(f"segment_softmax: {len(segments)} segment ids for {a.shape}")
    v = a.value
    peak = np.full(n, -np.inf)
    np.maximum.at(peak, segments, v)
    e = np.exp(v - peak[segments])
    total = np.zeros(n)
    np.add.at(total, segments, e)
    y = e / total[segments]

    def backward(g):
        gy = np.zeros(n)
        np.add.at(gy, segments, g * y)
        _acc(a, y * (g - gy[segments]))

    return _out(y, (a,), backward, "segment_softmax")


def rowdot(a, b):
    """Per-row dot product of two ``(n, d)`` batches -> ``(n,)``."""
    _same_shape(a, b, "rowdot")
    if a.ndim != 2:
        raise DimensionError(f"rowdot: row batches required, got {a.shape}")
    av, bv = a.value, b.value

    def backward(g):
        _acc(a, g[:, None] * bv)
        _acc(b, g[:, None] * av)

    return _out(np.einsum("nd,nd->n", av, bv), (a, b), backward, "rowdot")


def scale_rows(a, w):
    """Multiply row ``r`` of ``a`` by ``w[r]``."""
    if a.ndim != 2 or w.shape != (a.shape[0],):
        raise DimensionError(f"scale_rows: weights {w.shape} for rows {a.shape}")
    av, wv = a.value, w.value

    def backward(g):
        _acc(a, g * wv[:, None])
        _acc(w, np.einsum("nd,nd->n", g, av))

    return _out(av * wv[:, None], (a, w), backward, "scale_rows")


def mean_rows(a, segments, n):
    """Per-bucket mean of rows; every bucket must be non-empty."""
    segments = np.asarray(segments, dtype=np.intp)
    counts = np.bincount(segments, minlength=n).astype(np.float64)
    if (counts == 0).any():
        raise UsageError("mean_rows: empty segment")
    total = segment_sum(a, segments, n)
    inv = 1.0 / counts[:, None]
    return _out(total.value * inv, (total,), lambda g: _acc(total, g * inv), "mean_rows")


def sum(a, axis=None):
    if axis is None:
        shape = a.shape
        return _out(np.asarray(a.value.sum()), (a,),
                    lambda g: _acc(a, np.full(shape, float(g))), "sum")
    if a.ndim != 2 or axis not in (0, 1, -1):
        raise DimensionError(f"sum: unsupported axis {axis} for {a.shape}")
    ax = 1 if axis == -1 else axis

    def backward(g):
        _acc(a, np.broadcast_to(np.expand_dims(g, ax), a.shape).copy())

    return _out(a.value.sum(axis=ax), (a,), backward, "sum")
