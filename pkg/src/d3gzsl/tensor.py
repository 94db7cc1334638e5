"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation that sees at least one grad-requiring input records its
output on the active tape (a thread-local, execution-ordered list of op
nodes). ``backward(loss)`` walks that tape once in reverse, accumulates
gradients additively into leaf ``grad`` buffers, marks the tape consumed
and installs a fresh one. Calling backward twice on the same tape raises
instead of silently double-accumulating.

Scope is deliberately small: tensors are at most 2-D, broadcasting is
limited to scalars and row/column vectors against matrices, and there are
no higher-order gradients.
"""

import threading

import numpy as np

from .errors import DegenerateInputError, ParameterError, ShapeError, TapeError

# Rows with an L2 norm below this are rejected by the normalizers; the
# epsilon goes inside the square root so gradients stay finite just above it.
MIN_ROW_NORM = 1e-9
NORM_EPS = 1e-12


class Tape:
    """Execution-ordered record of op outputs for one forward pass."""

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)


class _ThreadState(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True


_state = _ThreadState()


def active_tape() -> Tape:
    return _state.tape


def fresh_tape() -> Tape:
    """Discard the active tape and start a new one."""
    _state.tape = Tape()
    return _state.tape


class no_grad:
    """Context manager that disables tape recording (inference mode)."""

    def __enter__(self):
        self._prev = _state.grad_enabled
        _state.grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """A dense float64 array, optionally participating in the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"tensors are at most 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._tape = None

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
    def T(self):
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Constant view of this tensor's values (shares the buffer)."""
        return Tensor(self.data)

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, parents, backward_fn) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed."""
    req = _state.grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=req)
    if req:
        tape = _state.tape
        for p in parents:
            if p.requires_grad and p._tape is not None and p._tape is not tape:
                raise TapeError(
                    "input was produced on a previous tape; "
                    "rerun the forward pass on the current tape"
                )
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._tape = tape
        tape.nodes.append(out)
    return out


def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar loss over its recording tape.

    Gradients are accumulated (+=) into every reachable grad-requiring
    tensor, leaves included. The tape is consumed afterwards; a second
    backward on the same tape raises TapeError.
    """
    if loss.shape != ():
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or loss._tape is None:
        raise TapeError("loss is not recorded on a tape (no grad-requiring inputs)")
    tape = loss._tape
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward")
    tape.consumed = True
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)
    if tape is _state.tape:
        _state.tape = Tape()


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, opname: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{opname}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check(a, b, "add")
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check(a, b, "sub")
    out = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check(a, b, "mul")
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check(a, b, "div")
    out = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _lift(a)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(-g)

    return _record(-a.data, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _record(out, (a, b), bwd)


def transpose(a) -> Tensor:
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {a.shape}")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.T)

    return _record(a.data.T, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    out = a.data.reshape(shape)
    if out.ndim > 2:
        raise ShapeError(f"reshape target {shape} exceeds 2-D")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * out)

    return _record(out, (a,), bwd)


def log(a) -> Tensor:
    a = _lift(a)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.data)

    return _record(np.log(a.data), (a,), bwd)


def sqrt(a) -> Tensor:
    a = _lift(a)
    out = np.sqrt(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * 0.5 / out)

    return _record(out, (a,), bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # piecewise form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _lift(a)
    out = _sigmoid(np.atleast_1d(a.data)).reshape(a.shape)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * out * (1.0 - out))

    return _record(out, (a,), bwd)


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed without overflow; derivative is sigmoid(x)."""
    a = _lift(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * _sigmoid(np.atleast_1d(x)).reshape(a.shape))

    return _record(out, (a,), bwd)


def relu(a) -> Tensor:
    a = _lift(a)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0))

    return _record(np.maximum(a.data, 0.0), (a,), bwd)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _lift(a)
    out = np.where(a.data > 0, a.data, slope * a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * np.where(a.data > 0, 1.0, slope))

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and structure


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.shape).copy())

    return _record(out, (a,), bwd)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.shape[axis]

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.shape) / count)

    return _record(out, (a,), bwd)


def concat_rows(tensors) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise ShapeError("concat_rows needs at least one tensor")
    for t in ts:
        if t.ndim != 2 or t.shape[1] != ts[0].shape[1]:
            raise ShapeError(
                f"concat_rows: column counts differ ({[t.shape for t in ts]})"
            )
    out = np.vstack([t.data for t in ts])
    offsets = np.cumsum([0] + [t.shape[0] for t in ts])

    def bwd(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t.accumulate_grad(g[lo:hi])

    return _record(out, tuple(ts), bwd)


def concat_cols(tensors) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise ShapeError("concat_cols needs at least one tensor")
    for t in ts:
        if t.ndim != 2 or t.shape[0] != ts[0].shape[0]:
            raise ShapeError(
                f"concat_cols: row counts differ ({[t.shape for t in ts]})"
            )
    out = np.hstack([t.data for t in ts])
    offsets = np.cumsum([0] + [t.shape[1] for t in ts])

    def bwd(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t.accumulate_grad(g[:, lo:hi])

    return _record(out, tuple(ts), bwd)


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"slice_rows expects a 2-D tensor, got {a.shape}")

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[start:stop] = g
            a.accumulate_grad(full)

    return _record(a.data[start:stop], (a,), bwd)


def slice_columns(a, cols) -> Tensor:
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"slice_columns expects a 2-D tensor, got {a.shape}")
    cols = np.asarray(cols, dtype=np.intp)
    if cols.size and (cols.min() < 0 or cols.max() >= a.shape[1]):
        raise ShapeError(f"slice_columns: index out of range for shape {a.shape}")

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, (slice(None), cols), g)
            a.accumulate_grad(full)

    return _record(a.data[:, cols], (a,), bwd)


# ---------------------------------------------------------------------------
# row-wise composites used throughout the losses


def softmax_rows(v, temperature: float = 1.0) -> Tensor:
    """Row-wise softmax of v / temperature, with max-subtraction for safety."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    v = _lift(v)
    if v.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got {v.shape}")
    x = mul(v, 1.0 / temperature)
    shift = Tensor(x.data.max(axis=1, keepdims=True))  # constant: exact cancel
    e = exp(sub(x, shift))
    return div(e, reduce_sum(e, axis=1, keepdims=True))


def log_softmax_rows(v, temperature: float = 1.0) -> Tensor:
    """Numerically stable log of softmax_rows."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    v = _lift(v)
    if v.ndim != 2:
        raise ShapeError(f"log_softmax_rows expects a 2-D tensor, got {v.shape}")
    x = mul(v, 1.0 / temperature)
    shift = Tensor(x.data.max(axis=1, keepdims=True))
    centered = sub(x, shift)
    lse = log(reduce_sum(exp(centered), axis=1, keepdims=True))
    return sub(centered, lse)


def _check_row_norms(v: Tensor, opname: str):
    norms = np.linalg.norm(v.data, axis=1)
    bad = np.nonzero(norms < MIN_ROW_NORM)[0]
    if bad.size:
        raise DegenerateInputError(
            f"{opname}: row {int(bad[0])} has near-zero norm ({norms[bad[0]]:.3e})"
        )


def l2_normalize_rows(v) -> Tensor:
    """Scale every row to unit Euclidean norm; rejects near-zero rows."""
    v = _lift(v)
    if v.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects a 2-D tensor, got {v.shape}")
    _check_row_norms(v, "l2_normalize_rows")
    sq = reduce_sum(mul(v, v), axis=1, keepdims=True)
    return div(v, sqrt(add(sq, NORM_EPS)))


def cosine_similarity_matrix(p, q) -> Tensor:
    """All-pairs cosine similarity: out[i, j] = cos(p_i, q_j)."""
    p, q = _lift(p), _lift(q)
    if p.shape != q.shape:
        raise ShapeError(
            f"cosine_similarity_matrix: shapes differ ({p.shape} vs {q.shape})"
        )
    return matmul(l2_normalize_rows(p), transpose(l2_normalize_rows(q)))
