"""Float64 tensors with reverse-mode automatic differentiation.

A ``GradTape`` records every primitive applied to tensors bound to it; one
backward sweep over the recorded list yields exact gradients for all
trainable leaves. The engine is deliberately small: dense arrays plus the
derivative rules the retrieval model actually needs.

Kink conventions are fixed so tests are deterministic:

* threshold ops (``maximum``/``minimum`` against a constant) take
  subgradient 0 exactly at the kink,
* argmax/argmin reductions route the whole gradient to the lowest tied
  index,
* cosine denominators are floored at ``NORM_EPS``, so zero vectors never
  divide by zero.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, NumericalError, ShapeError

NORM_EPS = 1e-12

_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Validate finiteness after every primitive (slow; meant for tests)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def _check_finite(arr: np.ndarray, where: str) -> None:
    if arr.size and not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values produced by {where}")


class Tensor:
    """Immutable float64 array, optionally recorded on a GradTape."""

    __slots__ = ("data", "tape", "tid")

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)  # copy: tensors never alias caller memory
        if arr.size and not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        arr.setflags(write=False)
        self.data: np.ndarray = arr
        self.tape: "GradTape | None" = None
        self.tid: int = -1

    @classmethod
    def _raw(cls, arr: np.ndarray, tape: "GradTape | None" = None, tid: int = -1) -> "Tensor":
        arr = np.asarray(arr, dtype=np.float64)
        if _DEBUG_CHECKS:
            _check_finite(arr, "op")
        if arr.flags.writeable and arr.base is None:
            arr.setflags(write=False)
        t = object.__new__(cls)
        t.data = arr
        t.tape = tape
        t.tid = tid
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        kind = "leaf" if (self.tape is not None and self.tape._backwards[self.tid] is None) else (
            "node" if self.tape is not None else "const")
        return f"Tensor(shape={self.shape}, {kind})"

    # arithmetic sugar; all gradients flow through the module-level ops
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

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def max(self, axis: int = 0, keepdims: bool = False) -> "Tensor":
        return reduce_max(self, axis=axis, keepdims=keepdims)

    def min(self, axis: int = 0, keepdims: bool = False) -> "Tensor":
        return neg(reduce_max(neg(self), axis=axis, keepdims=keepdims))

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis=axis)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)


class GradTape:
    """Ordered record of primitives for one reverse pass.

    Nodes are appended in execution order, which is already topological:
    every node's inputs precede it. Use from a single thread; evaluation
    without gradients simply runs ops on tensors that are not bound to
    any tape.
    """

    def __init__(self):
        self._inputs: list[tuple[int, ...]] = []
        self._backwards: list[Callable[[np.ndarray], tuple] | None] = []
        self._leaves: list[Tensor] = []

    def __len__(self) -> int:
        return len(self._inputs)

    def leaf(self, value, name: str | None = None) -> Tensor:
        """Register a trainable leaf; backward() always reports its gradient."""
        t = Tensor(value)
        t.tape = self
        t.tid = len(self._inputs)
        self._inputs.append(())
        self._backwards.append(None)
        self._leaves.append(t)
        return t

    def _record(self, arr: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
        tid = len(self._inputs)
        self._inputs.append(tuple(t.tid for t in inputs))
        self._backwards.append(backward)
        return Tensor._raw(arr, self, tid)

    def gradients(self, loss: Tensor) -> dict[Tensor, Tensor]:
        return backward(loss, self)


def backward(loss: Tensor, tape: GradTape) -> dict[Tensor, Tensor]:
    """Reverse sweep from a scalar root; returns a gradient per trainable leaf.

    Leaves the root does not depend on get zero gradients. Raises
    ContractError if the root is not a scalar recorded on ``tape``.
    """
    if loss.tape is not tape:
        raise ContractError("backward root is not recorded on this tape")
    if loss.shape != ():
        raise ContractError("backward root must be a scalar")
    adjoint: list[np.ndarray | None] = [None] * len(tape)
    adjoint[loss.tid] = np.ones((), dtype=np.float64)
    for tid in range(loss.tid, -1, -1):
        out_grad = adjoint[tid]
        if out_grad is None:
            continue
        bw = tape._backwards[tid]
        if bw is None:
            continue
        for in_tid, gin in zip(tape._inputs[tid], bw(out_grad)):
            if in_tid < 0 or gin is None:
                continue
            if adjoint[in_tid] is None:
                adjoint[in_tid] = gin
            else:
                adjoint[in_tid] = adjoint[in_tid] + gin
    result: dict[Tensor, Tensor] = {}
    for leaf in tape._leaves:
        g = adjoint[leaf.tid]
        if g is None:
            result[leaf] = Tensor._raw(np.zeros(leaf.shape))
        else:
            # np.array keeps 0-d shape (ascontiguousarray would promote to 1-d)
            result[leaf] = Tensor._raw(np.array(g, dtype=np.float64, order="C"))
    return result


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _tape_of(*tensors: Tensor) -> GradTape | None:
    tape: GradTape | None = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ContractError("operands recorded on different tapes")
    return tape


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    g = np.asarray(grad)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor._raw(out)
    ash, bsh = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return tape._record(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor._raw(out)
    ash, bsh = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return tape._record(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor._raw(out)
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g * bd, ash), _unbroadcast(g * ad, bsh)

    return tape._record(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor._raw(out)
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g / bd, ash), _unbroadcast(-g * ad / (bd * bd), bsh)

    return tape._record(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = -a.data
    tape = _tape_of(a)
    if tape is None:
        return Tensor._raw(out)
    return tape._record(out, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """2-D matrix product with gradients for both operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul requires 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor._raw(out)
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return tape._record(out, (a, b), bw)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose requires a 2-D tensor, got {a.shape}")
    out = a.data.T
    tape = _tape_of(a)
    if tape is None:
        return Tensor._raw(out)
    return tape._record(out, (a,), lambda g: (np.asarray(g).T,))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = np.reshape(a.data, shape)
    tape = _tape_of(a)
    if tape is None:
        return Tensor._raw(out)
    orig = a.shape
    return tape._record(out, (a,), lambda g: (np.reshape(np.asarray(g), orig),))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray(np.sum(a.data, axis=axis, keepdims=keepdims))
    tape = _tape_of(a)
    if tape is None:
        return Tensor._raw(out)
    shape = a.shape

    def bw(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, shape),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, shape),)

    return tape._record(out, (a,), bw)


def reduce_max(a, axis: int = 0, keepdims: bool = False) -> Tensor:
    """Max along one axis; gradient routes to the lowest-index maximizer."""
    a = _as_tensor(a)
    ad = a.data
    if ad.ndim == 0 or ad.shape[axis] == 0:
        raise ShapeError(f"cannot reduce empty axis {axis} of shape {ad.shape}")
    idx = np.argmax(ad, axis=axis)
    idxe = np.expand_dims(idx, axis)
    val = np.take_along_axis(ad, idxe, axis)
    out = val if keepdims else np.squeeze(val, axis=axis)
    tape = _tape_of(a)
    if tape is None:
        return Tensor._raw(out)

    def bw(g):
        g = np.asarray(g)
        ge = g if keepdims else np.expand_dims(g, axis)
        buf = np.zeros_like(ad)
        np.put_along_axis(buf, idxe, ge, axis)
        return (buf,)

    return tape._record(out, (a,), bw)


def masked_max(a, mask, axis: int, keepdims: bool = False,
               allow_empty: bool = False, default: float = 0.0) -> Tensor:
    """Max over entries where ``mask`` is True.

    ``mask`` is a constant boolean array broadcastable to ``a``; no gradient
    flows through it. Slices with no valid entry raise ContractError unless
    ``allow_empty``, in which case they yield ``default`` with zero gradient.
    """
    a = _as_tensor(a)
    ad = a.data
    maskb = np.broadcast_to(np.asarray(mask, dtype=bool), ad.shape)
    valid = maskb.any(axis=axis)
    if not valid.all():
        if not allow_empty:
            raise ContractError("masked_max over a slice with no valid entries")
    work = np.where(maskb, ad, -np.inf)
    idx = np.argmax(work, axis=axis)
    idxe = np.expand_dims(idx, axis)
    validk = np.expand_dims(valid, axis)
    val = np.where(validk, np.take_along_axis(work, idxe, axis), default)
    out = val if keepdims else np.squeeze(val, axis=axis)
    tape = _tape_of(a)
    if tape is None:
        return Tensor._raw(out)

    def bw(g):
        g = np.asarray(g)
        ge = g if keepdims else np.expand_dims(g, axis)
        ge = np.where(validk, ge, 0.0)
        buf = np.zeros_like(ad)
        np.put_along_axis(buf, idxe, ge, axis)
        return (buf,)

    return tape._record(out, (a,), bw)


def masked_min(a, mask, axis: int, keepdims: bool = False,
               allow_empty: bool = False, default: float = 0.0) -> Tensor:
    return neg(masked_max(neg(_as_tensor(a)), mask, axis, keepdims=keepdims,
                          allow_empty=allow_empty, default=-default))


def maximum(a, threshold: float) -> Tensor:
    """Elementwise max against a constant; subgradient 0 exactly at the kink."""
    a = _as_tensor(a)
    out = np.maximum(a.data, threshold)
    tape = _tape_of(a)
    if tape is None:
        return Tensor._raw(out)
    active = a.data > threshold

    def bw(g):
        return (np.asarray(g) * active,)

    return tape._record(out, (a,), bw)


def minimum(a, threshold: float) -> Tensor:
    """Elementwise min against a constant; subgradient 0 exactly at the kink."""
    a = _as_tensor(a)
    out = np.minimum(a.data, threshold)
    tape = _tape_of(a)
    if tape is None:
        return Tensor._raw(out)
    active = a.data < threshold

    def bw(g):
        return (np.asarray(g) * active,)

    return tape._record(out, (a,), bw)


def relu(a) -> Tensor:
    return maximum(a, 0.0)


def clamp(a, lo: float, hi: float) -> Tensor:
    return minimum(maximum(a, lo), hi)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    tape = _tape_of(a)
    if tape is None:
        return Tensor._raw(out)

    def bw(g):
        # floor keeps 0 * (1/0) from producing NaN when upstream grad is 0
        return (np.asarray(g) * 0.5 / np.maximum(out, 1e-150),)

    return tape._record(out, (a,), bw)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    tape = _tape_of(a)
    if tape is None:
        return Tensor._raw(out)
    return tape._record(out, (a,), lambda g: (np.asarray(g) * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)
    tape = _tape_of(a)
    if tape is None:
        return Tensor._raw(out)
    ad = a.data
    return tape._record(out, (a,), lambda g: (np.asarray(g) / ad,))


def take_rows(a, indices) -> Tensor:
    """Gather along axis 0 (duplicate indices accumulate gradient)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = a.data[idx]
    tape = _tape_of(a)
    if tape is None:
        return Tensor._raw(out)
    ad = a.data

    def bw(g):
        buf = np.zeros_like(ad)
        np.add.at(buf, idx, np.asarray(g))
        return (buf,)

    return tape._record(out, (a,), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack of zero tensors")
    out = np.stack([t.data for t in ts], axis=axis)
    tape = _tape_of(*ts)
    if tape is None:
        return Tensor._raw(out)

    def bw(g):
        moved = np.moveaxis(np.asarray(g), axis, 0)
        return tuple(moved[i] for i in range(len(ts)))

    return tape._record(out, tuple(ts), bw)


def l2_normalize(a, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """Rows scaled to unit norm, with the denominator floored at ``eps``."""
    a = _as_tensor(a)
    ad = a.data
    n = np.sqrt(np.sum(ad * ad, axis=axis, keepdims=True))
    d = np.maximum(n, eps)
    out = ad / d
    tape = _tape_of(a)
    if tape is None:
        return Tensor._raw(out)
    big = n > eps

    def bw(g):
        g = np.asarray(g)
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return (np.where(big, (g - out * inner) / d, g / eps),)

    return tape._record(out, (a,), bw)


def cosine(a, b) -> Tensor:
    """Cosine similarity of two vectors, clamped to [-1, 1].

    Denominator norms are floored at NORM_EPS, so zero vectors yield 0
    rather than dividing by zero. At |cos| = 1 the clamp takes subgradient
    0, which coincides with the true gradient for parallel vectors.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape or a.size < 1:
        raise ShapeError(f"cosine requires equal-length vectors, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    dot = float(ad @ bd)
    na = float(np.linalg.norm(ad))
    nb = float(np.linalg.norm(bd))
    da = max(na, NORM_EPS)
    db = max(nb, NORM_EPS)
    raw = dot / (da * db)
    out = np.asarray(np.clip(raw, -1.0, 1.0))
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor._raw(out)
    passthrough = 1.0 if abs(raw) < 1.0 else 0.0

    def bw(g):
        g = float(np.asarray(g)) * passthrough
        ga = g * (bd / (da * db) - (raw * ad / (da * da) if na > NORM_EPS else 0.0))
        gb = g * (ad / (da * db) - (raw * bd / (db * db) if nb > NORM_EPS else 0.0))
        return ga, gb

    return tape._record(out, (a, b), bw)


def dot(a, b) -> Tensor:
    return reduce_sum(mul(a, b))


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]
    if count == 0:
        raise ShapeError("mean of an empty tensor")
    return mul(reduce_sum(a, axis=axis), 1.0 / count)


def max_pool_rows(m) -> Tensor:
    """Per-row maximum of a nonempty matrix (reduces over columns)."""
    m = _as_tensor(m)
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise ShapeError(f"max_pool_rows requires a nonempty matrix, got {m.shape}")
    return reduce_max(m, axis=1)


def max_pool_cols(m) -> Tensor:
    """Per-column maximum of a nonempty matrix (reduces over rows)."""
    m = _as_tensor(m)
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise ShapeError(f"max_pool_cols requires a nonempty matrix, got {m.shape}")
    return reduce_max(m, axis=0)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Numerically stable log-sum-exp built from primitives.

    The subtracted max cancels exactly in the gradient, so argmax routing
    never distorts the result.
    """
    a = _as_tensor(a)
    m = reduce_max(a, axis=axis, keepdims=True)
    s = add(log(reduce_sum(exp(sub(a, m)), axis=axis, keepdims=True)), m)
    if keepdims:
        return s
    return reshape(s, np.squeeze(s.data, axis=axis).shape)


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                           h: float = 1e-5) -> np.ndarray:
    """Central differences (f(x+h) - f(x-h)) / 2h, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        xp = xf.copy()
        xm = xf.copy()
        xp[i] += h
        xm[i] -= h
        flat[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2.0 * h)
    return grad


__all__ = [
    "NORM_EPS",
    "Tensor",
    "GradTape",
    "backward",
    "set_debug_checks",
    "add", "sub", "mul", "div", "neg",
    "matmul", "transpose", "reshape",
    "reduce_sum", "reduce_max", "masked_max", "masked_min",
    "maximum", "minimum", "relu", "clamp",
    "sqrt", "exp", "log",
    "take_rows", "stack", "l2_normalize",
    "cosine", "dot", "mean",
    "max_pool_rows", "max_pool_cols", "logsumexp",
    "finite_difference_grad",
]
