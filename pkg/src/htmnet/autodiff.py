"""Dense tensors and tape-based reverse-mode differentiation.

A :class:`Tape` records every operation whose inputs require gradients
while it is the active tape (``with Tape() as tape: ...``). Operations
executed with no active tape are not recorded, which is how inference
runs. ``tape.backward(loss)`` walks the records in reverse and stores
``.grad`` on every tensor the loss depends on. A tape can be consumed
exactly once.

Scalar precision is chosen per run with :func:`set_default_dtype` or the
:func:`precision` context manager: float32 for training and inference,
float64 for gradient checks.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_DEFAULT_DTYPE = [np.dtype(np.float32)]
_ACTIVE_TAPES: list["Tape"] = []
_OP_COUNTER = itertools.count()


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of a tape (double backward, foreign tensor, non-scalar loss)."""


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE[0]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _DEFAULT_DTYPE[0] = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default scalar type."""
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def active_tape() -> Optional["Tape"]:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


class Tensor:
    """N-dimensional float array with optional gradient tracking."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or get_default_dtype(), order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def backward(self) -> None:
        if self._tape is None:
            raise TapeError("backward() on a tensor that was not recorded on a tape")
        self._tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class _Record:
    __slots__ = ("op_id", "out", "inputs", "backward")

    def __init__(self, op_id, out, inputs, backward):
        self.op_id = op_id
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Records are appended in execution order, so an operation's inputs are
    always recorded (or are leaves) before the operation itself.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._leaves: dict[int, Tensor] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op_id: str, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        for t in inputs:
            if t.requires_grad and t._tape is not self:
                self._leaves.setdefault(id(t), t)
        out._tape = self
        self.records.append(_Record(op_id, out, tuple(inputs), backward))

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise TapeError("backward() already called on this tape")
        if loss._tape is not self:
            raise TapeError("loss tensor was not recorded on this tape")
        if loss.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            rec.out.grad = g
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise ShapeError(f"{rec.op_id}: backward produced {gi.shape} for input {t.shape}")
                gi = gi.astype(t.dtype, copy=False)
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
        for key, t in self._leaves.items():
            if key in grads:
                t.grad = grads[key]


def make_op(name: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap a forward result and register its backward rule.

    ``backward(g)`` receives the output gradient and returns one gradient
    array (or None) per input, each shaped like that input.
    """
    op_id = f"{name}#{next(_OP_COUNTER)}"
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from op {op_id}")
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad, dtype=data.dtype)
    if needs_grad:
        tape.record(op_id, out, inputs, backward)
    return out


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
               samples: Optional[int] = None, seed: int = 0) -> float:
    """Largest relative disagreement between tape gradients and central differences.

    ``f`` maps the input tensors to a tensor; non-scalar outputs are
    contracted with a fixed random projection. The error per scalar is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``. With
    ``samples`` set, only that many random coordinates per input are
    probed (for large inputs such as parameter tensors).

    Inputs must be float64.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check requires float64 inputs")
    rng = np.random.default_rng(seed)
    saved_flags = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True

    projection: list[Optional[np.ndarray]] = [None]

    def scalar(out: Tensor) -> Tensor:
        from . import ops
        if out.size == 1:
            return ops.sum(out)
        if projection[0] is None:
            projection[0] = rng.standard_normal(out.shape)
        return ops.sum(ops.mul(out, Tensor(projection[0], dtype=np.float64)))

    def evaluate() -> np.ndarray:
        return np.array(f(*inputs).data, dtype=np.float64)

    def weight() -> np.ndarray:
        return np.ones(()) if projection[0] is None else projection[0]

    try:
        with Tape() as tape:
            loss = scalar(f(*inputs))
        tape.backward(loss)
        analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]
        base = evaluate()
        if not np.array_equal(evaluate(), base):
            raise RuntimeError("grad_check: f is not deterministic")

        worst = 0.0
        for t, grad in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if samples is not None and flat.size > samples:
                idx = np.sort(rng.choice(flat.size, size=samples, replace=False))
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                plus = evaluate()
                flat[i] = orig - eps
                minus = evaluate()
                flat[i] = orig
                # difference before projecting, to limit cancellation
                numeric = float(np.sum(weight() * (plus - minus))) / (2 * eps)
                a = grad.reshape(-1)[i]
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, err)
        return worst
    finally:
        for t, flag in zip(inputs, saved_flags):
            t.requires_grad = flag
            t.grad = None
