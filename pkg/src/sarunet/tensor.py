"""Rank-4 tensor type with reverse-mode autodiff over an explicit tape.

A :class:`Tensor4` wraps a contiguous ``[n, c, h, w]`` float array. Operations
(see :mod:`sarunet.ops`) record themselves on the currently active
:class:`Tape`; replaying the tape in reverse propagates gradients into every
``requires_grad`` tensor they touched. Storage is float32 by default; a
float64 mode exists for gradient-check tests.

Tapes are thread-local: concurrent inference threads each open their own tape
(or none) over shared read-only parameters.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, UsageError

__all__ = [
    "Tensor4",
    "Tape",
    "tensor",
    "parameter",
    "backward",
    "active_tape",
    "set_debug_checks",
    "read_t4",
    "write_t4",
]

# Post-op finiteness checks; off by default for speed, flipped on in tests.
_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor4:
    """A ``[n, c, h, w]`` array with an optional same-shape gradient buffer.

    Data is immutable by convention once created (optimizer updates and grad
    accumulation are the sanctioned exceptions). ``grad`` exists iff
    ``requires_grad`` and accumulates across backward passes until zeroed.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data: np.ndarray, requires_grad: bool = False, _checked: bool = False):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data)
        if data.ndim != 4:
            raise DimensionError(f"Tensor4 needs 4 dims [n,c,h,w], got shape {data.shape}")
        if any(d < 1 for d in data.shape):
            raise DimensionError(f"all dims must be >= 1, got shape {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        if not _checked and not np.isfinite(data).all():
            raise ValueError("Tensor4 rejects non-finite values at construction")
        self.data = np.ascontiguousarray(data)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = np.zeros_like(self.data) if requires_grad else None
        self._tape: Optional["Tape"] = None

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a scalar-shaped tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor4":
        return Tensor4(self.data.copy(), requires_grad=False, _checked=True)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Tensor4(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor4:
    """Build a Tensor4 from array-like data, validating finiteness."""
    arr = np.asarray(data, dtype=dtype)
    return Tensor4(arr, requires_grad=requires_grad)


def parameter(data, dtype=np.float32) -> Tensor4:
    """A trainable tensor: requires_grad with a zeroed grad buffer."""
    return tensor(data, requires_grad=True, dtype=dtype)


# -- tape ------------------------------------------------------------------


class _OpRecord:
    __slots__ = ("name", "inputs", "output", "backward_fn")

    def __init__(self, name, inputs, output, backward_fn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations; reversing it runs backpropagation.

    Use as a context manager around a forward pass::

        with Tape() as tape:
            y = model.forward(x, train=True)
            loss = mse_loss(y, target)
        backward(loss)

    ``last_backward_ops`` reports how many recorded ops the most recent
    backward sweep visited (always all of them, exactly once).
    """

    def __init__(self):
        self.ops: list[_OpRecord] = []
        self.last_backward_ops = 0

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self, "tape stack corrupted (unbalanced enter/exit)"
        stack.pop()

    def record(self, name: str, inputs: Sequence[Tensor4], output: Tensor4,
               backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> None:
        self.ops.append(_OpRecord(name, tuple(inputs), output, backward_fn))
        output._tape = self

    def backward(self, loss: Tensor4) -> None:
        """Accumulate dLoss/dT into ``grad`` of every requires_grad tensor.

        Calling twice without zeroing grads accumulates. Each recorded op is
        visited exactly once, in reverse recording order.
        """
        if loss.shape != (1, 1, 1, 1):
            raise UsageError(f"backward needs a scalar-shaped [1,1,1,1] loss, got {loss.shape}")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaf_tensors: dict[int, Tensor4] = {}
        produced = {id(rec.output) for rec in self.ops}
        visited = 0
        for rec in reversed(self.ops):
            visited += 1
            out_grad = pending.pop(id(rec.output), None)
            if out_grad is None:
                continue
            if rec.output.requires_grad:
                rec.output.grad += out_grad
            in_grads = rec.backward_fn(out_grad)
            for t, g in zip(rec.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in pending:
                    pending[key] = pending[key] + g
                else:
                    pending[key] = g
                if key not in produced:
                    leaf_tensors[key] = t
        self.last_backward_ops = visited
        if id(loss) in pending and loss.requires_grad and id(loss) not in leaf_tensors:
            loss.grad += pending.pop(id(loss))
        for key, t in leaf_tensors.items():
            g = pending.pop(key, None)
            if g is not None:
                t.grad += g


def backward(loss: Tensor4) -> None:
    """Backpropagate from a scalar loss through the tape that recorded it."""
    if loss._tape is None:
        raise UsageError("loss tensor was not recorded on any tape; "
                         "run the forward pass inside `with Tape() as tape:`")
    loss._tape.backward(loss)


def make_result(data: np.ndarray, name: str, inputs: Sequence[Tensor4],
                backward_fn) -> Tensor4:
    """Wrap an op result and record it on the active tape, if any.

    Used by :mod:`sarunet.ops`; the output requires grad only when a tape is
    listening and at least one input requires grad.
    """
    if _DEBUG_CHECKS and not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite values produced by op '{name}'")
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor4(data, requires_grad=needs, _checked=True)
    if needs:
        tape.record(name, inputs, out, backward_fn)
    return out


def zero_grads(params: Iterable[Tensor4]) -> None:
    for p in params:
        p.zero_grad()


# -- serialization (T4v1 record) --------------------------------------------
#
# Little-endian record: magic "T4v1", four u64 dims, one u8 dtype code
# (0 = float32, 1 = float64), then the raw row-major payload.

_T4_MAGIC = b"T4v1"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_t4(f, arr: np.ndarray) -> None:
    """Write one T4v1 record for a 4-d float array."""
    if arr.ndim != 4:
        raise DimensionError(f"T4v1 records hold rank-4 arrays, got shape {arr.shape}")
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise UsageError(f"unsupported dtype for T4v1: {arr.dtype}")
    f.write(_T4_MAGIC)
    f.write(struct.pack("<4QB", *arr.shape, code))
    f.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def read_t4(f) -> np.ndarray:
    """Read one T4v1 record; returns a native-endian contiguous array."""
    magic = f.read(4)
    if magic != _T4_MAGIC:
        raise UsageError(f"bad tensor record magic {magic!r}, expected {_T4_MAGIC!r}")
    header = f.read(33)
    if len(header) != 33:
        raise UsageError("truncated T4v1 header")
    n, c, h, w, code = struct.unpack("<4QB", header)
    if code not in _CODE_DTYPES:
        raise UsageError(f"unknown T4v1 dtype code {code}")
    dt = _CODE_DTYPES[code]
    nbytes = n * c * h * w * dt.itemsize
    payload = f.read(nbytes)
    if len(payload) != nbytes:
        raise UsageError("truncated T4v1 payload")
    arr = np.frombuffer(payload, dtype=dt).reshape(n, c, h, w)
    return np.ascontiguousarray(arr.astype(dt.newbyteorder("=")))
