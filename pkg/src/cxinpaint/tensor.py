"""Dense tensors and seeded random draws.

Everything downstream (layers, losses, metrics, training) runs on the Tensor
type defined here: a shape plus a flat row-major float buffer. Only float32
and float64 exist; float64 is the precision used for finite-difference work.
Two-tensor operations require exactly equal shapes. The only broadcasting
allowed anywhere in the codebase is tensor-with-scalar; everything else is a
contract violation, so hand-derived backward passes cannot be silently
misaligned.

Tensors produced by operations are treated as frozen: no operation mutates
its inputs, and results may be shared across threads. Random numbers come
from numpy's Philox generator, a counter-based algorithm whose stream is a
pure function of the seed on every platform and thread count.
"""

from __future__ import annotations

import numpy as np

DTYPES = {"float32": np.float32, "float64": np.float64}


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class Tensor:
    """Dense N-dimensional float array, C-contiguous, row-major."""

    __slots__ = ("array",)

    def __init__(self, array):
        arr = np.ascontiguousarray(array)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.array = arr

    @property
    def shape(self) -> tuple:
        return self.array.shape

    @property
    def dtype(self):
        return self.array.dtype

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def ndim(self) -> int:
        return self.array.ndim

    @property
    def data(self):
        """Flat row-major view of the buffer (do not write through it)."""
        return self.array.reshape(-1)

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.array.reshape(-1)[0])

    def get(self, index) -> float:
        return float(self.array[tuple(index)])

    def set(self, index, value) -> None:
        self.array[tuple(index)] = value

    def copy(self) -> "Tensor":
        return Tensor(self.array.copy())

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.array.astype(DTYPES.get(dtype, dtype)))

    def reshape(self, shape) -> "Tensor":
        if int(np.prod(shape)) != self.size:
            raise ContractError(f"cannot reshape {self.shape} to {shape}")
        return Tensor(self.array.reshape(shape).copy())

    def tolist(self):
        return self.array.tolist()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.array.dtype.name})"


def tensor(values, dtype="float64") -> Tensor:
    return Tensor(np.asarray(values, dtype=DTYPES.get(dtype, dtype)))


def zeros(shape, dtype="float64") -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPES.get(dtype, dtype)))


def full(shape, value, dtype="float64") -> Tensor:
    return Tensor(np.full(shape, value, dtype=DTYPES.get(dtype, dtype)))


def _as_operand(b):
    """Scalar passthrough, Tensor unwrap; anything else is rejected."""
    if isinstance(b, Tensor):
        return b.array
    if isinstance(b, (int, float, np.floating, np.integer)):
        return float(b)
    raise ContractError(f"operand must be Tensor or scalar, got {type(b).__name__}")


def _check_same_shape(a: Tensor, b) -> None:
    if isinstance(b, Tensor) and a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    _check_same_shape(a, b)
    return Tensor(a.array + _as_operand(b))


def sub(a: Tensor, b) -> Tensor:
    _check_same_shape(a, b)
    return Tensor(a.array - _as_operand(b))


def mul(a: Tensor, b) -> Tensor:
    _check_same_shape(a, b)
    return Tensor(a.array * _as_operand(b))


def scale(a: Tensor, s: float) -> Tensor:
    if isinstance(s, Tensor):
        raise ContractError("scale takes a scalar, not a tensor")
    return Tensor(a.array * float(s))


def absolute(a: Tensor) -> Tensor:
    return Tensor(np.abs(a.array))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ContractError(f"clamp bounds reversed: lo={lo} > hi={hi}")
    return Tensor(np.clip(a.array, lo, hi))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scale": scale}


def elementwise(kind: str, a: Tensor, b=None, lo=None, hi=None) -> Tensor:
    """Dispatch over the element-wise op kinds: add, sub, mul, scale, abs, clamp."""
    if kind in _ELEMENTWISE:
        return _ELEMENTWISE[kind](a, b)
    if kind == "abs":
        return absolute(a)
    if kind == "clamp":
        return clamp(a, lo, hi)
    raise ContractError(f"unknown elementwise kind {kind!r}")


def reduce(kind: str, a: Tensor) -> float:
    """Full reduction to a python float: sum, mean, or max."""
    if a.size == 0:
        raise ContractError("reduce of empty tensor")
    if kind == "sum":
        return float(np.sum(a.array))
    if kind == "mean":
        return float(np.mean(a.array))
    if kind == "max":
        return float(np.max(a.array))
    raise ContractError(f"unknown reduce kind {kind!r}")


class Rng:
    """Seeded random stream backed by numpy's Philox counter-based generator.

    The Philox algorithm is stateless apart from a 256-bit counter and the
    key derived from the seed, so the sequence is identical on every
    platform. An Rng instance is single-owner: derive independent streams
    with child() instead of sharing one across concurrent tasks.
    """

    def __init__(self, seed: int, _bit_generator=None):
        self.seed = int(seed)
        if _bit_generator is None:
            _bit_generator = np.random.Philox(np.random.SeedSequence(self.seed))
        self._gen = np.random.Generator(_bit_generator)

    def child(self, tag: int) -> "Rng":
        """Independent stream keyed by (seed, tag); safe for parallel workers."""
        seq = np.random.SeedSequence(self.seed, spawn_key=(int(tag),))
        return Rng(self.seed, _bit_generator=np.random.Philox(seq))

    def uniform_int(self, lo: int, hi: int) -> int:
        """Uniform integer in the inclusive range [lo, hi]."""
        if lo > hi:
            raise ContractError(f"uniform_int range reversed: {lo} > {hi}")
        return int(self._gen.integers(lo, hi + 1))

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        if lo > hi:
            raise ContractError(f"uniform range reversed: {lo} > {hi}")
        return float(self._gen.uniform(lo, hi))

    def normal(self, mean: float = 0.0, std: float = 1.0) -> float:
        if std < 0:
            raise ContractError(f"normal std must be >= 0, got {std}")
        return float(mean + std * self._gen.standard_normal())

    def normal_array(self, shape, mean=0.0, std=1.0, dtype="float64") -> np.ndarray:
        if std < 0:
            raise ContractError(f"normal std must be >= 0, got {std}")
        dt = DTYPES.get(dtype, dtype)
        return (mean + std * self._gen.standard_normal(shape)).astype(dt, copy=False)

    def uniform_array(self, shape, lo=0.0, hi=1.0, dtype="float64") -> np.ndarray:
        if lo > hi:
            raise ContractError(f"uniform range reversed: {lo} > {hi}")
        dt = DTYPES.get(dtype, dtype)
        return self._gen.uniform(lo, hi, size=shape).astype(dt, copy=False)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        """JSON-serializable snapshot; pair with set_state for exact resume."""
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self._gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": int(state["buffer_pos"]),
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"]),
        }


def rng_uniform_int(rng: Rng, lo: int, hi: int) -> int:
    return rng.uniform_int(lo, hi)


def rng_normal(rng: Rng, mean: float, std: float) -> float:
    return rng.normal(mean, std)
