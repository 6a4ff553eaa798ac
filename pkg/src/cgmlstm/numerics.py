"""Dense linear algebra helpers, activations and a portable seeded generator.

Arrays are plain ``numpy.float64`` ndarrays: matrices are 2-D, vectors 1-D.
The helpers here add the shape checks and finiteness guards the rest of the
package relies on; the hot loops in :mod:`cgmlstm.network` call numpy
directly on batched arrays.
"""
from __future__ import annotations

import math
from typing import Union

import numpy as np
from scipy.special import expit

from .errors import ShapeError

__all__ = [
    "ShapeError",
    "SeededRng",
    "as_matrix",
    "as_vector",
    "matmul",
    "sigmoid",
    "tanh",
    "concat",
    "elementwise",
    "derive_seed",
]

MASK64 = (1 << 64) - 1


def _check_finite(a: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    _check_finite(m, "matrix")
    return m


def as_vector(v) -> np.ndarray:
    x = np.asarray(v, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got shape {x.shape}")
    _check_finite(x, "vector")
    return x


def matmul(a, b) -> np.ndarray:
    """Matrix product ``a @ b`` with an explicit shape check."""
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def sigmoid(x):
    """Logistic function, numerically stable for large ``|x|``."""
    return expit(np.asarray(x, dtype=np.float64))


def tanh(x):
    return np.tanh(np.asarray(x, dtype=np.float64))


sigmoid_map = sigmoid
tanh_map = tanh


def concat(a, b) -> np.ndarray:
    """Concatenate two vectors, ``a`` first."""
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel(),
                           np.asarray(b, dtype=np.float64).ravel()])


def elementwise(op: str, a, b: Union[np.ndarray, float]) -> np.ndarray:
    """Apply ``add``, ``sub``, ``hadamard`` or ``scale`` elementwise."""
    a = as_vector(a)
    if op == "scale":
        if not np.isscalar(b):
            raise TypeError("scale expects a real scalar")
        return a * float(b)
    b = as_vector(b)
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "hadamard":
        return a * b
    raise ValueError(f"unknown elementwise op {op!r}")


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def derive_seed(master: int, task: int) -> int:
    """Deterministic child seed for parallel task ``task`` of ``master``."""
    _, a = _splitmix64((master & MASK64) ^ 0xD1B54A32D192ED03)
    _, b = _splitmix64(a ^ (task & MASK64))
    return b


class SeededRng:
    """xoshiro256++ generator whose state is filled by splitmix64(seed).

    The algorithm is fixed so that draw sequences agree across runs,
    platforms and independent implementations.

    >>> SeededRng(1).next_u64() == SeededRng(1).next_u64()
    True
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        sm = self.seed & MASK64
        s = []
        for _ in range(4):
            sm, z = _splitmix64(sm)
            s.append(z)
        self._s = s

    @classmethod
    def from_state(cls, state) -> "SeededRng":
        """Generator with an explicit xoshiro256++ state (four uint64)."""
        rng = cls(0)
        rng._s = [int(x) & MASK64 for x in state]
        return rng

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = ((((s0 + s3) & MASK64) << 23 | ((s0 + s3) & MASK64) >> 41) & MASK64)
        result = (result + s0) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & MASK64
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def uniform(self, low: float, high: float, size: int | tuple | None = None):
        if size is None:
            return low + (high - low) * self.random()
        n = int(np.prod(size))
        out = np.fromiter((self.random() for _ in range(n)), dtype=np.float64, count=n)
        return (low + (high - low) * out).reshape(size)

    def below(self, n: int) -> int:
        """Integer in [0, n) by the multiply-high reduction."""
        if n <= 0:
            raise ValueError("n must be positive")
        return (self.next_u64() * n) >> 64

    def normal(self, size: int | None = None):
        """Standard normal draws (Box-Muller, cosine branch only)."""
        def one() -> float:
            u1 = 1.0 - self.random()  # (0, 1]
            u2 = self.random()
            return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
        if size is None:
            return one()
        return np.fromiter((one() for _ in range(size)), dtype=np.float64, count=size)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        idx = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return np.array(idx, dtype=np.int64)
