"""Dense kernels, seeded random streams and a finite-difference oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class EmptyInputError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce to a 2-D float64 array, checking shape and finiteness."""
    m = np.array(data, dtype=np.float64, copy=True)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise ValueError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ValueError(f"expected {cols} cols, got {m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise NumericError("matrix has non-finite entries")
    m.setflags(write=False)
    return m


def singular_values(m) -> np.ndarray:
    """All min(rows, cols) singular values of ``m``, descending."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or min(a.shape) == 0:
        raise EmptyInputError("singular values of an empty matrix")
    if not np.all(np.isfinite(a)):
        raise NumericError("matrix has non-finite entries")
    s = np.linalg.svd(a, compute_uv=False)
    # LAPACK already sorts; clip guards -0.0
    return np.maximum(s, 0.0)


def numerical_rank(m, rel_threshold: float = 1e-8) -> int:
    s = singular_values(m)
    if s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > rel_threshold * s[0]))


@dataclass
class SeededRng:
    """Counter-based (Philox) stream keyed by ``(seed, stream)``.

    Child streams come from :meth:`derive`, which appends to the key path so
    that e.g. ``(master, layer, cycle)`` streams never depend on the order in
    which tasks are scheduled.
    """

    seed: int
    stream: int = 0
    path: tuple[int, ...] = ()
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.seed < 0 or self.stream < 0 or any(k < 0 for k in self.path):
            raise ValueError("seed and stream ids must be non-negative")
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream, *self.path))
        self._gen = np.random.Generator(np.random.Philox(ss))

    def derive(self, *keys: int) -> "SeededRng":
        return SeededRng(self.seed, self.stream, self.path + tuple(int(k) for k in keys))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size) -> np.ndarray:
        return self._gen.standard_normal(size)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        return int(self._gen.integers(0, n))

    def uniform(self, lo: float, hi: float, size=None):
        return self._gen.uniform(lo, hi, size)


def random_matrix(rng: SeededRng, rows: int, cols: int, scale: float) -> np.ndarray:
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    if rows < 1 or cols < 1:
        raise EmptyInputError("rows and cols must be >= 1")
    return rng.normal((rows, cols)) * scale


def random_permutation(rng: SeededRng, n: int) -> np.ndarray:
    """Fisher-Yates shuffle of ``0..n-1`` driven by ``rng``."""
    if n < 1:
        raise EmptyInputError("permutation of an empty set")
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = rng.below(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def inverse_permutation(perm) -> np.ndarray:
    perm = np.asarray(perm)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv


def is_permutation(perm, n: int) -> bool:
    perm = np.asarray(perm)
    return perm.shape == (n,) and np.array_equal(np.sort(perm), np.arange(n))


def finite_diff_gradient(f: Callable[[np.ndarray], float], y, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar field at ``y``."""
    if h <= 0:
        raise ValueError("step must be positive")
    y = np.asarray(y, dtype=np.float64)
    grad = np.empty_like(y)
    for i in range(y.size):
        yp = y.copy()
        ym = y.copy()
        yp.flat[i] += h
        ym.flat[i] -= h
        fp, fm = float(f(yp)), float(f(ym))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite evaluation at coordinate {i}")
        grad.flat[i] = (fp - fm) / (2 * h)
    return grad


def cosine(a, b) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))
