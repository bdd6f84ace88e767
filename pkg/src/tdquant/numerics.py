"""Deterministic numeric kernels: dense matrices, a damped Cholesky solver,
a tempered softmax, and a counter-based PRNG.

Everything runs in float64. Matrices are plain numpy 2-D arrays in row-major
order; the helpers here validate shape and finiteness at the public
boundaries so the callers can assume clean operands.

The PRNG is a splitmix64-style counter generator: draw number ``k`` from seed
``s`` is a pure function of ``(s, k)``, which makes streams reproducible,
resumable at any position, and cheap to split into independent substreams.
Gaussian variates come from Box-Muller on consecutive counter pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError, SingularHessianError

__all__ = [
    "as_matrix",
    "matmul",
    "cholesky_factor",
    "cholesky_solve",
    "softmax_with_temperature",
    "Rng",
]


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a finite float64 2-D array or raise."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={a.ndim}")
    if a.size and not np.all(np.isfinite(a)):
        raise ParameterError(f"{name} contains non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product with explicit dimension checking.

    Raises ShapeError naming both shapes when the inner dimensions differ.
    """
    am = as_matrix(a, "a")
    bm = as_matrix(b, "b")
    if am.shape[1] != bm.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {am.shape} @ {bm.shape}")
    return am @ bm


def cholesky_factor(h: np.ndarray) -> np.ndarray:
    """Lower-triangular L with L L^T = h.

    Raises SingularHessianError carrying the index of the first
    non-positive pivot when ``h`` is not positive definite.
    """
    a = as_matrix(h, "h")
    n = a.shape[0]
    if a.shape[1] != n:
        raise ShapeError(f"cholesky needs a square matrix, got {a.shape}")
    low = np.zeros_like(a)
    for j in range(n):
        d = a[j, j] - low[j, :j] @ low[j, :j]
        if not (d > 0.0) or not math.isfinite(d):
            raise SingularHessianError(pivot=j, detail=f"pivot value {d:.6g}")
        low[j, j] = math.sqrt(d)
        if j + 1 < n:
            low[j + 1 :, j] = (a[j + 1 :, j] - low[j + 1 :, :j] @ low[j, :j]) / low[j, j]
    return low


def _solve_lower(low: np.ndarray, b: np.ndarray) -> np.ndarray:
    y = np.zeros_like(b)
    for i in range(low.shape[0]):
        y[i] = (b[i] - low[i, :i] @ y[:i]) / low[i, i]
    return y


def _solve_upper(up: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = up.shape[0]
    x = np.zeros_like(b)
    for i in range(n - 1, -1, -1):
        x[i] = (b[i] - up[i, i + 1 :] @ x[i + 1 :]) / up[i, i]
    return x


def cholesky_solve(h, rhs, damping: float = 0.0) -> np.ndarray:
    """Solve ``(h + damping * mean(diag(h)) * I) x = rhs``.

    ``h`` must be square and symmetric; ``damping`` is a non-negative
    fraction of the mean diagonal. ``rhs`` may be a vector or a matrix of
    stacked right-hand sides.
    """
    hm = as_matrix(h, "h")
    n = hm.shape[0]
    if hm.shape[1] != n:
        raise ShapeError(f"h must be square, got {hm.shape}")
    if n and np.max(np.abs(hm - hm.T)) > 1e-8 * (1.0 + np.max(np.abs(hm))):
        raise ParameterError("h must be symmetric")
    if not (damping >= 0.0) or not math.isfinite(damping):
        raise ParameterError(f"damping must be a finite non-negative fraction, got {damping!r}")
    b = np.asarray(rhs, dtype=np.float64)
    squeeze = b.ndim == 1
    if squeeze:
        b = b[:, None]
    if b.shape[0] != n:
        raise ShapeError(f"rhs has {b.shape[0]} rows, expected {n}")
    hd = hm
    if damping > 0.0:
        hd = hm + damping * float(np.mean(np.diag(hm))) * np.eye(n)
    low = cholesky_factor(hd)
    x = _solve_upper(low.T, _solve_lower(low, b))
    return x[:, 0] if squeeze else x


def softmax_with_temperature(v, tau: float = 1.0) -> np.ndarray:
    """Numerically stable softmax of a score vector at temperature ``tau``.

    The maximum score is subtracted before exponentiation, so widely spread
    inputs cannot overflow. ``tau <= 0`` is rejected.
    """
    if not (tau > 0.0) or not math.isfinite(tau):
        raise ParameterError(f"temperature must be positive and finite, got {tau!r}")
    a = np.asarray(v, dtype=np.float64).ravel()
    if a.size == 0:
        raise ParameterError("softmax input must be non-empty")
    if not np.all(np.isfinite(a)):
        raise ParameterError("softmax input contains non-finite entries")
    z = (a - np.max(a)) / tau
    e = np.exp(z)
    return e / np.sum(e)


_GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer, vectorized; uint64 array ops wrap mod 2^64
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@dataclass
class Rng:
    """Splittable counter-based PRNG with an explicit stream position.

    Draw ``k`` of stream ``seed`` is ``mix64(seed + (k + 1) * gamma)``, so a
    generator rebuilt at any ``(seed, pos)`` continues the stream exactly.
    """

    seed: int
    pos: int = 0

    def __post_init__(self):
        self.seed = int(self.seed) & _MASK
        self.pos = int(self.pos)
        if self.pos < 0:
            raise ParameterError(f"stream position must be non-negative, got {self.pos}")

    def _raw(self, count: int) -> np.ndarray:
        ctr = np.arange(self.pos + 1, self.pos + count + 1, dtype=np.uint64)
        self.pos += count
        return _mix64(np.uint64(self.seed) + ctr * np.uint64(_GAMMA))

    def uniform(self, shape=()) -> np.ndarray:
        """Doubles in [0, 1) with 53 random bits each."""
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * (2.0**-53)
        return u.reshape(shape) if shape else u[0]

    def normal(self, shape=()) -> np.ndarray:
        """Standard normal draws via Box-Muller on counter pairs."""
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if n == 0:
            return np.zeros(shape, dtype=np.float64)
        m = (n + 1) // 2
        raw = self._raw(2 * m)
        u1 = (raw[:m] >> np.uint64(11)).astype(np.float64) * (2.0**-53)
        u2 = (raw[m:] >> np.uint64(11)).astype(np.float64) * (2.0**-53)
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = 2.0 * math.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape) if shape else z[0]

    def split(self, key: int) -> "Rng":
        """Derive an independent child stream identified by ``key``."""
        k = _mix64(np.uint64([int(key) & _MASK]))[0]
        child = _mix64(np.uint64([self.seed]) ^ k ^ np.uint64(_GAMMA))[0]
        return Rng(int(child))

    def clone(self) -> "Rng":
        return Rng(self.seed, self.pos)
