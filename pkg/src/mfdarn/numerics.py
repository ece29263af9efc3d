"""Small dense kernels shared by the surrogate, sampler and acquisition code.

Everything here works in float64. Random draws go through
``numpy.random.Generator`` instances; use :func:`make_rng` and
:func:`split_rng` so that seeded runs stay bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


class NumericalError(ArithmeticError):
    """Base class for numerical failures raised by this package."""


class NotPositiveDefinite(NumericalError):
    pass


class NonFinite(NumericalError):
    pass


class NotSquare(ValueError):
    pass


class InvalidParameter(ValueError):
    pass


@dataclass(frozen=True)
class JitterPolicy:
    """Diagonal jitter schedule tried when a factorization fails."""

    initial_jitter: float = 1e-8
    growth_factor: float = 10.0
    max_attempts: int = 6

    def __post_init__(self):
        if not self.initial_jitter > 0:
            raise InvalidParameter("initial_jitter must be positive")
        if not self.growth_factor > 1:
            raise InvalidParameter("growth_factor must exceed 1")
        if self.max_attempts < 1:
            raise InvalidParameter("max_attempts must be at least 1")

    def steps(self):
        yield 0.0
        jitter = self.initial_jitter
        for _ in range(self.max_attempts):
            yield jitter
            jitter *= self.growth_factor


DEFAULT_JITTER = JitterPolicy()

# pivots below this fraction of the largest diagonal entry are rounding noise
_PIVOT_RTOL = 1e3 * np.finfo(float).eps


def make_rng(seed: int | None) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent child generators; advances ``rng`` deterministically."""
    seeds = rng.integers(0, 2**63 - 1, size=n, dtype=np.int64)
    return [make_rng(int(s)) for s in seeds]


def _check_square_finite(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NotSquare(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFinite("matrix has non-finite entries")
    return a


def cholesky(a, policy: JitterPolicy = DEFAULT_JITTER) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``a + jitter * I`` with the smallest working jitter.

    Returns ``(L, jitter)``. Jitter 0 is always tried first, then the
    policy's escalating schedule. A factorization whose pivots collapse to
    rounding level counts as a failure.
    """
    a = _check_square_finite(a)
    scale = float(np.max(np.abs(a))) if a.size else 0.0
    if not np.allclose(a, a.T, rtol=1e-12, atol=1e-12 * max(scale, 1e-300)):
        raise ValueError("matrix is not symmetric")
    n = a.shape[0]
    if n == 0:
        return np.zeros((0, 0)), 0.0
    diag_max = float(np.max(np.diag(a)))
    for jitter in policy.steps():
        try:
            factor = np.linalg.cholesky(a + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            continue
        pivots = np.diag(factor) ** 2
        if np.all(pivots > _PIVOT_RTOL * max(diag_max, 0.0)) and np.all(pivots > 0):
            return factor, jitter
    raise NotPositiveDefinite(
        f"matrix not positive definite after {policy.max_attempts} jitter attempts"
    )


def log_det_psd(a, policy: JitterPolicy = DEFAULT_JITTER) -> float:
    """``log|a + jitter I|`` via the jittered Cholesky factor."""
    factor, _ = cholesky(a, policy)
    return 2.0 * float(np.sum(np.log(np.diag(factor))))


def gamma_sample(shape: float, rate: float, rng: np.random.Generator) -> float:
    """One Gamma(shape, rate) variate (mean ``shape / rate``).

    Marsaglia-Tsang squeeze; for ``shape < 1`` draws at ``shape + 1`` and
    multiplies by ``U ** (1 / shape)``.
    """
    if not (math.isfinite(shape) and math.isfinite(rate)) or shape <= 0 or rate <= 0:
        raise InvalidParameter(f"gamma needs positive finite shape/rate, got {shape}, {rate}")
    boost = 1.0
    if shape < 1.0:
        boost = rng.random() ** (1.0 / shape)
        shape += 1.0
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        z = rng.standard_normal()
        v = 1.0 + c * z
        if v <= 0.0:
            continue
        v = v * v * v
        u = rng.random()
        if u < 1.0 - 0.0331 * z**4:
            break
        if math.log(u) < 0.5 * z * z + d * (1.0 - v + math.log(v)):
            break
    return boost * d * v / rate


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step.flat[i] = h
        hi, lo = f(x + step), f(x - step)
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise NonFinite(f"non-finite probe at coordinate {i}")
        grad.flat[i] = (hi - lo) / (2.0 * h)
    return grad
