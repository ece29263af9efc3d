"""Multi-fidelity synthetic objectives (maximization form) and dataset generation.

Registered names, usable from the CLI: ``branin3`` and ``levy2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .darn import FidelityDataset, FidelityOutOfRange
from .numerics import make_rng


@dataclass(frozen=True)
class MultiFidelityFunction:
    name: str
    fidelity_count: int
    lower: np.ndarray
    upper: np.ndarray
    evaluator: Callable[[np.ndarray, int], float]
    known_optimum: tuple[np.ndarray, float] | None = None

    @property
    def input_dim(self) -> int:
        return len(self.lower)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.lower, self.upper

    def __call__(self, x, m: int) -> float:
        return self.evaluator(np.asarray(x, dtype=float), m)


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    counts: tuple[int, ...]
    seed: int | None = None

    def __post_init__(self):
        if any(c < 0 for c in self.counts):
            raise ValueError("sample counts must be nonnegative")


def _branin3(x) -> float:
    x1, x2 = x[0], x[1]
    return (-(-1.275 * x1**2 / math.pi**2 + 5.0 * x1 / math.pi + x2 - 6.0) ** 2
            - (10.0 - 5.0 / (4.0 * math.pi)) * math.cos(x1) - 10.0)


def _branin2(x) -> float:
    return (-10.0 * math.sqrt(-_branin3(x - 2.0)) - 2.0 * (x[0] - 0.5)
            + 3.0 * (3.0 * x[1] - 1.0) + 1.0)


def _branin1(x) -> float:
    return -_branin2(1.2 * (x + 2.0)) + 3.0 * x[1] - 1.0


def branin_mf(x, m: int) -> float:
    """Three-fidelity Branin; fidelity 3 is the negated standard Branin."""
    x = np.asarray(x, dtype=float)
    if m == 3:
        return _branin3(x)
    if m == 2:
        return _branin2(x)
    if m == 1:
        return _branin1(x)
    raise FidelityOutOfRange(f"branin has fidelities 1..3, got {m}")


def _sin_pi(t: float) -> float:
    """``sin(pi * t)``, exactly zero at integer ``t``."""
    r = math.fmod(t, 2.0)  # exact reduction
    if r == int(r):
        return 0.0
    return math.sin(math.pi * r)


def levy_mf(x, m: int) -> float:
    """Two-fidelity Levy variant; fidelity 2 peaks at exactly 0 at (1, 1)."""
    x1, x2 = float(x[0]), float(x[1])
    f2 = (-_sin_pi(3 * x1) ** 2
          - (x1 - 1.0) ** 2 * (1.0 + _sin_pi(3 * x2) ** 2)
          - (x2 - 1.0) ** 2 * (1.0 + _sin_pi(2 * x2) ** 2))
    if m == 2:
        return f2
    if m == 1:
        return -math.sqrt(1.0 + f2 * f2)
    raise FidelityOutOfRange(f"levy has fidelities 1..2, got {m}")


# max of f3 equals minus the standard Branin minimum s*t = 10 / (8 pi)
BRANIN_OPTIMUM = -10.0 / (8.0 * math.pi)

BENCHMARKS: dict[str, MultiFidelityFunction] = {
    "branin3": MultiFidelityFunction(
        "branin3", 3, np.array([-5.0, 0.0]), np.array([10.0, 15.0]), branin_mf,
        (np.array([-math.pi, 12.275]), BRANIN_OPTIMUM),
    ),
    "levy2": MultiFidelityFunction(
        "levy2", 2, np.array([-10.0, -10.0]), np.array([10.0, 10.0]), levy_mf,
        (np.array([1.0, 1.0]), 0.0),
    ),
}


def get_benchmark(name: str) -> MultiFidelityFunction:
    try:
        return BENCHMARKS[name]
    except KeyError:
        raise KeyError(f"unknown benchmark {name!r}; choose from {sorted(BENCHMARKS)}") from None


def generate_dataset(fn: MultiFidelityFunction, spec: SyntheticDatasetSpec | Sequence[int],
                     rng: np.random.Generator | None = None) -> FidelityDataset:
    """Noise-free observations at inputs drawn uniformly from the box, per fidelity."""
    if not isinstance(spec, SyntheticDatasetSpec):
        spec = SyntheticDatasetSpec(tuple(spec))
    if len(spec.counts) != fn.fidelity_count:
        raise ValueError(f"{fn.name} needs {fn.fidelity_count} counts, got {len(spec.counts)}")
    if rng is None:
        rng = make_rng(spec.seed)
    inputs, targets = [], []
    for m, n in enumerate(spec.counts, start=1):
        X = rng.uniform(fn.lower, fn.upper, size=(n, fn.input_dim))
        inputs.append(X)
        targets.append(np.array([fn(x, m) for x in X]))
    return FidelityDataset(inputs, targets)


def default_cost_model(M: int) -> np.ndarray:
    """Per-fidelity costs 1, 10, 50, then five times the previous level."""
    costs = [1.0, 10.0, 50.0]
    while len(costs) < M:
        costs.append(costs[-1] * 5.0)
    return np.array(costs[:M])
