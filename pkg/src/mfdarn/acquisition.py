"""Cost-normalized batch max-value entropy search over (input, fidelity) pairs.

The joint posterior of the batch outputs ``f = [f_{m_1}(x_1), ..., f_{m_B}(x_B)]``
and the maximum ``f*`` of the top fidelity is approximated by a Gaussian
whose moments are matched to posterior weight samples. The mutual
information then has a closed form in three log-determinants, and the batch
is improved one slot at a time by alternating maximization.

Objectives are maximized; negate a function to minimize it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import minimize
from scipy.special import expit, logit
from scipy.stats import qmc

from .darn import chain_outputs
from .hmc import PosteriorSampleSet
from .numerics import DEFAULT_JITTER, JitterPolicy, cholesky, split_rng

log = logging.getLogger(__name__)


class TooFewSamples(ValueError):
    pass


class AcqOptConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    L: int = Field(100, ge=2)
    max_iterations: int = Field(100, ge=1)
    tolerance: float = Field(1e-3, gt=0)
    restarts: int = Field(5, ge=1)
    inner_budget: int = Field(200, ge=1)
    fstar_pool: int = Field(1000, ge=1)


class CostModel:
    """Per-fidelity query costs; fidelity ``m`` costs ``lambdas[m - 1]``."""

    def __init__(self, lambdas: Sequence[float]):
        lam = np.asarray(lambdas, dtype=float).ravel()
        if lam.size == 0 or not np.all(np.isfinite(lam)) or np.any(lam <= 0):
            raise ValueError("costs must be finite and strictly positive")
        if np.any(np.diff(lam) < 0):
            log.warning("costs %s decrease with fidelity", lam.tolist())
        self.lambdas = lam

    def __len__(self):
        return len(self.lambdas)

    def __repr__(self):
        return f"CostModel({self.lambdas.tolist()})"

    def total(self, fidelities) -> float:
        return float(sum(self.lambdas[int(m) - 1] for m in fidelities))

    def scaled(self, c: float) -> "CostModel":
        return CostModel(self.lambdas * c)


@dataclass
class BatchDiagnostics:
    value: float
    trace: list[float] = field(default_factory=list)
    iterations: int = 0
    inner_calls: int = 0


@dataclass(frozen=True)
class QueryBatch:
    """``B`` query pairs: ``inputs[k]`` (original domain) at fidelity ``fidelities[k]``."""

    inputs: np.ndarray
    fidelities: np.ndarray
    diagnostics: BatchDiagnostics | None = field(default=None, compare=False)

    def __post_init__(self):
        x = np.array(self.inputs, dtype=float, ndmin=2)
        m = np.array(self.fidelities, dtype=int).ravel()
        if len(x) != len(m) or len(m) < 1:
            raise ValueError("a batch needs B >= 1 matching inputs and fidelities")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "fidelities", m)

    @classmethod
    def from_pairs(cls, pairs) -> "QueryBatch":
        pairs = list(pairs)
        return cls(np.array([p[0] for p in pairs], dtype=float), np.array([p[1] for p in pairs]))

    def __len__(self):
        return len(self.fidelities)

    @property
    def pairs(self) -> list[tuple[np.ndarray, int]]:
        return [(x, int(m)) for x, m in zip(self.inputs, self.fidelities)]

    def with_pair(self, k: int, x, m: int) -> "QueryBatch":
        """Copy with 0-based slot ``k`` replaced."""
        inputs = self.inputs.copy()
        fids = self.fidelities.copy()
        inputs[k] = x
        fids[k] = m
        return QueryBatch(inputs, fids)

    def validate(self, fidelity_count: int, lower, upper) -> None:
        if np.any(self.fidelities < 1) or np.any(self.fidelities > fidelity_count):
            raise ValueError("batch fidelity out of range")
        if np.any(self.inputs < lower) or np.any(self.inputs > upper):
            raise ValueError("batch input outside the domain box")


@dataclass(frozen=True)
class MomentEstimate:
    mu: np.ndarray
    sigma: np.ndarray
    applied_jitter: float = 0.0


class PairChoice(NamedTuple):
    x: np.ndarray
    m: int
    value: float


def _column(samples: PosteriorSampleSet, x, m: int) -> np.ndarray:
    """Destandardized ``f_m(x)`` under every weight sample, shape ``(L,)``."""
    u = samples.scaler.scale_x(np.asarray(x, dtype=float))[None, :]
    f = chain_outputs(samples.model, samples.weights, u, m)[:, 0, m - 1]
    return samples.scaler.destandardize(f, m)


def _matched(samples: PosteriorSampleSet, n: int) -> PosteriorSampleSet:
    return samples if len(samples) == n else samples.subsample(n)


def sample_f_star(samples: PosteriorSampleSet, L: int, domain, rng: np.random.Generator,
                  restarts: int = 5, pool: int = 1000) -> np.ndarray:
    """Per-draw maximum of the top-fidelity network over the box.

    Each of the ``L`` strided draws is scored on a Latin-hypercube pool; the
    best ``restarts`` pool points seed bounded L-BFGS runs. A draw whose
    local searches fail keeps its best probed value.
    """
    sub = _matched(samples, L)
    model, scaler = sub.model, sub.scaler
    M, d = model.fidelity_count, model.input_dim
    # scipy spawns from a Generator's SeedSequence, whose counter is not part
    # of the persisted bit-generator state; a derived child keeps resume exact
    U = qmc.LatinHypercube(d=d, rng=split_rng(rng, 1)[0]).random(pool)
    F = chain_outputs(model, sub.weights, U, M)[..., M - 1]  # (L, pool)
    bounds = [(0.0, 1.0)] * d
    out = np.empty(L)
    for j in range(L):
        w = sub.weights[j]

        def neg_f(u, w=w):
            return -float(chain_outputs(model, w, u[None, :], M)[0, M - 1])

        best = float(F[j].max())
        for i in np.argsort(-F[j])[:restarts]:
            try:
                res = minimize(neg_f, U[i], method="L-BFGS-B", bounds=bounds)
            except (ValueError, ArithmeticError):
                continue
            if np.isfinite(res.fun):
                best = max(best, -float(res.fun))
        out[j] = best
    return scaler.destandardize(out, M)


def joint_samples(samples: PosteriorSampleSet, f_stars, batch: QueryBatch) -> np.ndarray:
    """``(L, B + 1)`` matrix; row ``j`` holds the batch outputs and ``f*`` under draw ``j``."""
    f_stars = np.asarray(f_stars, dtype=float)
    sub = _matched(samples, len(f_stars))
    cols = [_column(sub, x, m) for x, m in batch.pairs]
    return np.column_stack(cols + [f_stars])


def estimate_moments(joint) -> MomentEstimate:
    joint = np.asarray(joint, dtype=float)
    if joint.ndim != 2 or joint.shape[0] < 2:
        raise TooFewSamples("need at least two joint samples")
    mu = joint.mean(axis=0)
    centered = joint - mu
    sigma = centered.T @ centered / (joint.shape[0] - 1)
    return MomentEstimate(mu, 0.5 * (sigma + sigma.T))


def mutual_information(mom: MomentEstimate, policy: JitterPolicy = DEFAULT_JITTER) -> float:
    """Gaussian ``I(f; f*) = 1/2 (log|S_ff| + log s** - log|S|)`` with one shared jitter.

    The leading ``B x B`` block of the full Cholesky factor is the factor of
    ``S_ff``, so a single factorization yields all three log-determinants.
    """
    factor, jitter = cholesky(mom.sigma, policy)
    log_diag = np.log(np.diag(factor))
    logdet_ff = 2.0 * float(np.sum(log_diag[:-1]))
    logdet = 2.0 * float(np.sum(log_diag))
    return 0.5 * (logdet_ff + math.log(mom.sigma[-1, -1] + jitter) - logdet)


def _value_from_joint(joint, fidelities, costs: CostModel) -> float:
    return mutual_information(estimate_moments(joint)) / costs.total(fidelities)


def batch_acquisition(batch: QueryBatch, samples: PosteriorSampleSet, f_stars,
                      costs: CostModel) -> float:
    return _value_from_joint(joint_samples(samples, f_stars, batch), batch.fidelities, costs)


def conditional_acquisition(k: int, candidate, batch: QueryBatch, samples: PosteriorSampleSet,
                            f_stars, costs: CostModel) -> float:
    """Batch acquisition with 1-based slot ``k`` replaced by ``candidate = (x, m)``."""
    if not 1 <= k <= len(batch):
        raise IndexError(f"slot {k} outside 1..{len(batch)}")
    x, m = candidate
    return batch_acquisition(batch.with_pair(k - 1, x, m), samples, f_stars, costs)


class _SlotObjective:
    """Caches the batch's joint columns so one slot can be re-scored cheaply."""

    def __init__(self, samples, f_stars, costs, batch: QueryBatch):
        self.samples, self.costs = samples, costs
        self.f_stars = np.asarray(f_stars, dtype=float)
        self.batch = batch
        self.cols = [_column(samples, x, m) for x, m in batch.pairs]

    def set_slot(self, k: int, x, m: int):
        self.batch = self.batch.with_pair(k, x, m)
        self.cols[k] = _column(self.samples, x, m)

    def value(self) -> float:
        joint = np.column_stack(self.cols + [self.f_stars])
        return _value_from_joint(joint, self.batch.fidelities, self.costs)

    def value_with(self, k: int, x, m: int) -> float:
        cols = list(self.cols)
        cols[k] = _column(self.samples, x, m)
        fids = self.batch.fidelities.copy()
        fids[k] = m
        return _value_from_joint(np.column_stack(cols + [self.f_stars]), fids, self.costs)


def _best_pair(obj: _SlotObjective, k: int, cfg: AcqOptConfig, lower, upper,
               rng: np.random.Generator, candidates=None) -> tuple[PairChoice, int]:
    M = obj.samples.model.fidelity_count
    x_k, m_k = obj.batch.inputs[k].copy(), int(obj.batch.fidelities[k])
    best = PairChoice(x_k, m_k, obj.value())
    calls = 0
    span = upper - lower
    for m in range(1, M + 1):
        calls += 1
        if candidates is not None:
            for x in candidates:
                v = obj.value_with(k, x, m)
                if v > best.value:
                    best = PairChoice(np.array(x, dtype=float), m, v)
            continue

        def neg(u, m=m):
            v = obj.value_with(k, lower + span * expit(u), m)
            return -v if math.isfinite(v) else math.inf

        starts = [x_k] + [rng.uniform(lower, upper) for _ in range(cfg.restarts - 1)]
        for x0 in starts:
            u0 = logit(np.clip((x0 - lower) / span, 1e-6, 1 - 1e-6))
            simplex = np.vstack([u0, u0 + np.eye(len(u0))])
            res = minimize(neg, u0, method="Nelder-Mead",
                           options={"maxfev": cfg.inner_budget, "initial_simplex": simplex,
                                    "xatol": 1e-4, "fatol": 1e-12})
            if np.isfinite(res.fun) and -res.fun > best.value:
                best = PairChoice(lower + span * expit(res.x), m, -float(res.fun))
    return best, calls


def optimize_pair(k: int, batch: QueryBatch, samples: PosteriorSampleSet, f_stars,
                  costs: CostModel, cfg: AcqOptConfig, domain, rng: np.random.Generator,
                  candidates=None) -> PairChoice:
    """Best replacement for 1-based slot ``k``; never worse than the incumbent.

    Every fidelity gets a multi-start Nelder-Mead search over a
    sigmoid-reparameterized box, or, when ``candidates`` is given, an
    exhaustive scan of those inputs.
    """
    lower, upper = (np.asarray(b, dtype=float) for b in domain)
    obj = _SlotObjective(_matched(samples, len(f_stars)), f_stars, costs, batch)
    choice, _ = _best_pair(obj, k - 1, cfg, lower, upper, rng, candidates)
    return choice


def _random_batch(B, M, lower, upper, rng, candidates=None) -> QueryBatch:
    if candidates is not None:
        idx = rng.integers(0, len(candidates), size=B)
        inputs = np.asarray(candidates, dtype=float)[idx]
    else:
        inputs = rng.uniform(lower, upper, size=(B, len(lower)))
    return QueryBatch(inputs, rng.integers(1, M + 1, size=B))


def optimize_batch(samples: PosteriorSampleSet, costs: CostModel, cfg: AcqOptConfig, domain,
                   B: int, rng: np.random.Generator, *, candidates=None,
                   f_stars=None) -> QueryBatch:
    """Alternating maximization of the batch acquisition.

    Starts from a random batch and cyclically re-optimizes each slot until
    one full sweep gains less than ``cfg.tolerance`` or
    ``cfg.max_iterations`` sweeps have run. The returned batch carries
    diagnostics including the value after every slot update.
    """
    if B < 1:
        raise ValueError("batch size must be at least 1")
    lower, upper = (np.asarray(b, dtype=float) for b in domain)
    M = samples.model.fidelity_count
    if len(costs) != M:
        raise ValueError(f"cost model has {len(costs)} levels for {M} fidelities")
    if f_stars is None:
        L = min(cfg.L, len(samples))
        f_stars = sample_f_star(samples, L, (lower, upper), rng, cfg.restarts, cfg.fstar_pool)
    sub = _matched(samples, len(f_stars))

    obj = _SlotObjective(sub, f_stars, costs, _random_batch(B, M, lower, upper, rng, candidates))
    value = obj.value()
    diag = BatchDiagnostics(value, [value])
    for _ in range(cfg.max_iterations):
        start = value
        for k in range(B):
            choice, calls = _best_pair(obj, k, cfg, lower, upper, rng, candidates)
            diag.inner_calls += calls
            if choice.value > value:
                obj.set_slot(k, choice.x, choice.m)
                value = obj.value()
            diag.trace.append(value)
        diag.iterations += 1
        if value - start < cfg.tolerance:
            break
    diag.value = value
    return replace(obj.batch, diagnostics=diag)
