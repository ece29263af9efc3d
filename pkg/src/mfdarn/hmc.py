"""HMC over the DARN weights with conjugate Gibbs updates of the noise precisions."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .darn import (
    LOG_2PI,
    DarnModel,
    FidelityDataset,
    Scaler,
    StackedData,
    _log_prior,
    fit_scaler,
    init_weights,
    log_joint_and_grad,
    residual_sums,
)
from .numerics import NonFinite, gamma_sample

log = logging.getLogger(__name__)


class ChainDiverged(RuntimeError):
    pass


MAX_EXTENSIONS = 3


class HmcConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    burn_in_steps: int = Field(5000, ge=1)
    thinning: int = Field(10, ge=1)
    sample_count: int = Field(200, ge=1)
    leapfrog_steps: int = Field(10, ge=1)
    step_size: float = Field(0.012, gt=0)
    adapt_step_size: bool = True
    target_accept: float = Field(0.8, gt=0, lt=1)
    map_warm_start: bool = False
    map_steps: int = Field(500, ge=1)

    @property
    def total_iterations(self) -> int:
        return self.burn_in_steps + self.sample_count * self.thinning


@dataclass(frozen=True)
class PosteriorSampleSet:
    weights: np.ndarray  # (L, P)
    taus: np.ndarray  # (L, M)
    acceptance_rate: float
    scaler: Scaler
    model: DarnModel
    step_size: float | None = None

    def __post_init__(self):
        if len(self.weights) != len(self.taus):
            raise ValueError("weight and precision samples must align")
        if not 0.0 <= self.acceptance_rate <= 1.0:
            raise ValueError("acceptance rate must lie in [0, 1]")

    def __len__(self):
        return len(self.weights)

    def subsample(self, n: int) -> "PosteriorSampleSet":
        """Deterministic stride of ``n`` samples spread over the whole set."""
        total = len(self)
        if not 1 <= n <= total:
            raise ValueError(f"cannot take {n} of {total} samples")
        idx = (np.arange(n) * total) // n
        return replace(self, weights=self.weights[idx], taus=self.taus[idx])


@dataclass(frozen=True)
class ChainState:
    w: np.ndarray
    taus: np.ndarray
    log_joint: float


def leapfrog(q, p, step: float, n: int, grad: Callable[[np.ndarray], np.ndarray]):
    """``n`` leapfrog steps for potential ``U`` with gradient ``grad``; returns ``(q', p')``."""
    q = np.array(q, dtype=float)
    p = np.array(p, dtype=float)
    p -= 0.5 * step * grad(q)
    for i in range(n):
        q += step * p
        if i < n - 1:
            p -= step * grad(q)
    p -= 0.5 * step * grad(q)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
        raise NonFinite("leapfrog trajectory diverged")
    return q, p


def hmc_step(state: ChainState, model: DarnModel, data, cfg: HmcConfig,
             rng: np.random.Generator) -> tuple[ChainState, bool]:
    """One Metropolis-corrected HMC transition of the weights at fixed precisions."""
    state, accepted, _ = _transition(state, model, data, cfg.step_size, cfg.leapfrog_steps, rng)
    return state, accepted


def _transition(state, model, data, step, n_steps, rng):
    data = data if isinstance(data, StackedData) else StackedData.from_dataset(data)
    p0 = rng.standard_normal(state.w.size)
    log_u = math.log(rng.random())
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            value0, g0 = log_joint_and_grad(model, state.w, state.taus, data)
        except NonFinite:
            return state, False, 0.0
        # the first gradient request is at the current point; the last is at the endpoint
        cache = {"fresh": True, "value": value0}

        def grad_potential(q):
            if cache.pop("fresh", False):
                return -g0
            cache["value"], g = log_joint_and_grad(model, q, state.taus, data)
            return -g

        try:
            q1, p1 = leapfrog(state.w, p0, step, n_steps, grad_potential)
        except NonFinite:
            return state, False, 0.0
        value1 = cache["value"]
    h0 = -value0 + 0.5 * float(p0 @ p0)
    h1 = -value1 + 0.5 * float(p1 @ p1)
    if not math.isfinite(h1):
        return state, False, 0.0
    accept_prob = math.exp(min(0.0, h0 - h1))
    if log_u < h0 - h1:
        return ChainState(q1, state.taus, value1), True, accept_prob
    return state, False, accept_prob


class DualAveraging:
    """Step-size adaptation toward a target acceptance rate (Hoffman & Gelman)."""

    def __init__(self, step: float, target: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = math.log(10.0 * step)
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.t = 0
        self.h_bar = 0.0
        self.log_step = math.log(step)
        self.log_step_bar = 0.0

    def update(self, accept_prob: float) -> float:
        self.t += 1
        w = 1.0 / (self.t + self.t0)
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob)
        self.log_step = self.mu - math.sqrt(self.t) / self.gamma * self.h_bar
        eta = self.t ** -self.kappa
        self.log_step_bar = eta * self.log_step + (1.0 - eta) * self.log_step_bar
        return math.exp(self.log_step)

    @property
    def final_step(self) -> float:
        return math.exp(self.log_step_bar)


def gibbs_tau(model: DarnModel, w, data, a0: float, b0: float,
              rng: np.random.Generator) -> np.ndarray:
    """Exact conditional draw ``tau_m ~ Gamma(a0 + N_m/2, b0 + SS_m/2)``."""
    counts, ss = residual_sums(model, w, data)
    return _draw_taus(counts, ss, a0, b0, rng)


def _draw_taus(counts, ss, a0, b0, rng) -> np.ndarray:
    return np.array([gamma_sample(a0 + 0.5 * n, b0 + 0.5 * s, rng) for n, s in zip(counts, ss)])


def _log_joint_from_residuals(model, w, taus, counts, ss) -> float:
    lik = 0.5 * counts * (np.log(taus) - LOG_2PI) - 0.5 * taus * ss
    return _log_prior(model, w, taus) + float(np.sum(lik))


def _map_warm_start(model, w, data, steps, rng, lr=1e-2):
    # Adam ascent on the log joint with precisions held at their prior mean
    taus = np.full(model.fidelity_count, model.prior_shape / model.prior_rate)
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    b1, b2 = 0.9, 0.999
    for t in range(1, steps + 1):
        _, g = log_joint_and_grad(model, w, taus, data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w + lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + 1e-8)
    return w


def sample_posterior(model: DarnModel, data: FidelityDataset, cfg: HmcConfig,
                     rng: np.random.Generator, *, bounds=None,
                     scaler: Scaler | None = None) -> PosteriorSampleSet:
    """Run a single chain and return the thinned post-burn-in samples.

    ``data`` is in original units; it is scaled with ``scaler`` or with a
    scaler fitted on ``bounds``. With neither given it is used as is.
    """
    if len(data) == 0:
        raise ValueError("need at least one observation to fit")
    if scaler is None:
        if bounds is None:
            M = model.fidelity_count
            scaler = Scaler(np.zeros(model.input_dim), np.ones(model.input_dim),
                            np.zeros(M), np.ones(M))
        else:
            scaler = fit_scaler(data, bounds)
    stacked = StackedData.from_dataset(scaler.transform(data))
    a0, b0 = model.prior_shape, model.prior_rate

    w = init_weights(model, rng)
    if cfg.map_warm_start:
        w = _map_warm_start(model, w, stacked, cfg.map_steps, rng)
    taus = gibbs_tau(model, w, stacked, a0, b0, rng)
    state = ChainState(w, taus, log_joint_and_grad(model, w, taus, stacked, need_grad=False)[0])

    def advance(state, step):
        state, acc, prob = _transition(state, model, stacked, step, cfg.leapfrog_steps, rng)
        counts, ss = residual_sums(model, state.w, stacked)
        taus = _draw_taus(counts, ss, a0, b0, rng)
        return ChainState(state.w, taus, _log_joint_from_residuals(model, state.w, taus, counts, ss)), acc, prob

    step = cfg.step_size
    burn = cfg.burn_in_steps
    accepted = iterations = 0
    if cfg.adapt_step_size:
        # the tail of burn-in runs at the frozen step; if it rejects too often
        # (e.g. the precisions jumped late), adaptation restarts from there
        probe = min(max(10, burn // 20), burn // 2)
        length, extensions = burn - probe, 0
        while True:
            adapter = DualAveraging(step, cfg.target_accept)
            for _ in range(length):
                state, acc, prob = advance(state, step)
                step = adapter.update(prob)
                accepted += acc
            step = adapter.final_step
            probs = []
            for _ in range(probe):
                state, acc, prob = advance(state, step)
                probs.append(prob)
                accepted += acc
            iterations += length + probe
            if probe == 0 or np.mean(probs) >= 0.5 * cfg.target_accept or extensions == MAX_EXTENSIONS:
                break
            extensions += 1
            length = max(burn // 4, 1)
            log.debug("burn-in probe acceptance %.3f at step %.5f; extending adaptation",
                      np.mean(probs), step)
    else:
        for _ in range(burn):
            state, acc, _ = advance(state, step)
            accepted += acc
        iterations = burn

    kept_w, kept_tau = [], []
    post_accepted = 0
    post = cfg.sample_count * cfg.thinning
    for it in range(post):
        state, acc, _ = advance(state, step)
        post_accepted += acc
        if (it + 1) % cfg.thinning == 0:
            kept_w.append(state.w)
            kept_tau.append(state.taus)
    accepted += post_accepted
    total = iterations + post

    if post_accepted < 0.01 * post:
        raise ChainDiverged(f"only {post_accepted}/{post} post-burn-in proposals accepted")
    rate = accepted / total
    if not 0.2 < rate < 0.99:
        log.warning("HMC acceptance rate %.3f outside (0.2, 0.99); consider another step size", rate)
    log.debug("HMC finished: acceptance %.3f, step size %.5f", rate, step)
    return PosteriorSampleSet(np.array(kept_w), np.array(kept_tau), rate, scaler, model, step)
