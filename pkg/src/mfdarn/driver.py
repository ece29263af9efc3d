"""The optimization loop: fit, acquire, query, augment, repeat.

Benchmark mode evaluates queries itself (:func:`run`); external objectives
use the :func:`ask` / :func:`tell` pair with the state persisted between
calls (:func:`save_state`, :func:`load_state`).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .acquisition import AcqOptConfig, CostModel, QueryBatch, optimize_batch
from .benchmarks import (
    MultiFidelityFunction,
    SyntheticDatasetSpec,
    default_cost_model,
    generate_dataset,
    get_benchmark,
)
from .darn import LOG_2PI, STD_FLOOR, DarnModel, FidelityDataset, predict
from .hmc import HmcConfig, PosteriorSampleSet, sample_posterior
from .numerics import make_rng, split_rng

log = logging.getLogger(__name__)

SCHEMA = "mfdarn-state"
SCHEMA_VERSION = 1


class ProtocolError(RuntimeError):
    """Ask/tell called out of order or with results that do not match."""


class PendingBatchExists(ProtocolError):
    pass


class NoPendingBatch(ProtocolError):
    pass


class MismatchedResults(ProtocolError):
    pass


class StateFileError(RuntimeError):
    pass


class IoFailure(StateFileError):
    pass


class SchemaVersionMismatch(StateFileError):
    pass


class ChecksumMismatch(StateFileError):
    pass


class LengthMismatch(ValueError):
    pass


class EmptyInput(ValueError):
    pass


class RunConfig(BaseModel):
    """Everything needed to reproduce a run. Unknown keys are rejected.

    Exactly one of ``benchmark`` and ``external`` selects the mode. In
    external mode the domain box and fidelity count must be given.
    ``budget`` caps the cost spent after the initial design.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    benchmark: str | None = None
    external: bool = False
    lower: list[float] | None = None
    upper: list[float] | None = None
    fidelity_count: int | None = Field(None, ge=1)
    batch_size: int = Field(5, ge=1)
    rounds: int | None = Field(None, ge=1)
    budget: float | None = Field(None, gt=0)
    costs: list[float] | None = None
    hmc: HmcConfig = HmcConfig()
    acquisition: AcqOptConfig = AcqOptConfig()
    hidden_widths: list[int] = [40, 40]
    prior_shape: float = Field(1.0, gt=0)
    prior_rate: float = Field(0.1, gt=0)
    seed: int = 0
    initial_per_fidelity: int = Field(10, ge=0)
    train_sizes: list[int] | None = None
    test_count: int = Field(100, ge=1)

    @model_validator(mode="after")
    def _consistent(self):
        if self.external == (self.benchmark is not None):
            raise ValueError("set exactly one of 'benchmark' and 'external: true'")
        if self.benchmark is not None:
            try:
                fn = get_benchmark(self.benchmark)
            except KeyError as exc:
                raise ValueError(exc.args[0]) from None
            if self.fidelity_count not in (None, fn.fidelity_count):
                raise ValueError(f"{fn.name} has {fn.fidelity_count} fidelities")
        elif self.lower is None or self.upper is None or self.fidelity_count is None:
            raise ValueError("external mode needs 'lower', 'upper' and 'fidelity_count'")
        lower, upper = self.bounds
        if len(lower) != len(upper) or len(lower) == 0 or np.any(upper <= lower):
            raise ValueError("domain box needs matching, nonempty, increasing bounds")
        if self.costs is not None and len(self.costs) != self.M:
            raise ValueError(f"'costs' needs {self.M} entries")
        if self.train_sizes is not None and len(self.train_sizes) != self.M:
            raise ValueError(f"'train_sizes' needs {self.M} entries")
        if any(w < 1 for w in self.hidden_widths):
            raise ValueError("hidden widths must be positive")
        return self

    @property
    def function(self) -> MultiFidelityFunction | None:
        return get_benchmark(self.benchmark) if self.benchmark else None

    @property
    def M(self) -> int:
        fn = self.function
        return fn.fidelity_count if fn else int(self.fidelity_count)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        fn = self.function
        lower = self.lower if self.lower is not None else fn.lower
        upper = self.upper if self.upper is not None else fn.upper
        return np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)

    @property
    def cost_model(self) -> CostModel:
        return CostModel(self.costs if self.costs is not None else default_cost_model(self.M))

    def model(self) -> DarnModel:
        return DarnModel(len(self.bounds[0]), self.M, tuple(self.hidden_widths),
                         self.prior_shape, self.prior_rate)


def load_config(path, **overrides) -> RunConfig:
    """Read a YAML or JSON config file; ``overrides`` replace top-level keys."""
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: expected a mapping at the top level")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.model_validate(raw)


@dataclass
class HistoryRow:
    round: int
    query_index: int
    fidelity: int
    x: np.ndarray
    y: float
    cost: float
    cumulative_cost: float
    best_so_far: float


@dataclass
class OptimizationState:
    """Mutable run record. Round 0 is the initial design."""

    data: FidelityDataset
    rng: np.random.Generator
    seed: int
    cumulative_cost: float = 0.0
    initial_cost: float = 0.0
    round_index: int = 0
    best_value: float = -math.inf
    best_x: np.ndarray | None = None
    pending: QueryBatch | None = None
    history: list[HistoryRow] = field(default_factory=list)

    @property
    def initialized(self) -> bool:
        return self.round_index > 0

    @property
    def spent_after_initial(self) -> float:
        return self.cumulative_cost - self.initial_cost


def new_state(cfg: RunConfig) -> OptimizationState:
    return OptimizationState(FidelityDataset.empty(cfg.M, len(cfg.bounds[0])),
                             make_rng(cfg.seed), cfg.seed)


def _initial_batch(state: OptimizationState, cfg: RunConfig) -> QueryBatch | None:
    n = cfg.initial_per_fidelity
    if n == 0:
        return None
    lower, upper = cfg.bounds
    inputs = np.vstack([state.rng.uniform(lower, upper, size=(n, len(lower)))
                        for _ in range(cfg.M)])
    return QueryBatch(inputs, np.repeat(np.arange(1, cfg.M + 1), n))


def fit(state: OptimizationState, cfg: RunConfig) -> PosteriorSampleSet:
    return sample_posterior(cfg.model(), state.data, cfg.hmc, state.rng, bounds=cfg.bounds)


def ask(state: OptimizationState, cfg: RunConfig) -> QueryBatch:
    """Propose the next batch and mark it pending.

    Before the initial design has been told, the initial design itself is
    the batch.
    """
    if state.pending is not None:
        raise PendingBatchExists("tell the pending batch before asking again")
    batch = None if state.initialized else _initial_batch(state, cfg)
    if batch is None:
        if len(state.data) == 0:
            raise ValueError("no observations to fit; use a nonzero initial design")
        state.round_index = max(state.round_index, 1)
        samples = fit(state, cfg)
        batch = optimize_batch(samples, cfg.cost_model, cfg.acquisition, cfg.bounds,
                               cfg.batch_size, state.rng)
    state.pending = batch
    return batch


def _match_results(pending: QueryBatch, results) -> list[float]:
    results = list(results)
    if len(results) != len(pending):
        raise MismatchedResults(f"expected {len(pending)} results, got {len(results)}")
    unused = list(range(len(results)))
    ys = []
    for x, m in pending.pairs:
        for j in unused:
            rx, rm, _ = results[j]
            if int(rm) == m and np.array_equal(np.asarray(rx, dtype=float), x):
                break
        else:
            raise MismatchedResults(f"no result for pending pair (x={x.tolist()}, m={m})")
        unused.remove(j)
        y = float(results[j][2])
        if not math.isfinite(y):
            raise MismatchedResults(f"non-finite result for (x={x.tolist()}, m={m})")
        ys.append(y)
    return ys


def tell(state: OptimizationState, cfg: RunConfig, results, reported=None) -> OptimizationState:
    """Record observed ``(x, m, y)`` results for the pending batch.

    ``results`` may come in any order. ``reported`` optionally holds a free
    highest-fidelity value per pending pair; it only feeds best-so-far.
    Nothing is modified unless the whole call is valid.
    """
    if state.pending is None:
        raise NoPendingBatch("no batch is pending")
    batch = state.pending
    ys = _match_results(batch, results)
    if reported is not None and len(reported) != len(batch):
        raise MismatchedResults("need one reported value per pending pair")
    costs = cfg.cost_model
    round_no = state.round_index
    for k, ((x, m), y) in enumerate(zip(batch.pairs, ys)):
        cost = float(costs.lambdas[m - 1])
        state.data.append(x, m, y)
        state.cumulative_cost += cost
        for v in ([y] if m == cfg.M else []) + ([float(reported[k])] if reported is not None else []):
            if v > state.best_value:
                state.best_value, state.best_x = v, x.copy()
        state.history.append(HistoryRow(round_no, k, m, x.copy(), y, cost,
                                        state.cumulative_cost, state.best_value))
    if round_no == 0:
        state.initial_cost = state.cumulative_cost
    state.round_index = round_no + 1
    state.pending = None
    return state


def _evaluate(fn: MultiFidelityFunction, batch: QueryBatch, top: int):
    results = [(x, m, fn(x, m)) for x, m in batch.pairs]
    reported = [y if m == top else fn(x, top) for x, m, y in results]
    return results, reported


def run(cfg: RunConfig, state: OptimizationState | None = None, state_path=None) -> OptimizationState:
    """Benchmark-mode loop; resumes ``state`` when given.

    Stops after ``cfg.rounds`` acquisition rounds or when the next batch
    would push the post-initial spend past ``cfg.budget``. With
    ``state_path`` the state is saved after every round and before a
    failure propagates.
    """
    fn = cfg.function
    if fn is None:
        raise ValueError("run needs a benchmark; use ask/tell for external objectives")
    if cfg.rounds is None and cfg.budget is None:
        raise ValueError("set 'rounds' or 'budget' to bound the run")
    state = state if state is not None else new_state(cfg)
    costs = cfg.cost_model
    try:
        while True:
            if state.initialized:
                done = state.round_index - 1
                if cfg.rounds is not None and done >= cfg.rounds:
                    break
                left = math.inf if cfg.budget is None else cfg.budget - state.spent_after_initial
                if cfg.batch_size * costs.lambdas.min() > left:
                    break
            batch = state.pending if state.pending is not None else ask(state, cfg)
            if state.initialized and batch_cost_exceeds(batch, costs, cfg, state):
                state.pending = None
                break
            tell(state, cfg, *_evaluate(fn, batch, cfg.M))
            log.info("round %d done: cost %.1f, best %.6g", state.round_index - 1,
                     state.cumulative_cost, state.best_value)
            if state_path is not None:
                save_state(state, state_path, cfg)
    except BaseException:
        if state_path is not None:
            state.pending = None
            save_state(state, state_path, cfg)
        raise
    return state


def batch_cost_exceeds(batch: QueryBatch, costs: CostModel, cfg: RunConfig,
                       state: OptimizationState) -> bool:
    if cfg.budget is None:
        return False
    return state.spent_after_initial + costs.total(batch.fidelities) > cfg.budget + 1e-9


# --- metrics -----------------------------------------------------------------


def _check_pair(a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != b.size:
        raise LengthMismatch(f"lengths differ: {a.size} vs {b.size}")
    if a.size == 0:
        raise EmptyInput("need at least one value")
    return a, b


def nrmse(predictions, targets) -> float:
    """RMSE divided by the population standard deviation of the targets."""
    p, t = _check_pair(predictions, targets)
    return float(np.sqrt(np.mean((p - t) ** 2)) / max(t.std(), STD_FLOOR))


def mnll(means, variances, targets) -> float:
    """Mean negative Gaussian log-likelihood of ``targets``."""
    mu, t = _check_pair(means, targets)
    var, _ = _check_pair(variances, targets)
    if np.any(var <= 0):
        raise ValueError("variances must be positive")
    return float(np.mean(0.5 * (LOG_2PI + np.log(var)) + 0.5 * (t - mu) ** 2 / var))


@dataclass(frozen=True)
class MetricReport:
    """Held-out accuracy at the top fidelity plus a per-fidelity breakdown.

    ``mnll`` is measured after dividing targets and predictions by the test
    targets' standard deviation, the same normalizer ``nrmse`` uses, so both
    are unit-free. ``mnll_raw`` is in original target units.
    """

    nrmse: float
    mnll: float
    mnll_raw: float
    per_fidelity: dict[int, dict[str, float]]
    acceptance_rate: float

    def to_dict(self) -> dict:
        return {"nrmse": self.nrmse, "mnll": self.mnll, "mnll_raw": self.mnll_raw,
                "acceptance_rate": self.acceptance_rate,
                "per_fidelity": {str(m): v for m, v in self.per_fidelity.items()}}


def _scores(model, samples, X, y, m) -> dict[str, float]:
    mu, var = predict(model, samples, X, m)
    scale = max(float(np.std(y)), STD_FLOOR)
    raw = mnll(mu, var, y)
    return {"nrmse": nrmse(mu, y), "mnll": raw - math.log(scale), "mnll_raw": raw}


def surrogate_streams(rng: np.random.Generator):
    """Independent (training data, sampler, test points) generators drawn from ``rng``."""
    return tuple(split_rng(rng, 3))


def evaluate_surrogate(cfg: RunConfig, benchmark: MultiFidelityFunction | str,
                       spec: SyntheticDatasetSpec | Sequence[int], test_count: int,
                       rng: np.random.Generator) -> MetricReport:
    """Fit on synthetic training data and score fresh uniform test points."""
    fn = get_benchmark(benchmark) if isinstance(benchmark, str) else benchmark
    train_rng, fit_rng, test_rng = surrogate_streams(rng)
    data = generate_dataset(fn, spec, train_rng)
    model = DarnModel(fn.input_dim, fn.fidelity_count, tuple(cfg.hidden_widths),
                      cfg.prior_shape, cfg.prior_rate)
    samples = sample_posterior(model, data, cfg.hmc, fit_rng, bounds=fn.bounds)
    X = test_rng.uniform(fn.lower, fn.upper, size=(test_count, fn.input_dim))
    per = {}
    for m in range(1, fn.fidelity_count + 1):
        y = np.array([fn(x, m) for x in X])
        per[m] = _scores(model, samples, X, y, m)
    top = per[fn.fidelity_count]
    return MetricReport(top["nrmse"], top["mnll"], top["mnll_raw"], per, samples.acceptance_rate)


# --- persistence ---------------------------------------------------------------


def _float_or_none(v: float):
    return None if not math.isfinite(v) else v


def _state_payload(state: OptimizationState, cfg: RunConfig | None) -> dict:
    pending = None
    if state.pending is not None:
        pending = {"inputs": state.pending.inputs.tolist(),
                   "fidelities": state.pending.fidelities.tolist()}
    return {
        "seed": state.seed,
        "rng": state.rng.bit_generator.state,
        "cumulative_cost": state.cumulative_cost,
        "initial_cost": state.initial_cost,
        "round_index": state.round_index,
        "best_value": _float_or_none(state.best_value),
        "best_x": None if state.best_x is None else state.best_x.tolist(),
        "pending": pending,
        "data": {"inputs": [x.tolist() for x in state.data.inputs],
                 "targets": [y.tolist() for y in state.data.targets],
                 "input_dim": state.data.input_dim},
        "history": [
            {"round": r.round, "query_index": r.query_index, "fidelity": r.fidelity,
             "x": r.x.tolist(), "y": r.y, "cost": r.cost, "cumulative_cost": r.cumulative_cost,
             "best_so_far": _float_or_none(r.best_so_far)}
            for r in state.history
        ],
        "config": None if cfg is None else cfg.model_dump(mode="json"),
    }


def _canonical(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)


def save_state(state: OptimizationState, path, cfg: RunConfig | None = None) -> None:
    """Write the state as versioned JSON with a SHA-256 checksum of the payload.

    The file is written to a sibling temporary path and renamed, so a crash
    never leaves a half-written state behind.
    """
    payload = _state_payload(state, cfg)
    body = _canonical(payload)
    doc = {"schema": SCHEMA, "version": SCHEMA_VERSION,
           "sha256": hashlib.sha256(body.encode()).hexdigest(), "payload": payload}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(json.dumps(doc, sort_keys=True, indent=1, allow_nan=False), encoding="utf-8")
        tmp.replace(path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_state(path) -> tuple[OptimizationState, RunConfig | None]:
    """Inverse of :func:`save_state`; returns the state and its stored config."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(text)
        if not isinstance(doc, dict):
            raise ValueError("not an object")
        payload = doc["payload"]
        digest = doc["sha256"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ChecksumMismatch(f"{path} is damaged or truncated") from exc
    if doc.get("schema") != SCHEMA or doc.get("version") != SCHEMA_VERSION:
        raise SchemaVersionMismatch(
            f"{path}: found {doc.get('schema')} v{doc.get('version')}, "
            f"expected {SCHEMA} v{SCHEMA_VERSION}")
    if hashlib.sha256(_canonical(payload).encode()).hexdigest() != digest:
        raise ChecksumMismatch(f"{path}: checksum does not match contents")

    d = payload["data"]["input_dim"]
    data = FidelityDataset([np.asarray(x, dtype=float).reshape(-1, d) for x in payload["data"]["inputs"]],
                           payload["data"]["targets"])
    rng = make_rng(payload["seed"])
    rng.bit_generator.state = payload["rng"]
    pending = payload["pending"]
    best = payload["best_value"]
    state = OptimizationState(
        data=data, rng=rng, seed=payload["seed"],
        cumulative_cost=payload["cumulative_cost"], initial_cost=payload["initial_cost"],
        round_index=payload["round_index"],
        best_value=-math.inf if best is None else best,
        best_x=None if payload["best_x"] is None else np.asarray(payload["best_x"], dtype=float),
        pending=None if pending is None else QueryBatch(np.asarray(pending["inputs"], dtype=float),
                                                        np.asarray(pending["fidelities"])),
        history=[HistoryRow(r["round"], r["query_index"], r["fidelity"],
                            np.asarray(r["x"], dtype=float), r["y"], r["cost"],
                            r["cumulative_cost"],
                            -math.inf if r["best_so_far"] is None else r["best_so_far"])
                 for r in payload["history"]],
    )
    cfg = None if payload["config"] is None else RunConfig.model_validate(payload["config"])
    return state, cfg


# --- CSV ---------------------------------------------------------------------


def _num(v: float) -> str:
    return repr(float(v)) if math.isfinite(v) else ""


def write_dataset_csv(data: FidelityDataset, path) -> None:
    d = data.input_dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fidelity", *(f"x{i}" for i in range(1, d + 1)), "y"])
        for m, x, y in data.rows():
            w.writerow([m, *map(_num, x), _num(y)])


def read_results_csv(path) -> list[tuple[np.ndarray, int, float]]:
    """Rows ``fidelity,x1..xd,y`` as ``(x, m, y)`` triples."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "fidelity" or header[-1] != "y":
            raise ValueError(f"{path}: expected header fidelity,x1,...,xd,y")
        out = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: row has {len(row)} fields, expected {len(header)}")
            out.append((np.array([float(v) for v in row[1:-1]]), int(row[0]), float(row[-1])))
    return out


def write_batch_csv(batch: QueryBatch, path) -> None:
    d = batch.inputs.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fidelity", *(f"x{i}" for i in range(1, d + 1))])
        for x, m in batch.pairs:
            w.writerow([m, *map(_num, x)])


def write_history_csv(state: OptimizationState, path) -> None:
    d = state.data.input_dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "query_index", "fidelity", *(f"x{i}" for i in range(1, d + 1)),
                    "y", "cost", "cumulative_cost", "best_so_far"])
        for r in state.history:
            w.writerow([r.round, r.query_index, r.fidelity, *map(_num, r.x), _num(r.y),
                        _num(r.cost), _num(r.cumulative_cost), _num(r.best_so_far)])
