"""Deep auto-regressive network (DARN) surrogate over M fidelities.

Fidelity ``m`` is modelled by its own tanh MLP whose input is the scaled
design point concatenated with the outputs of networks ``1..m-1``::

    x_m = [x; f_1(x); ...; f_{m-1}(x)],   f_m(x) = net_m(x_m)

Each layer computes ``h @ W / sqrt(fan_in) + b``. The weights carry a
standard normal prior, so under this scaling a prior draw is already a
well-conditioned network rather than a saturated one.

Weight layout
-------------
All parameters live in one flat float64 vector. The order is
fidelity-major, then layer-major, and within a layer the weight matrix
(shape ``(fan_in, fan_out)``, row-major) precedes the bias vector. Saved
posterior samples depend on this order, so do not change it.

The networks see inputs mapped to ``[0, 1]^d`` and per-fidelity
standardized targets (see :class:`Scaler`); the chain carries standardized
noise-free outputs, never observed ``y``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING

import numpy as np
from scipy.special import gammaln

from .numerics import InvalidParameter, NonFinite

if TYPE_CHECKING:
    from .hmc import PosteriorSampleSet

LOG_2PI = math.log(2.0 * math.pi)
STD_FLOOR = 1e-12
ACTIVATIONS = ("tanh",)


class FidelityOutOfRange(ValueError):
    pass


class DegenerateBounds(ValueError):
    pass


class EmptySampleSet(ValueError):
    pass


@dataclass(frozen=True)
class NetworkShape:
    input_dim: int
    hidden_widths: tuple[int, ...] = (40, 40)
    activation: str = "tanh"

    def __post_init__(self):
        if self.input_dim < 1 or any(w < 1 for w in self.hidden_widths):
            raise InvalidParameter("network dimensions must be positive")
        if self.activation not in ACTIVATIONS:
            raise InvalidParameter(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_widths, 1]

    @property
    def n_params(self) -> int:
        dims = self.layer_dims
        return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class DarnModel:
    """Architecture and priors of the fidelity chain. Immutable."""

    input_dim: int
    fidelity_count: int
    hidden_widths: tuple[int, ...] = (40, 40)
    prior_shape: float = 1.0
    prior_rate: float = 0.1
    activation: str = "tanh"

    def __post_init__(self):
        if self.fidelity_count < 1 or self.input_dim < 1:
            raise InvalidParameter("need at least one fidelity and one input dimension")
        if self.prior_shape <= 0 or self.prior_rate <= 0:
            raise InvalidParameter("Gamma prior parameters must be positive")
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))

    @cached_property
    def shapes(self) -> tuple[NetworkShape, ...]:
        return tuple(
            NetworkShape(self.input_dim + m, self.hidden_widths, self.activation)
            for m in range(self.fidelity_count)
        )

    @cached_property
    def _layout(self) -> list[list[tuple[int, int, int]]]:
        # (offset, fan_in, fan_out) per layer per fidelity
        layout, offset = [], 0
        for shape in self.shapes:
            layers = []
            dims = shape.layer_dims
            for a, b in zip(dims[:-1], dims[1:]):
                layers.append((offset, a, b))
                offset += a * b + b
            layout.append(layers)
        return layout

    @cached_property
    def n_params(self) -> int:
        return sum(s.n_params for s in self.shapes)

    def fidelity_slice(self, m: int) -> slice:
        """Slice of the flat weight vector owned by fidelity ``m`` (1-based)."""
        self._check_fidelity(m)
        layers = self._layout[m - 1]
        start = layers[0][0]
        off, a, b = layers[-1]
        return slice(start, off + a * b + b)

    def unpack(self, w: np.ndarray, upto: int | None = None):
        """Views ``[[(W, b), ...] per fidelity]`` into ``w`` of shape ``(..., P)``."""
        lead = w.shape[:-1]
        nets = []
        for layers in self._layout[: upto or self.fidelity_count]:
            params = []
            for off, a, b in layers:
                W = w[..., off : off + a * b].reshape(lead + (a, b))
                params.append((W, w[..., off + a * b : off + a * b + b]))
            nets.append(params)
        return nets

    def _check_fidelity(self, m: int):
        if not 1 <= m <= self.fidelity_count:
            raise FidelityOutOfRange(f"fidelity {m} outside 1..{self.fidelity_count}")


@dataclass
class FidelityDataset:
    """Observations grouped by fidelity; index ``m - 1`` holds fidelity ``m``."""

    inputs: list[np.ndarray]
    targets: list[np.ndarray]

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets must cover the same fidelities")
        self.inputs = [np.asarray(x, dtype=float) for x in self.inputs]
        self.targets = [np.asarray(y, dtype=float).ravel() for y in self.targets]
        for x, y in zip(self.inputs, self.targets):
            if x.ndim != 2 or len(x) != len(y):
                raise ValueError("inputs must be (N_m, d) arrays matching the targets")
            if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
                raise NonFinite("dataset contains non-finite values")

    @classmethod
    def empty(cls, fidelity_count: int, input_dim: int) -> "FidelityDataset":
        return cls([np.zeros((0, input_dim)) for _ in range(fidelity_count)],
                   [np.zeros(0) for _ in range(fidelity_count)])

    @property
    def fidelity_count(self) -> int:
        return len(self.inputs)

    @property
    def input_dim(self) -> int:
        return self.inputs[0].shape[1]

    @property
    def counts(self) -> list[int]:
        return [len(y) for y in self.targets]

    def __len__(self):
        return sum(self.counts)

    def append(self, x, m: int, y: float) -> None:
        x = np.asarray(x, dtype=float).reshape(1, -1)
        self.inputs[m - 1] = np.vstack([self.inputs[m - 1], x])
        self.targets[m - 1] = np.append(self.targets[m - 1], float(y))

    def copy(self) -> "FidelityDataset":
        return FidelityDataset([x.copy() for x in self.inputs], [y.copy() for y in self.targets])

    def rows(self):
        """Yield ``(m, x, y)`` triples, fidelity-major."""
        for m, (xs, ys) in enumerate(zip(self.inputs, self.targets), start=1):
            for x, y in zip(xs, ys):
                yield m, x, float(y)


@dataclass(frozen=True)
class Scaler:
    lower: np.ndarray
    upper: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    def scale_x(self, x):
        return (np.asarray(x, dtype=float) - self.lower) / (self.upper - self.lower)

    def unscale_x(self, u):
        return self.lower + np.asarray(u, dtype=float) * (self.upper - self.lower)

    def standardize(self, y, m: int):
        return (np.asarray(y, dtype=float) - self.y_mean[m - 1]) / self.y_std[m - 1]

    def destandardize(self, f, m: int):
        return self.y_mean[m - 1] + self.y_std[m - 1] * np.asarray(f, dtype=float)

    def transform(self, data: FidelityDataset) -> FidelityDataset:
        return FidelityDataset(
            [self.scale_x(x) for x in data.inputs],
            [self.standardize(y, m) for m, y in enumerate(data.targets, start=1)],
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("lower", "upper", "y_mean", "y_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(**{k: np.asarray(d[k], dtype=float) for k in ("lower", "upper", "y_mean", "y_std")})


def fit_scaler(data: FidelityDataset, bounds) -> Scaler:
    """Affine box-to-unit-cube input map and per-fidelity target standardization.

    Fidelities with fewer than two targets borrow the pooled statistics of
    all targets (mean 0, std 1 if even those are unavailable).
    """
    lower, upper = (np.asarray(b, dtype=float).ravel() for b in bounds)
    if lower.shape != upper.shape or np.any(upper <= lower):
        raise DegenerateBounds("every upper bound must exceed its lower bound")
    pooled = np.concatenate(data.targets) if len(data) else np.zeros(0)
    if len(pooled) >= 2:
        pooled_stats = (pooled.mean(), max(pooled.std(), STD_FLOOR))
    else:
        pooled_stats = (float(pooled.mean()) if len(pooled) else 0.0, 1.0)
    means, stds = [], []
    for y in data.targets:
        if len(y) >= 2:
            means.append(y.mean())
            stds.append(max(y.std(), STD_FLOOR))
        else:
            means.append(pooled_stats[0])
            stds.append(pooled_stats[1])
    return Scaler(lower, upper, np.array(means), np.array(stds))


def init_weights(model: DarnModel, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(model.n_params)


def _mlp(params, inp):
    """Forward one tanh MLP; returns the output (squeezed) and hidden activations."""
    hidden = [inp]
    h = inp
    for W, b in params[:-1]:
        h = h @ W
        h *= _fan_in_scale(W)
        h += b[..., None, :]
        np.tanh(h, out=h)
        hidden.append(h)
    W, b = params[-1]
    return (h @ W * _fan_in_scale(W) + b[..., None, :])[..., 0], hidden


def _fan_in_scale(W) -> float:
    return 1.0 / math.sqrt(W.shape[-2])


def chain_outputs(model: DarnModel, w: np.ndarray, X, m: int) -> np.ndarray:
    """Standardized outputs ``f_1..f_m`` at scaled inputs.

    ``w`` may be a single vector ``(P,)`` or a stack ``(L, P)``; ``X`` is
    ``(n, d)``. Returns an array of shape ``w.shape[:-1] + (n, m)``.
    """
    model._check_fidelity(m)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    lead = w.shape[:-1]
    base = np.broadcast_to(X, lead + X.shape)
    outs = []
    for params in model.unpack(w, upto=m):
        inp = base if not outs else np.concatenate([base] + [o[..., None] for o in outs], axis=-1)
        out, _ = _mlp(params, inp)
        outs.append(out)
    return np.stack(outs, axis=-1)


def chain_forward(model: DarnModel, w: np.ndarray, x, m: int) -> np.ndarray:
    """``[f_1(x), ..., f_m(x)]`` for a single scaled point and weight vector."""
    return chain_outputs(model, np.asarray(w, dtype=float), np.asarray(x, dtype=float)[None, :], m)[0]


@dataclass
class StackedData:
    """Training rows sorted by descending fidelity.

    Rows needed by network ``k`` (all rows with fidelity >= k) then form the
    prefix ``X[:prefix[k-1]]``, and rows observed at fidelity ``k`` are
    ``X[prefix[k]:prefix[k-1]]``.
    """

    X: np.ndarray
    y: np.ndarray
    prefix: list[int]
    counts: list[int] = field(default_factory=list)

    @classmethod
    def from_dataset(cls, data: FidelityDataset) -> "StackedData":
        M = data.fidelity_count
        xs = [data.inputs[m] for m in reversed(range(M))]
        ys = [data.targets[m] for m in reversed(range(M))]
        counts = data.counts
        prefix = [sum(counts[k:]) for k in range(M)] + [0]
        return cls(np.vstack(xs), np.concatenate(ys), prefix, counts)

    def segment(self, k: int) -> slice:
        """Rows observed at 1-based fidelity ``k``."""
        return slice(self.prefix[k], self.prefix[k - 1])


def _as_stacked(data) -> StackedData:
    return data if isinstance(data, StackedData) else StackedData.from_dataset(data)


def _log_prior(model: DarnModel, w, taus) -> float:
    a0, b0 = model.prior_shape, model.prior_rate
    lp_w = -0.5 * float(w @ w) - 0.5 * model.n_params * LOG_2PI
    taus = np.asarray(taus, dtype=float)
    lp_tau = np.sum(a0 * math.log(b0) - gammaln(a0) + (a0 - 1.0) * np.log(taus) - b0 * taus)
    return lp_w + float(lp_tau)


def log_joint_and_grad(model: DarnModel, w, taus, data, need_grad: bool = True):
    """Joint log density and its gradient with respect to the weights.

    Backpropagates each fidelity's residual through its own network and,
    via the auto-regressive inputs, into every lower-fidelity network.
    """
    st = _as_stacked(data)
    w = np.asarray(w, dtype=float)
    taus = np.asarray(taus, dtype=float)
    if np.any(taus <= 0):
        raise InvalidParameter("noise precisions must be positive")
    top = max((k for k in range(1, model.fidelity_count + 1) if st.counts[k - 1] > 0), default=0)
    nets = model.unpack(w, upto=top) if top else []
    d = model.input_dim

    outs, caches = [], []
    for k, params in enumerate(nets, start=1):
        n = st.prefix[k - 1]
        inp = st.X[:n] if k == 1 else np.column_stack([st.X[:n]] + [o[:n] for o in outs])
        out, hidden = _mlp(params, inp)
        outs.append(out)
        caches.append(hidden)

    value = _log_prior(model, w, taus)
    upstream = [np.zeros(st.prefix[k - 1]) for k in range(1, top + 1)]
    for k in range(1, top + 1):
        seg = st.segment(k)
        n_k = seg.stop - seg.start
        if n_k == 0:
            continue
        r = st.y[seg] - outs[k - 1][seg]
        tau = taus[k - 1]
        value += 0.5 * n_k * (math.log(tau) - LOG_2PI) - 0.5 * tau * float(r @ r)
        upstream[k - 1][seg] += tau * r
    if not math.isfinite(value):
        raise NonFinite("log joint is not finite")
    if not need_grad:
        return value, None

    grad = -w.copy()
    gnets = model.unpack(grad, upto=top) if top else []
    for k in range(top, 0, -1):
        params, hidden, gparams = nets[k - 1], caches[k - 1], gnets[k - 1]
        delta = upstream[k - 1][:, None]
        for li in range(len(params) - 1, -1, -1):
            W, _ = params[li]
            gW, gb = gparams[li]
            a_in = hidden[li]
            c = _fan_in_scale(W)
            gW += c * (a_in.T @ delta)
            gb += delta.sum(axis=0)
            if li == 0 and k == 1:
                break
            back = delta @ (c * W.T)
            if li > 0:
                delta = back * (1.0 - a_in * a_in)
            else:
                # gradient w.r.t. the chain inputs f_1..f_{k-1}
                for j in range(1, k):
                    upstream[j - 1][: back.shape[0]] += back[:, d + j - 1]
    if not np.all(np.isfinite(grad)):
        raise NonFinite("gradient is not finite")
    return value, grad


def log_joint(model: DarnModel, w, taus, data) -> float:
    return log_joint_and_grad(model, w, taus, data, need_grad=False)[0]


def grad_log_joint(model: DarnModel, w, taus, data) -> np.ndarray:
    return log_joint_and_grad(model, w, taus, data)[1]


def residual_sums(model: DarnModel, w, data) -> tuple[np.ndarray, np.ndarray]:
    """Per-fidelity observation counts and residual sums of squares."""
    st = _as_stacked(data)
    M = model.fidelity_count
    ss = np.zeros(M)
    counts = np.asarray(st.counts[:M], dtype=float)
    top = max((k for k in range(1, M + 1) if st.counts[k - 1] > 0), default=0)
    if top:
        f = chain_outputs(model, np.asarray(w, dtype=float), st.X[: st.prefix[0]], top)
        for k in range(1, top + 1):
            seg = st.segment(k)
            r = st.y[seg] - f[seg, k - 1]
            ss[k - 1] = float(r @ r)
    return counts, ss


def predict(model: DarnModel, samples: "PosteriorSampleSet", x, m: int,
            scaler: Scaler | None = None):
    """Moment-matched predictive mean and variance in original target units.

    ``x`` is an original-domain point ``(d,)`` (returns scalars) or a batch
    ``(n, d)`` (returns arrays).
    """
    model._check_fidelity(m)
    if len(samples) == 0:
        raise EmptySampleSet("no posterior samples")
    scaler = scaler or samples.scaler
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = scaler.scale_x(np.atleast_2d(x))
    f = chain_outputs(model, samples.weights, X, m)[..., m - 1]  # (L, n)
    f = scaler.destandardize(f, m)
    noise = scaler.y_std[m - 1] ** 2 * np.mean(1.0 / samples.taus[:, m - 1])
    mean = f.mean(axis=0)
    var = f.var(axis=0) + noise
    if single:
        return float(mean[0]), float(var[0])
    return mean, var

