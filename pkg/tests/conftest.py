import numpy as np
import pytest

from mfdarn.darn import DarnModel, Scaler
from mfdarn.hmc import PosteriorSampleSet

# lines printed by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def identity_scaler(d, M):
    return Scaler(np.zeros(d), np.ones(d), np.zeros(M), np.ones(M))


def fake_samples(model: DarnModel, L: int, seed: int = 0, scale: float = 1.0,
                 scaler: Scaler | None = None) -> PosteriorSampleSet:
    """Prior draws dressed up as a posterior sample set."""
    rng = np.random.default_rng(seed)
    w = scale * rng.standard_normal((L, model.n_params))
    taus = rng.gamma(5.0, 1.0, size=(L, model.fidelity_count))
    scaler = scaler or identity_scaler(model.input_dim, model.fidelity_count)
    return PosteriorSampleSet(w, taus, 0.8, scaler, model)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
