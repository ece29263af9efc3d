import math

import numpy as np
import pytest

from oracles import standard_branin
from mfdarn.benchmarks import (
    BENCHMARKS,
    BRANIN_OPTIMUM,
    SyntheticDatasetSpec,
    branin_mf,
    default_cost_model,
    generate_dataset,
    get_benchmark,
    levy_mf,
)
from mfdarn.darn import FidelityOutOfRange
from mfdarn.numerics import make_rng


def test_branin_f3_known_values():
    assert branin_mf(np.array([-math.pi, 12.275]), 3) == pytest.approx(-0.397887, abs=1e-6)
    expected = -36.0 - (10.0 - 5.0 / (4.0 * math.pi)) - 10.0
    assert branin_mf(np.array([0.0, 0.0]), 3) == pytest.approx(expected, rel=1e-14)
    assert expected == pytest.approx(-55.6021, abs=1e-4)


def test_branin_f3_is_negated_standard_branin():
    rng = np.random.default_rng(0)
    X = rng.uniform([-5, 0], [10, 15], size=(1000, 2))
    diff = max(abs(branin_mf(x, 3) + standard_branin(*x)) for x in X)
    assert diff <= 1e-10


def test_branin_sqrt_argument_positive_on_grid():
    g1, g2 = np.meshgrid(np.linspace(-5, 10, 100), np.linspace(0, 15, 100))
    for x in np.column_stack([g1.ravel(), g2.ravel()]):
        assert branin_mf(x, 3) < 0
        assert -branin_mf(x - 2.0, 3) > 0
        assert math.isfinite(branin_mf(x, 2)) and math.isfinite(branin_mf(x, 1))


def test_branin_lower_fidelities_follow_formulas():
    x = np.array([1.3, 7.2])
    f2 = -10 * math.sqrt(-branin_mf(x - 2, 3)) - 2 * (x[0] - 0.5) + 3 * (3 * x[1] - 1) + 1
    assert branin_mf(x, 2) == pytest.approx(f2, rel=1e-14)
    assert branin_mf(x, 1) == pytest.approx(-branin_mf(1.2 * (x + 2), 2) + 3 * x[1] - 1, rel=1e-14)


def test_levy_known_values():
    assert levy_mf(np.array([1.0, 1.0]), 2) == 0.0
    assert levy_mf(np.array([1.0, 1.0]), 1) == -1.0


def test_levy_low_fidelity_bound():
    rng = np.random.default_rng(1)
    for x in rng.uniform(-10, 10, size=(500, 2)):
        f2 = levy_mf(x, 2)
        f1 = levy_mf(x, 1)
        assert f1 <= -1.0
        assert f1 == pytest.approx(-math.sqrt(1 + f2 * f2), rel=1e-14)


def test_fidelity_out_of_range():
    with pytest.raises(FidelityOutOfRange):
        branin_mf(np.zeros(2), 4)
    with pytest.raises(FidelityOutOfRange):
        levy_mf(np.zeros(2), 0)


def test_registry():
    assert set(BENCHMARKS) == {"branin3", "levy2"}
    fn = get_benchmark("branin3")
    assert fn.fidelity_count == 3 and fn.input_dim == 2
    x_star, f_star = fn.known_optimum
    assert f_star == BRANIN_OPTIMUM == pytest.approx(-0.397887, abs=1e-6)
    assert fn(x_star, 3) == pytest.approx(f_star, abs=1e-5)
    levy = get_benchmark("levy2")
    assert levy(levy.known_optimum[0], 2) == levy.known_optimum[1]
    with pytest.raises(KeyError):
        get_benchmark("rosenbrock")


def test_generate_dataset_counts_and_determinism():
    fn = get_benchmark("levy2")
    a = generate_dataset(fn, SyntheticDatasetSpec((130, 65), seed=4))
    b = generate_dataset(fn, SyntheticDatasetSpec((130, 65), seed=4))
    assert a.counts == [130, 65]
    for xa, xb in zip(a.inputs, b.inputs):
        np.testing.assert_array_equal(xa, xb)
    for m, x, y in a.rows():
        assert np.all(x >= fn.lower) and np.all(x <= fn.upper)
        assert y == fn(x, m)


def test_generate_dataset_empty_and_errors():
    fn = get_benchmark("branin3")
    data = generate_dataset(fn, [0, 0, 0], make_rng(0))
    assert len(data) == 0
    with pytest.raises(ValueError):
        generate_dataset(fn, [1, 2], make_rng(0))
    with pytest.raises(ValueError):
        SyntheticDatasetSpec((-1, 2))


def test_default_cost_model():
    np.testing.assert_array_equal(default_cost_model(3), [1, 10, 50])
    np.testing.assert_array_equal(default_cost_model(2), [1, 10])
    np.testing.assert_array_equal(default_cost_model(1), [1])
    np.testing.assert_array_equal(default_cost_model(5), [1, 10, 50, 250, 1250])


def test_levy_matches_direct_formula():
    rng = np.random.default_rng(2)
    s = math.sin
    for x1, x2 in rng.uniform(-10, 10, size=(1000, 2)):
        ref = (-s(3 * math.pi * x1) ** 2 - (x1 - 1) ** 2 * (1 + s(3 * math.pi * x2) ** 2)
               - (x2 - 1) ** 2 * (1 + s(2 * math.pi * x2) ** 2))
        assert levy_mf(np.array([x1, x2]), 2) == pytest.approx(ref, rel=1e-12, abs=1e-12)
