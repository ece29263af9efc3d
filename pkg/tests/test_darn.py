import math

import numpy as np
import pytest
from scipy.special import gammaln

from conftest import fake_samples, identity_scaler
from mfdarn.darn import (
    LOG_2PI,
    DarnModel,
    DegenerateBounds,
    EmptySampleSet,
    FidelityDataset,
    FidelityOutOfRange,
    NetworkShape,
    Scaler,
    chain_forward,
    chain_outputs,
    fit_scaler,
    grad_log_joint,
    init_weights,
    log_joint,
    predict,
    residual_sums,
)
from mfdarn.hmc import PosteriorSampleSet
from mfdarn.numerics import InvalidParameter, NonFinite, finite_difference_gradient, make_rng


def random_data(rng, d, counts):
    return FidelityDataset([rng.uniform(0, 1, size=(n, d)) for n in counts],
                           [rng.standard_normal(n) for n in counts])


def prior_only(model, w, taus):
    a0, b0 = model.prior_shape, model.prior_rate
    lp = -0.5 * w @ w - 0.5 * len(w) * LOG_2PI
    for t in taus:
        lp += a0 * math.log(b0) - gammaln(a0) + (a0 - 1) * math.log(t) - b0 * t
    return lp


def test_param_count_layer_arithmetic():
    model = DarnModel(1, 1, hidden_widths=(2,))
    assert model.n_params == (1 * 2 + 2) + (2 * 1 + 1) == 7
    # fidelity 2 sees one extra input
    model = DarnModel(3, 2, hidden_widths=(4,))
    assert model.shapes[1].input_dim == 4
    assert model.n_params == (3 * 4 + 4 + 4 + 1) + (4 * 4 + 4 + 4 + 1)


def test_invalid_shapes():
    with pytest.raises(InvalidParameter):
        NetworkShape(0)
    with pytest.raises(InvalidParameter):
        NetworkShape(2, (0,))
    with pytest.raises(InvalidParameter):
        NetworkShape(2, activation="relu")
    with pytest.raises(InvalidParameter):
        DarnModel(2, 0)


def test_init_weights_moments_and_determinism():
    model = DarnModel(2, 3)
    a = init_weights(model, make_rng(0))
    b = init_weights(model, make_rng(0))
    np.testing.assert_array_equal(a, b)
    assert a.shape == (model.n_params,)
    big = np.concatenate([init_weights(model, make_rng(s)) for s in range(20)])[:100_000]
    assert len(big) == 100_000
    assert abs(big.mean()) < 3 / math.sqrt(len(big))
    assert abs(big.var() - 1) < 0.05


def test_zero_weights_give_zero_outputs():
    model = DarnModel(3, 3, hidden_widths=(5, 4))
    out = chain_forward(model, np.zeros(model.n_params), np.array([0.2, 0.9, 0.4]), 3)
    np.testing.assert_array_equal(out, 0.0)


def test_hand_evaluated_single_unit():
    model = DarnModel(1, 1, hidden_widths=(1,))
    a, b, c = 1.7, -0.3, 2.5
    # layout: W1 (1x1), b1, W2 (1x1), b2; fan-in of both layers is 1
    w = np.array([a, b, c, 0.0])
    for x in (0.0, 0.25, 1.0):
        f = chain_forward(model, w, np.array([x]), 1)[0]
        assert abs(f - c * math.tanh(a * x + b)) < 1e-12


def test_chain_input_uses_lower_outputs():
    model = DarnModel(1, 2, hidden_widths=(1,))
    # fidelity 1: f1 = tanh(x); fidelity 2 input [x, f1], hidden unit weights (0, 1) / sqrt(2)
    w = np.array([1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0])
    x = 0.6
    f1, f2 = chain_forward(model, w, np.array([x]), 2)
    assert f1 == pytest.approx(math.tanh(x), abs=1e-15)
    assert f2 == pytest.approx(math.tanh(f1 / math.sqrt(2)), abs=1e-15)


def test_chain_causality():
    rng = np.random.default_rng(0)
    model = DarnModel(2, 3, hidden_widths=(6, 5))
    w = rng.standard_normal(model.n_params)
    X = rng.uniform(size=(7, 2))
    base = chain_outputs(model, w, X, 3)
    for m in (1, 2):
        w2 = w.copy()
        for k in range(m + 1, 4):
            w2[model.fidelity_slice(k)] += rng.standard_normal(w2[model.fidelity_slice(k)].size)
        out = chain_outputs(model, w2, X, 3)
        np.testing.assert_array_equal(out[:, :m], base[:, :m])


def test_chain_outputs_batched_matches_single():
    rng = np.random.default_rng(1)
    model = DarnModel(2, 2, hidden_widths=(3,))
    W = rng.standard_normal((4, model.n_params))
    X = rng.uniform(size=(5, 2))
    batched = chain_outputs(model, W, X, 2)
    for j in range(4):
        for i in range(5):
            np.testing.assert_allclose(batched[j, i], chain_forward(model, W[j], X[i], 2), rtol=1e-14)


def test_fidelity_out_of_range():
    model = DarnModel(2, 2)
    with pytest.raises(FidelityOutOfRange):
        chain_forward(model, np.zeros(model.n_params), np.zeros(2), 3)
    with pytest.raises(FidelityOutOfRange):
        chain_forward(model, np.zeros(model.n_params), np.zeros(2), 0)


def test_log_joint_empty_data_is_prior():
    model = DarnModel(2, 3, hidden_widths=(3,))
    taus = np.array([0.5, 2.0, 7.0])
    data = FidelityDataset.empty(3, 2)
    w = np.zeros(model.n_params)
    expected = -0.5 * model.n_params * LOG_2PI + sum(
        model.prior_shape * math.log(model.prior_rate) - gammaln(model.prior_shape)
        + (model.prior_shape - 1) * math.log(t) - model.prior_rate * t for t in taus)
    assert log_joint(model, w, taus, data) == pytest.approx(expected, rel=1e-13)
    w = np.random.default_rng(0).standard_normal(model.n_params)
    np.testing.assert_allclose(grad_log_joint(model, w, taus, data), -w, rtol=1e-14)


def test_zero_residual_term():
    model = DarnModel(1, 2, hidden_widths=(2,))
    w = np.random.default_rng(3).standard_normal(model.n_params)
    x = np.array([0.3])
    y = chain_forward(model, w, x, 2)[1]
    data = FidelityDataset([np.zeros((0, 1)), x[None, :]], [np.zeros(0), [y]])
    taus = np.array([1.0, 1.0])
    lik = log_joint(model, w, taus, data) - prior_only(model, w, taus)
    assert lik == pytest.approx(-0.5 * LOG_2PI, abs=1e-12)


def test_log_joint_separable_and_doubling():
    rng = np.random.default_rng(4)
    model = DarnModel(2, 3, hidden_widths=(4, 3))
    data = random_data(rng, 2, [6, 4, 3])
    w = rng.standard_normal(model.n_params)
    taus = rng.gamma(2.0, 1.0, size=3)
    prior = prior_only(model, w, taus)
    total = log_joint(model, w, taus, data)
    per_datum = 0.0
    for m, x, y in data.rows():
        f = chain_forward(model, w, x, m)[m - 1]
        per_datum += 0.5 * math.log(taus[m - 1]) - 0.5 * LOG_2PI - 0.5 * taus[m - 1] * (y - f) ** 2
    assert total == pytest.approx(prior + per_datum, rel=1e-12)
    doubled = FidelityDataset([np.vstack([x, x]) for x in data.inputs],
                              [np.concatenate([y, y]) for y in data.targets])
    assert log_joint(model, w, taus, doubled) - prior == pytest.approx(2 * (total - prior), rel=1e-12)


def _rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b))))


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    model = DarnModel(2, 3, hidden_widths=(5, 4))
    data = random_data(rng, 2, [8, 5, 4])
    w = rng.standard_normal(model.n_params)
    taus = rng.gamma(3.0, 1.0, size=3)
    g = grad_log_joint(model, w, taus, data)
    fd = finite_difference_gradient(lambda v: log_joint(model, v, taus, data), w)
    assert _rel_err(g, fd) < 1e-4


def test_cross_fidelity_gradient_flow():
    rng = np.random.default_rng(6)
    model = DarnModel(1, 2, hidden_widths=(3,))
    data = FidelityDataset([np.zeros((0, 1)), np.array([[0.4]])], [np.zeros(0), [1.3]])
    w = rng.standard_normal(model.n_params)
    taus = np.ones(2)
    g = grad_log_joint(model, w, taus, data) + w  # drop the prior part
    s1 = model.fidelity_slice(1)
    fd = finite_difference_gradient(lambda v: log_joint(model, v, taus, data), w) + w
    assert np.any(np.abs(g[s1]) > 1e-6)
    np.testing.assert_allclose(g[s1], fd[s1], atol=1e-6)


def test_residual_sums():
    rng = np.random.default_rng(7)
    model = DarnModel(2, 2, hidden_widths=(3,))
    data = random_data(rng, 2, [5, 0])
    w = rng.standard_normal(model.n_params)
    counts, ss = residual_sums(model, w, data)
    assert list(counts) == [5, 0] and ss[1] == 0.0
    f = chain_outputs(model, w, data.inputs[0], 1)[:, 0]
    assert ss[0] == pytest.approx(np.sum((data.targets[0] - f) ** 2), rel=1e-12)


def test_scaler_examples():
    data = FidelityDataset([np.array([[0.0], [2.0]])], [[1.0, 3.0]])
    sc = fit_scaler(data, ([0.0], [2.0]))
    assert sc.scale_x(np.array([1.0]))[0] == 0.5
    np.testing.assert_allclose(sc.standardize(data.targets[0], 1), [-1.0, 1.0])
    const = FidelityDataset([np.zeros((3, 1))], [[5.0, 5.0, 5.0]])
    sc = fit_scaler(const, ([0.0], [1.0]))
    assert sc.y_std[0] == 1e-12
    np.testing.assert_array_equal(sc.standardize(const.targets[0], 1), 0.0)
    with pytest.raises(DegenerateBounds):
        fit_scaler(data, ([1.0], [1.0]))
    assert Scaler.from_dict(sc.to_dict()).to_dict() == sc.to_dict()


def test_scaler_sparse_fidelity_uses_pooled_stats():
    data = FidelityDataset([np.zeros((2, 1)), np.zeros((1, 1))], [[0.0, 2.0], [10.0]])
    sc = fit_scaler(data, ([0.0], [1.0]))
    pooled = np.array([0.0, 2.0, 10.0])
    assert sc.y_mean[1] == pytest.approx(pooled.mean())
    assert sc.y_std[1] == pytest.approx(pooled.std())


def test_dataset_validation():
    with pytest.raises(ValueError):
        FidelityDataset([np.zeros((2, 1))], [[1.0]])
    with pytest.raises(NonFinite):
        FidelityDataset([np.array([[np.nan]])], [[1.0]])


def test_predict_identical_samples_noise_only():
    model = DarnModel(2, 2, hidden_widths=(3,))
    w = np.random.default_rng(8).standard_normal(model.n_params)
    taus = np.array([[2.0, 4.0], [2.0, 0.5]])
    scaler = Scaler(np.zeros(2), np.ones(2), np.array([1.0, -3.0]), np.array([2.0, 5.0]))
    s = PosteriorSampleSet(np.vstack([w, w]), taus, 0.5, scaler, model)
    mean, var = predict(model, s, np.array([0.3, 0.7]), 2)
    f = chain_forward(model, w, np.array([0.3, 0.7]), 2)[1]
    assert mean == pytest.approx(-3.0 + 5.0 * f, rel=1e-13)
    assert var == pytest.approx(25.0 * np.mean(1 / taus[:, 1]), rel=1e-13)


def test_predict_variance_floor_and_batch():
    model = DarnModel(2, 2, hidden_widths=(4,))
    s = fake_samples(model, 30, seed=9)
    X = np.random.default_rng(9).uniform(size=(20, 2))
    mean, var = predict(model, s, X, 2)
    assert mean.shape == var.shape == (20,)
    assert np.all(var >= np.mean(1 / s.taus[:, 1]) - 1e-15)
    m0, v0 = predict(model, s, X[0], 2)
    assert m0 == pytest.approx(mean[0]) and v0 == pytest.approx(var[0])


def test_predict_empty_samples():
    model = DarnModel(1, 1)
    s = PosteriorSampleSet(np.zeros((0, model.n_params)), np.zeros((0, 1)), 0.0,
                           identity_scaler(1, 1), model)
    with pytest.raises(EmptySampleSet):
        predict(model, s, np.zeros(1), 1)
