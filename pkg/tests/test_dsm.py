import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_batch, random_mixture
from oracles import gradient_check
from vdsm import distributions as dist
from vdsm.dsm import (
    ElboMode,
    MixtureModel,
    TrainConfig,
    censored_loss,
    dsm_loss,
    gate_probs,
    predict_log_survival,
    predict_risk,
    uncensored_loss,
)
from vdsm.errors import InvalidInputError
from vdsm.numerics import RngStream, mlp_forward

MODES = [ElboMode.JENSEN, ElboMode.EXACT]


def component_params(model):
    eta, beta = dist.natural_params(model.family, model.eta_raw.data, model.beta_raw.data)
    return eta.data, beta.data


def test_zero_gating_is_uniform():
    model = MixtureModel(3, 4, rng=RngStream(0))
    model.gating.zero_()
    np.testing.assert_allclose(gate_probs(model, np.ones(3)), np.full(4, 0.25), atol=1e-15)


def test_single_component_gate():
    model = MixtureModel(3, 1, rng=RngStream(0))
    assert gate_probs(model, np.array([0.3, -2.0, 1.0])) == pytest.approx([1.0])


def test_gate_matches_softmax_of_mlp(mixture):
    x = np.random.default_rng(1).normal(size=4)
    logits = mlp_forward(mixture.gating.spec, mixture.gating.params, x, "gate").data
    expected = np.exp(logits - logits.max())
    expected /= expected.sum()
    probs = gate_probs(mixture, x)
    np.testing.assert_allclose(probs, expected, atol=1e-12)
    assert abs(probs.sum() - 1.0) < 1e-12


def test_gate_dimension_mismatch(mixture):
    with pytest.raises(InvalidInputError):
        gate_probs(mixture, np.ones(5))


@pytest.mark.parametrize("family", ["weibull", "lognormal"])
def test_single_component_survival(family):
    model = random_mixture(k=1, family=family)
    x = np.zeros(4)
    p = (model.eta_raw.data[0], model.beta_raw.data[0])
    assert predict_log_survival(model, x, 1.3) == pytest.approx(float(dist.log_survival(family, p, 1.3).data), abs=1e-13)


def test_identical_components_collapse():
    model = random_mixture(k=2)
    model.eta_raw.data[1] = model.eta_raw.data[0]
    model.beta_raw.data[1] = model.beta_raw.data[0]
    p = (model.eta_raw.data[0], model.beta_raw.data[0])
    expected = float(dist.log_survival("weibull", p, 0.8).data)
    for x in np.random.default_rng(0).normal(size=(5, 4)):
        assert predict_log_survival(model, x, 0.8) == pytest.approx(expected, abs=1e-13)


@pytest.mark.parametrize("family", ["weibull", "lognormal"])
def test_survival_direct_sum(family):
    model = random_mixture(k=3, family=family, seed=4)
    x = np.random.default_rng(9).normal(size=4)
    gates = gate_probs(model, x)
    eta, beta = component_params(model)
    total = 0.0
    for g, e, b in zip(gates, eta, beta):
        if family == "weibull":
            total += g * math.exp(-((2.0 / b) ** e))
        else:
            total += g * 0.5 * math.erfc((math.log(2.0) - e) / (b * math.sqrt(2)))
    assert predict_log_survival(model, x, 2.0) == pytest.approx(math.log(total), abs=1e-12)
    assert predict_risk(model, x, 2.0) == pytest.approx(1 - total, abs=1e-12)


def test_predict_rejects_non_positive_time(mixture):
    with pytest.raises(InvalidInputError):
        predict_log_survival(mixture, np.zeros(4), 0.0)
    with pytest.raises(InvalidInputError):
        predict_risk(mixture, np.zeros(4), -1.0)


def test_risk_limits():
    model = MixtureModel(2, 1, rng=RngStream(0))
    model.set_components(1.0, 1.0)
    assert predict_risk(model, np.zeros(2), 1.0) == pytest.approx(1 - math.exp(-1), abs=1e-12)
    assert predict_risk(model, np.zeros(2), 1e-12) < 1e-11


@pytest.mark.parametrize("perturbation", [False, True])
@pytest.mark.parametrize("family", ["weibull", "lognormal"])
def test_survival_monotone_on_grid(family, perturbation):
    model = random_mixture(k=3, family=family, seed=2, perturbation=perturbation)
    grid = np.linspace(0.01, 20, 100)
    x = np.random.default_rng(3).normal(size=(6, 4))
    ls = predict_log_survival(model, x, grid)
    assert ls.shape == (6, 100)
    assert np.all(np.diff(ls, axis=1) <= 0)
    assert np.all(np.diff(predict_risk(model, x, grid), axis=1) >= 0)


@pytest.mark.parametrize("family", ["weibull", "lognormal"])
def test_k1_modes_agree(family):
    model = random_mixture(k=1, family=family)
    x, u, _ = random_batch(6)
    p = (model.eta_raw.data[0], model.beta_raw.data[0])
    expect_u = -float(dist.log_pdf(family, p, u).sum().data)
    expect_c = -float(dist.log_survival(family, p, u).sum().data)
    for mode in MODES:
        assert float(uncensored_loss(model, x, u, mode=mode).data) == pytest.approx(expect_u, rel=1e-12)
        assert float(censored_loss(model, x, u, mode=mode).data) == pytest.approx(expect_c, rel=1e-12)


@pytest.mark.parametrize("event", [True, False])
def test_expectation_expansion(event):
    model = random_mixture(k=3, seed=7)
    x, u, _ = random_batch(5, seed=3)
    eta, beta = component_params(model)
    expected = 0.0
    for i in range(5):
        g = gate_probs(model, x[i])
        for k in range(3):
            z = (u[i] / beta[k]) ** eta[k]
            if event:
                term = math.log(eta[k] / beta[k]) + (eta[k] - 1) * math.log(u[i] / beta[k]) - z
            else:
                term = -z
            expected += g[k] * (-term)
    fn = uncensored_loss if event else censored_loss
    assert float(fn(model, x, u).data) == pytest.approx(expected, abs=1e-10)


def test_delta_mismatch_rejected(mixture):
    x, u, _ = random_batch(4)
    with pytest.raises(InvalidInputError):
        uncensored_loss(mixture, x, u, delta=[1, 0, 1, 1])
    with pytest.raises(InvalidInputError):
        censored_loss(mixture, x, u, delta=[0, 0, 1, 0])


def test_empty_batch_is_zero(mixture):
    empty = np.zeros((0, 4))
    assert float(uncensored_loss(mixture, empty, []).data) == 0.0
    assert float(censored_loss(mixture, empty, []).data) == 0.0
    assert float(dsm_loss(mixture, empty, [], []).data) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["weibull", "lognormal"]), st.integers(1, 5))
def test_exact_never_exceeds_jensen(seed, family, k):
    model = random_mixture(k=k, family=family, seed=seed)
    x, u, delta = random_batch(8, seed=seed)
    for fn in (uncensored_loss, censored_loss):
        exact = float(fn(model, x, u, mode=ElboMode.EXACT).data)
        bound = float(fn(model, x, u, mode=ElboMode.JENSEN).data)
        assert exact <= bound + 1e-12 * max(1.0, abs(bound))


def test_exact_never_exceeds_jensen_sweep():
    for i in range(1000):
        model = random_mixture(k=2 + i % 4, family=("weibull", "lognormal")[i % 2], seed=i // 10)
        x, u, delta = random_batch(6, seed=10_000 + i)
        for fn in (uncensored_loss, censored_loss):
            exact = float(fn(model, x, u, mode=ElboMode.EXACT).data)
            bound = float(fn(model, x, u, mode=ElboMode.JENSEN).data)
            assert exact <= bound + 1e-12 * max(1.0, abs(bound)), i


def test_all_events_reduces_to_uncensored(mixture):
    x, u, _ = random_batch(7)
    d = np.ones(7, dtype=int)
    got = float(dsm_loss(mixture, x, u, d, TrainConfig(discount=0.5)).data)
    assert got == pytest.approx(float(uncensored_loss(mixture, x, u).data) / 7, rel=1e-13)


def test_discount_is_linear(mixture):
    x, u, d = random_batch(9, seed=2)
    full = float(dsm_loss(mixture, x, u, d, TrainConfig(discount=1.0)).data)
    half = float(dsm_loss(mixture, x, u, d, TrainConfig(discount=0.5)).data)
    lc = float(censored_loss(mixture, x[d == 0], u[d == 0]).data)
    assert full - half == pytest.approx(0.5 * lc / 9, rel=1e-12)


@pytest.mark.parametrize("mode", MODES)
def test_mixed_batch_subset_split(mode):
    model = random_mixture(k=3, seed=11)
    x, u, _ = random_batch(6, seed=5)
    d = np.array([1, 0, 1, 1, 0, 0])
    cfg = TrainConfig(discount=0.75, elbo_mode=mode)
    expected = 0.0
    for i in range(6):
        fn = uncensored_loss if d[i] else censored_loss
        term = float(fn(model, x[i : i + 1], u[i : i + 1], mode=mode).data)
        expected += term if d[i] else 0.75 * term
    assert float(dsm_loss(model, x, u, d, cfg).data) == pytest.approx(expected / 6, rel=1e-12)


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("family", ["weibull", "lognormal"])
@pytest.mark.parametrize("perturbation", [False, True])
def test_dsm_loss_gradients(mode, family, perturbation):
    model = random_mixture(k=3, family=family, seed=13, perturbation=perturbation)
    x, u, d = random_batch(8, seed=13)
    cfg = TrainConfig(discount=0.5, elbo_mode=mode)
    err = gradient_check(lambda: dsm_loss(model, x, u, d, cfg), model.parameters())
    assert err < 1e-4


def test_time_scale_equivalence():
    """Rescaling times and component scales together leaves ln S unchanged."""
    model = random_mixture(k=2, seed=3)
    x = np.random.default_rng(0).normal(size=(3, 4))
    before = predict_log_survival(model, x, [0.5, 2.0])
    eta, beta = component_params(model)
    model.time_scale = 10.0
    model.set_components(eta, beta / 10.0)
    np.testing.assert_allclose(predict_log_survival(model, x, [0.5, 2.0]), before, atol=1e-12)
    np.testing.assert_allclose(model.natural_components()[1], beta, rtol=1e-12)


def test_train_config_validation():
    with pytest.raises(InvalidInputError):
        TrainConfig(discount=0.0)
    with pytest.raises(ValueError):
        TrainConfig(elbo_mode="other")
