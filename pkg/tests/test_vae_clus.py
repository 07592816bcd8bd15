import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from oracles import gradient_check
from vdsm.errors import InvalidInputError
from vdsm.numerics import RngStream
from vdsm.vae_clus import (
    DegenerateClusterError,
    GaussEncoderDecoder,
    GmmPrior,
    cluster_posterior_clus,
    elbo_clus,
    elbo_terms,
    fit_gmm_em,
    gmm_cluster_posterior,
    log_evidence_is,
    pretrain_and_init,
    reparameterize,
)


def random_prior(k=3, d=2, seed=0):
    rng = np.random.default_rng(seed)
    return GmmPrior(k, d, rng.dirichlet(np.ones(k) * 3), rng.normal(size=(k, d)) * 2, rng.uniform(0.5, 1.5, (k, d)))


def random_model(dim=3, latent=2, seed=0, scale=0.4):
    model = GaussEncoderDecoder(dim, latent, RngStream(seed), hidden_dims=(5,))
    rng = np.random.default_rng(seed + 100)
    for p in model.parameters().values():
        p.data[...] = rng.normal(size=p.shape) * scale
    return model


def test_reparameterize_cases():
    assert reparameterize(0.0, 1.0, 1.0) == 1.0
    assert reparameterize(2.0, 0.5, -2.0) == 1.0
    with pytest.raises(InvalidInputError):
        reparameterize(0.0, 0.0, 1.0)


def test_reparameterize_moments():
    eps = RngStream(0).normal(1_000_000)
    z = reparameterize(1.5, 0.7, eps)
    assert abs(z.mean() - 1.5) < 0.005
    assert abs(z.std() - 0.7) < 0.005


def test_posterior_single_component():
    prior = GmmPrior(1, 2)
    np.testing.assert_array_equal(gmm_cluster_posterior(prior, np.array([[3.0, -1.0], [0.0, 0.0]])), [[1.0], [1.0]])


def test_posterior_midpoint_symmetry():
    prior = GmmPrior(2, 2, [0.5, 0.5], [[-1.0, 0.0], [1.0, 0.0]], 1.0)
    np.testing.assert_allclose(gmm_cluster_posterior(prior, np.zeros(2)), [0.5, 0.5], atol=1e-15)


def test_posterior_matches_scipy():
    prior = random_prior(k=4, d=3, seed=2)
    z = np.random.default_rng(1).normal(size=(7, 3)) * 2
    dens = np.stack(
        [prior.pi[c] * multivariate_normal(prior.mu.data[c], np.diag(prior.sigma_c[c] ** 2)).pdf(z) for c in range(4)],
        axis=1,
    )
    np.testing.assert_allclose(gmm_cluster_posterior(prior, z), dens / dens.sum(axis=1, keepdims=True), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_posterior_permutation_equivariant(seed):
    prior = random_prior(k=4, d=2, seed=seed)
    perm = np.random.default_rng(seed).permutation(4)
    permuted = GmmPrior(4, 2, prior.pi[perm], prior.mu.data[perm], prior.sigma_c[perm])
    z = np.random.default_rng(seed + 1).normal(size=(5, 2))
    np.testing.assert_allclose(gmm_cluster_posterior(permuted, z), gmm_cluster_posterior(prior, z)[:, perm], atol=1e-12)


def test_single_standard_component_reduces_to_vae():
    model = random_model(seed=3)
    prior = GmmPrior(1, 2)
    x = np.random.default_rng(0).normal(size=(6, 3))
    eps = RngStream(1).normal((1, 6, 2))
    recon, gauss_kl, cat_kl = elbo_terms(model, prior, x, eps)
    mu, logvar = (t.data for t in model.encode(x))
    vae_kl = 0.5 * np.sum(np.exp(logvar) + mu**2 - 1.0 - logvar, axis=1)
    np.testing.assert_allclose(gauss_kl.data, vae_kl, atol=1e-12)
    np.testing.assert_allclose(cat_kl.data, 0.0, atol=1e-15)
    z = mu + np.exp(0.5 * logvar) * eps[0]
    x_hat = model.decode(z).data
    expected = 0.5 * np.sum((x - x_hat) ** 2, axis=1) + 1.5 * math.log(2 * math.pi)
    np.testing.assert_allclose(recon.data, expected, atol=1e-12)


def test_gauss_kl_zero_when_posterior_equals_component():
    model = random_model(seed=4)
    prior = GmmPrior(1, 2)
    model.encoder.zero_()  # mu_z = 0, log var = 0
    x = np.random.default_rng(0).normal(size=(3, 3))
    _, gauss_kl, _ = elbo_terms(model, prior, x, np.zeros((3, 2)))
    np.testing.assert_allclose(gauss_kl.data, 0.0, atol=1e-15)


def test_elbo_below_importance_sampled_evidence():
    model = random_model(dim=2, latent=2, seed=5, scale=0.3)
    prior = random_prior(k=2, d=2, seed=5)
    x = np.array([[0.4, -0.8], [1.2, 0.3]])
    est, se = log_evidence_is(model, prior, x, RngStream(11), n_samples=20_000)
    for i in range(2):
        elbo = -float(elbo_clus(model, prior, x[i], rng=RngStream(12), n_samples=4000).data)
        assert elbo <= est[i] + 3 * se[i]


def test_well_separated_clusters_posterior():
    prior = GmmPrior(2, 1, [0.5, 0.5], [[-5.0], [5.0]], 1.0)
    model = GaussEncoderDecoder(1, 1, RngStream(0), hidden_dims=(3,))
    model.encoder.zero_()
    # encoder mean equals the input: a single path through the hidden layer is near-linear
    model.encoder.params["clus_enc.W0"].data[0, 0] = 1e-3
    model.encoder.params["clus_enc.W1"].data[0, 0] = 1e3
    post = cluster_posterior_clus(model, prior, np.array([[-5.0], [5.0]]))
    assert post[0, 0] > 0.99 and post[1, 1] > 0.99


def blobs(seed=0, n=300):
    rng = np.random.default_rng(seed)
    means = np.array([[-4.0, 0.0], [4.0, 0.0], [0.0, 5.0]])
    z = np.concatenate([m + rng.normal(size=(n, 2)) for m in means])
    return z, means


def test_em_recovers_blob_means():
    z, means = blobs()
    pi, mu, var, _ = fit_gmm_em(z, 3, RngStream(0))
    order = np.argsort(mu[:, 0] * 10 + mu[:, 1])
    truth = means[np.argsort(means[:, 0] * 10 + means[:, 1])]
    np.testing.assert_allclose(mu[order], truth, atol=0.15)
    np.testing.assert_allclose(pi, 1 / 3, atol=0.02)


def test_em_log_likelihood_monotone():
    z, _ = blobs(seed=1, n=100)
    _, _, _, hist = fit_gmm_em(z, 4, RngStream(3))
    assert all(b >= a - 1e-8 for a, b in zip(hist, hist[1:]))


def test_em_single_component_is_moments():
    z = np.random.default_rng(2).normal(size=(500, 3)) * [1, 2, 3] + 1
    pi, mu, var, _ = fit_gmm_em(z, 1, RngStream(0))
    assert pi[0] == pytest.approx(1.0)
    np.testing.assert_allclose(mu[0], z.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(var[0], z.var(axis=0), rtol=1e-10)


def test_em_degenerate_raises():
    z = np.zeros((5, 2))
    with pytest.warns(UserWarning), pytest.raises(DegenerateClusterError):
        fit_gmm_em(z, 3, RngStream(0), max_reseeds=1)
    with pytest.raises(InvalidInputError):
        fit_gmm_em(z[:2], 3, RngStream(0))


def test_pretrain_sets_prior():
    z, _ = blobs(n=40)
    x = np.concatenate([z, z @ np.array([[0.5], [-0.2]])], axis=1)
    model = GaussEncoderDecoder(3, 2, RngStream(1), hidden_dims=(8,))
    prior, hist = pretrain_and_init(model, GmmPrior(3, 2), x, warmup_epochs=2, rng=RngStream(2), em_iter=10)
    assert len(hist) == 10
    assert abs(prior.pi.sum() - 1) < 1e-12 and np.all(prior.sigma_c > 0)


def test_elbo_gradients_fixed_noise():
    model = random_model(dim=3, latent=2, seed=7)
    prior = random_prior(k=3, d=2, seed=7)
    x = np.random.default_rng(3).normal(size=(5, 3))
    eps = RngStream(4).normal((2, 5, 2))
    params = {**model.parameters(), **prior.parameters()}
    assert gradient_check(lambda: elbo_clus(model, prior, x, eps=eps), params) < 1e-4


def test_elbo_requires_noise_source():
    with pytest.raises(InvalidInputError):
        elbo_clus(random_model(), GmmPrior(2, 2), np.zeros((1, 3)))


def test_prior_validation():
    with pytest.raises(InvalidInputError):
        GmmPrior(2, 2, pi=[1.0, 0.0])
    with pytest.raises(InvalidInputError):
        GmmPrior(2, 2, sigma=-1.0)
