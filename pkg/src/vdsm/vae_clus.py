"""Gaussian-mixture VAE front-end (VaDE-style generative clustering).

Generative model: c ~ Cat(pi), z | c ~ N(mu_c, diag sigma_c^2),
x | z ~ N(decoder(z), sigma_x^2 I).  The variational family is
q(z, c | x) = q(z | x) q(c | x) with q(c | x) = p(c | z).
"""
from __future__ import annotations

import math
import warnings

import numpy as np

from .errors import InvalidInputError, VDSMError
from .numerics import (
    LOG_2PI,
    AdamState,
    Mlp,
    MlpSpec,
    Tensor,
    adam_step,
    as_tensor,
    backward,
    log_softmax,
    param,
    softplus_inverse,
    zero_grads,
)


class DegenerateClusterError(VDSMError):
    pass


class GmmPrior:
    """Mixture-of-Gaussians prior over the latent code.

    Trainable raw parameters: ``pi`` via softmax of ``gmm.pi_logits``,
    ``mu_c`` directly, ``sigma_c`` via softplus of ``gmm.sigma_raw``.
    """

    def __init__(self, k, latent_dim, pi=None, mu=None, sigma=None):
        self.k = int(k)
        self.latent_dim = int(latent_dim)
        if self.k < 1 or self.latent_dim < 1:
            raise InvalidInputError("GMM prior needs K >= 1 and latent_dim >= 1")
        pi = np.full(self.k, 1.0 / self.k) if pi is None else np.asarray(pi, dtype=np.float64)
        mu = np.zeros((self.k, self.latent_dim)) if mu is None else mu
        sigma = np.ones((self.k, self.latent_dim)) if sigma is None else sigma
        self.pi_logits = param(np.zeros(self.k), "gmm.pi_logits")
        self.mu = param(np.zeros((self.k, self.latent_dim)), "gmm.mu")
        self.sigma_raw = param(np.zeros((self.k, self.latent_dim)), "gmm.sigma_raw")
        self.set(pi, mu, sigma)

    def set(self, pi, mu, sigma):
        pi = np.asarray(pi, dtype=np.float64)
        if pi.shape != (self.k,) or np.any(pi <= 0) or abs(pi.sum() - 1.0) > 1e-9:
            raise InvalidInputError("pi must be a strictly positive K-simplex")
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (self.k, self.latent_dim))
        if np.any(sigma <= 0):
            raise InvalidInputError("sigma_c must be positive")
        self.pi_logits.data[:] = np.log(pi)
        self.mu.data[...] = np.broadcast_to(np.asarray(mu, dtype=np.float64), (self.k, self.latent_dim))
        self.sigma_raw.data[...] = softplus_inverse(sigma)

    def parameters(self):
        return {"gmm.pi_logits": self.pi_logits, "gmm.mu": self.mu, "gmm.sigma_raw": self.sigma_raw}

    def log_pi(self):
        return log_softmax(self.pi_logits, axis=-1)

    def sigma(self):
        return self.sigma_raw.softplus()

    @property
    def pi(self):
        return self.log_pi().exp().data

    @property
    def sigma_c(self):
        return self.sigma().data


class GaussEncoderDecoder:
    """Encoder x -> (mu_z, ln sigma_z^2), decoder z -> mu_x."""

    def __init__(
        self,
        input_dim,
        latent_dim=8,
        rng=None,
        hidden_dims=(100,),
        activation="tanh",
        sigma_x=1.0,
        learn_sigma_x=False,
    ):
        if latent_dim < 1:
            raise InvalidInputError("latent_dim must be >= 1")
        if not sigma_x > 0:
            raise InvalidInputError("sigma_x must be positive")
        self.input_dim = int(input_dim)
        self.latent_dim = int(latent_dim)
        self.encoder = Mlp(MlpSpec(self.input_dim, hidden_dims, 2 * self.latent_dim, activation), rng, "clus_enc")
        self.decoder = Mlp(MlpSpec(self.latent_dim, hidden_dims, self.input_dim, activation), rng, "clus_dec")
        self.sigma_x_raw = param(np.array([softplus_inverse(sigma_x)]), "clus.sigma_x_raw")
        self.learn_sigma_x = learn_sigma_x

    def parameters(self):
        out = {**self.encoder.params, **self.decoder.params}
        if self.learn_sigma_x:
            out["clus.sigma_x_raw"] = self.sigma_x_raw
        return out

    def encode(self, x):
        x = as_tensor(x)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        if x.shape[1] != self.input_dim:
            raise InvalidInputError(f"expected covariates of width {self.input_dim}, got {x.shape}")
        h = self.encoder(x)
        return h[:, : self.latent_dim], h[:, self.latent_dim :]

    def decode(self, z):
        return self.decoder(z)

    def sigma_x(self):
        return self.sigma_x_raw.softplus()


def reparameterize(mu, sigma, eps):
    """z = mu + sigma * eps."""
    sigma_data = sigma.data if isinstance(sigma, Tensor) else np.asarray(sigma)
    if np.any(sigma_data <= 0):
        raise InvalidInputError("sigma must be positive")
    if isinstance(mu, Tensor) or isinstance(sigma, Tensor):
        return as_tensor(mu) + as_tensor(sigma) * eps
    return np.asarray(mu) + sigma_data * np.asarray(eps)


def _diag_gauss_logpdf(z, mu, sigma):
    # z: (B, d) ; mu, sigma: (K, d) -> (B, K)
    zc = z.reshape(z.shape[0], 1, z.shape[1])
    diff = (zc - mu) / sigma
    return -0.5 * diff.square().sum(axis=-1) - sigma.log().sum(axis=-1) - 0.5 * z.shape[1] * LOG_2PI


def gmm_log_responsibilities(prior, z):
    """ln p(c | z) as a (B, K) tensor; differentiable in z and the prior."""
    z = as_tensor(z)
    if z.ndim == 1:
        z = z.reshape(1, -1)
    joint = prior.log_pi() + _diag_gauss_logpdf(z, prior.mu, prior.sigma())
    return log_softmax(joint, axis=-1)


def gmm_cluster_posterior(prior, z):
    """Normalised responsibilities p(c | z) (one row per latent vector)."""
    single = np.ndim(z) == 1
    out = gmm_log_responsibilities(prior, z).exp().data
    return out[0] if single else out


def gaussian_kl_to_components(mu_z, logvar_z, prior):
    """Closed-form KL(N(mu_z, e^logvar_z) || N(mu_c, sigma_c^2)) for every c, (B, K)."""
    b, d = mu_z.shape
    mu_z = mu_z.reshape(b, 1, d)
    logvar_z = logvar_z.reshape(b, 1, d)
    var_c = prior.sigma().square()
    inner = var_c.log() - logvar_z + (logvar_z.exp() + (mu_z - prior.mu).square()) / var_c - 1.0
    return 0.5 * inner.sum(axis=-1)


def elbo_terms(model, prior, x, eps):
    """Per-record pieces of the negative ELBO for fixed noise.

    ``eps`` has shape (S, B, d_z) for S Monte Carlo samples (or (B, d_z)).
    Returns tensors ``(recon_nll, weighted_gauss_kl, cat_kl)``, each (B,).
    """
    x = as_tensor(x)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.ndim == 2:
        eps = eps[None]
    mu_z, logvar_z = model.encode(x)
    std_z = (0.5 * logvar_z).exp()
    kl_c = gaussian_kl_to_components(mu_z, logvar_z, prior)
    log_pi = prior.log_pi()
    sigma_x = model.sigma_x()
    d = x.shape[1]
    recon = gauss_kl = cat_kl = 0.0
    n_samples = eps.shape[0]
    for s in range(n_samples):
        z = mu_z + std_z * eps[s]
        x_hat = model.decode(z)
        ll = -0.5 * ((x - x_hat) / sigma_x).square().sum(axis=-1) - d * sigma_x.log() - 0.5 * d * LOG_2PI
        log_gamma = gmm_log_responsibilities(prior, z)
        gamma = log_gamma.exp()
        recon = recon + (-ll)
        gauss_kl = gauss_kl + (gamma * kl_c).sum(axis=-1)
        cat_kl = cat_kl + (gamma * (log_gamma - log_pi)).sum(axis=-1)
    scale = 1.0 / n_samples
    return recon * scale, gauss_kl * scale, cat_kl * scale


def elbo_clus(model, prior, x, rng=None, eps=None, n_samples=1):
    """Negative ELBO averaged over the batch (a loss to minimise)."""
    x = as_tensor(x)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if eps is None:
        if rng is None:
            raise InvalidInputError("either rng or fixed eps is required")
        eps = rng.normal((n_samples, x.shape[0], model.latent_dim))
    recon, gauss_kl, cat_kl = elbo_terms(model, prior, x, eps)
    return (recon + gauss_kl + cat_kl).mean()


def cluster_log_posterior_clus(model, prior, x):
    """ln q(c | x) evaluated at the encoder mean, (B, K) tensor."""
    mu_z, _ = model.encode(x)
    return gmm_log_responsibilities(prior, mu_z)


def cluster_posterior_clus(model, prior, x):
    single = np.ndim(x) == 1
    out = cluster_log_posterior_clus(model, prior, x).exp().data
    return out[0] if single else out


def encoded_means(model, x):
    return model.encode(x)[0].data


# initialisation -----------------------------------------------------------------


def kmeans_pp_centers(z, k, rng):
    n = z.shape[0]
    centers = [z[int(rng.integers(0, n))]]
    d2 = np.sum((z - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(0, n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(z[idx])
        d2 = np.minimum(d2, np.sum((z - z[idx]) ** 2, axis=1))
    return np.array(centers)


def _gmm_log_joint(z, pi, mu, var):
    diff = z[:, None, :] - mu[None]
    return (
        np.log(pi)
        - 0.5 * np.sum(diff * diff / var + np.log(var), axis=-1)
        - 0.5 * z.shape[1] * LOG_2PI
    )


def fit_gmm_em(z, k, rng, n_iter=50, max_reseeds=5, var_floor=1e-6, min_mass=1e-3):
    """Diagonal-covariance GMM by EM with k-means++ seeding.

    Returns ``(pi, mu, var, log_likelihoods)`` where the last entry holds the
    data log-likelihood after each iteration.  An empty component triggers a
    re-seed; after ``max_reseeds`` failures a DegenerateClusterError is raised.
    """
    z = np.asarray(z, dtype=np.float64)
    n, d = z.shape
    if n < k:
        raise InvalidInputError(f"need at least K={k} points for EM, got {n}")
    for attempt in range(max_reseeds + 1):
        mu = kmeans_pp_centers(z, k, rng)
        dist2 = np.sum((z[:, None, :] - mu[None]) ** 2, axis=-1)
        resp = np.zeros((n, k))
        resp[np.arange(n), np.argmin(dist2, axis=1)] = 1.0
        history = []
        degenerate = False
        for _ in range(n_iter):
            nk = resp.sum(axis=0)
            if np.any(nk < min_mass):
                degenerate = True
                break
            pi = nk / n
            mu = resp.T @ z / nk[:, None]
            var = resp.T @ (z * z) / nk[:, None] - mu * mu
            var = np.maximum(var, var_floor)
            log_joint = _gmm_log_joint(z, pi, mu, var)
            log_norm = np.logaddexp.reduce(log_joint, axis=1)
            history.append(float(log_norm.sum()))
            resp = np.exp(log_joint - log_norm[:, None])
        if not degenerate:
            return pi, mu, var, history
        warnings.warn(f"EM produced an empty cluster; re-seeding (attempt {attempt + 1})", stacklevel=2)
    raise DegenerateClusterError(f"EM failed to produce {k} non-empty clusters after {max_reseeds} re-seeds")


def pretrain_and_init(
    model,
    prior,
    x,
    warmup_epochs,
    rng,
    lr=1e-3,
    batch_size=128,
    em_iter=50,
):
    """Warm up the autoencoder on reconstruction only, then fit ``prior`` by EM
    on the encoded means.  Returns the updated prior and the EM history."""
    if warmup_epochs < 0:
        raise InvalidInputError("warmup_epochs must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    params = {**model.encoder.params, **model.decoder.params}
    state = AdamState(lr=lr)
    n = x.shape[0]
    for _ in range(warmup_epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            xb = x[order[start : start + batch_size]]
            zero_grads(params)
            mu_z, _ = model.encode(xb)
            loss = (Tensor(xb) - model.decode(mu_z)).square().sum(axis=-1).mean()
            backward(loss)
            adam_step(state, params)
    z = encoded_means(model, x)
    pi, mu, var, history = fit_gmm_em(z, prior.k, rng, n_iter=em_iter)
    pi = np.maximum(pi, 1e-12)
    prior.set(pi / pi.sum(), mu, np.sqrt(var))
    return prior, history


def log_evidence_is(model, prior, x, rng, n_samples=10_000):
    """Importance-sampled ln p(x) with q(z | x) as proposal, per record.

    Returns ``(estimate, standard_error)`` arrays (delta-method SE of the log).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mu_z, logvar_z = (t.data for t in model.encode(x))
    std_z = np.exp(0.5 * logvar_z)
    sigma_x = float(model.sigma_x().data[0])
    pi = prior.pi
    mu_c = prior.mu.data
    sig_c = prior.sigma_c
    d = x.shape[1]
    est, se = [], []
    for i in range(x.shape[0]):
        eps = rng.normal((n_samples, model.latent_dim))
        z = mu_z[i] + std_z[i] * eps
        x_hat = model.decode(Tensor(z)).data
        log_px_z = -0.5 * np.sum(((x[i] - x_hat) / sigma_x) ** 2, axis=1) - d * math.log(sigma_x) - 0.5 * d * LOG_2PI
        log_pz = np.logaddexp.reduce(_gmm_log_joint(z, pi, mu_c, sig_c**2), axis=1)
        log_q = -0.5 * np.sum(eps**2 + logvar_z[i] + LOG_2PI, axis=1)
        log_w = log_px_z + log_pz - log_q
        m = log_w.max()
        w = np.exp(log_w - m)
        mean_w = w.mean()
        est.append(m + math.log(mean_w))
        se.append(w.std(ddof=1) / math.sqrt(n_samples) / mean_w)
    return np.array(est), np.array(se)


__all__ = [
    "DegenerateClusterError",
    "GaussEncoderDecoder",
    "GmmPrior",
    "cluster_log_posterior_clus",
    "cluster_posterior_clus",
    "elbo_clus",
    "elbo_terms",
    "fit_gmm_em",
    "gaussian_kl_to_components",
    "gmm_cluster_posterior",
    "gmm_log_responsibilities",
    "log_evidence_is",
    "pretrain_and_init",
    "reparameterize",
]
