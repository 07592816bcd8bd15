"""Categorical VAE front-end with Gumbel-Softmax relaxation.

The encoder maps x to ``N`` independent blocks of ``K`` logits.  Samples
are relaxed one-hot vectors; the decoder reconstructs x from their
concatenation.  The cluster posterior used to gate the survival mixture
multiplies the N per-block softmaxes and renormalises.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .numerics import Mlp, MlpSpec, Tensor, as_tensor, log_softmax, softmax


@dataclass(frozen=True)
class CatLatentSpec:
    n: int = 1
    k: int = 4
    tau: float = 1.0

    def __post_init__(self):
        if self.n < 1 or self.k < 2 or not self.tau > 0:
            raise InvalidInputError(f"invalid categorical latent spec {self}")


def anneal_tau(step, rate=3e-5, floor=0.5):
    """Exponential temperature schedule max(floor, exp(-rate * step))."""
    return max(floor, math.exp(-rate * step))


def gumbel_sample(rng, shape):
    """Gumbel(0, 1) draws via -ln(-ln u)."""
    return rng.gumbel(shape)


def gumbel_softmax(logits, tau, g):
    """Relaxed one-hot sample softmax((logits + g) / tau) along the last axis."""
    if not tau > 0:
        raise InvalidInputError("tau must be positive")
    return softmax((as_tensor(logits) + g) * (1.0 / tau), axis=-1)


def categorical_kl(q, prior):
    """KL(q || prior) along the last axis, with 0 ln 0 = 0.

    Tensor input keeps the graph so the divergence can sit inside a loss.
    """
    prior = np.asarray(prior, dtype=np.float64)
    q_data = q.data if isinstance(q, Tensor) else np.asarray(q, dtype=np.float64)
    if np.any((prior <= 0) & (q_data > 0)):
        raise InvalidInputError("prior assigns zero mass where q is positive")
    log_prior = np.log(np.where(prior > 0, prior, 1.0))
    if isinstance(q, Tensor):
        return (q * (_masked_log(q) - log_prior)).sum(axis=-1)
    mask = q_data > 0
    log_q = np.log(np.where(mask, q_data, 1.0))
    return np.where(mask, q_data * (log_q - log_prior), 0.0).sum(axis=-1)


def _masked_log(q):
    # ln q where q > 0, zero elsewhere (those entries are multiplied by q = 0)
    mask = q.data > 0
    safe = np.where(mask, q.data, 1.0)

    def backward(g):
        return (np.where(mask, g / safe, 0.0),)

    if not q.requires_grad:
        return Tensor(np.log(safe))
    return Tensor(np.log(safe), requires_grad=True, _parents=(q,), _backward=backward)


class CatEncoderDecoder:
    def __init__(self, input_dim, spec, rng, hidden_dims=(100,), activation="tanh"):
        self.input_dim = int(input_dim)
        self.spec = spec
        width = spec.n * spec.k
        self.encoder = Mlp(MlpSpec(self.input_dim, hidden_dims, width, activation), rng, "cat_enc")
        self.decoder = Mlp(MlpSpec(width, hidden_dims, self.input_dim, activation), rng, "cat_dec")

    def parameters(self):
        return {**self.encoder.params, **self.decoder.params}

    def logits(self, x):
        """Encoder logits reshaped to (B, N, K)."""
        x = as_tensor(x)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        if x.shape[1] != self.input_dim:
            raise InvalidInputError(f"expected covariates of width {self.input_dim}, got {x.shape}")
        return self.encoder(x).reshape(x.shape[0], self.spec.n, self.spec.k)

    def decode(self, y):
        return self.decoder(y.reshape(y.shape[0], self.spec.n * self.spec.k))


def vae_cat_terms(model, x, g, tau=None):
    """Per-record (KL, reconstruction) tensors for fixed Gumbel noise ``g``."""
    spec = model.spec
    tau = spec.tau if tau is None else tau
    x = as_tensor(x)
    logits = model.logits(x)
    log_q = log_softmax(logits, axis=-1)
    q = log_q.exp()
    kl = (q * (log_q + math.log(spec.k))).sum(axis=-1).sum(axis=-1)
    y = gumbel_softmax(logits, tau, np.asarray(g).reshape(logits.shape))
    x_hat = model.decode(y)
    recon = (x - x_hat).square().sum(axis=-1)
    return kl, recon


def vae_cat_loss(model, x, rng=None, g=None, tau=None):
    """Mean over the batch of summed block KL to the uniform prior plus
    squared reconstruction error.  Pass ``g`` to fix the Gumbel noise."""
    x = as_tensor(x)
    if g is None:
        if rng is None:
            raise InvalidInputError("either rng or fixed Gumbel noise g is required")
        g = gumbel_sample(rng, (x.shape[0], model.spec.n, model.spec.k))
    kl, recon = vae_cat_terms(model, x, g, tau)
    return (kl + recon).mean()


def cluster_log_posterior_cat(model, x):
    """Log of the renormalised product of per-block posteriors, (B, K)."""
    log_q = log_softmax(model.logits(x), axis=-1)
    return log_softmax(log_q.sum(axis=1), axis=-1)


def cluster_posterior_cat(model, x):
    single = np.ndim(x) == 1
    post = cluster_log_posterior_cat(model, x).exp().data
    return post[0] if single else post


__all__ = [
    "CatEncoderDecoder",
    "CatLatentSpec",
    "anneal_tau",
    "categorical_kl",
    "cluster_log_posterior_cat",
    "cluster_posterior_cat",
    "gumbel_sample",
    "gumbel_softmax",
    "vae_cat_loss",
    "vae_cat_terms",
]
