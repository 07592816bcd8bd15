"""Mixture-of-primitives survival model and its censored likelihood losses.

Times passed to every function here are in original units; the model
divides them by ``model.time_scale`` internally so the component
parameters live on a rescaled axis where the Weibull power stays tame.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import distributions as dist
from .distributions import PrimitiveFamily
from .errors import InvalidInputError
from .numerics import (
    Mlp,
    MlpSpec,
    Tensor,
    as_tensor,
    log_softmax,
    logsumexp,
    param,
    softplus_inverse,
)


class ElboMode(str, enum.Enum):
    JENSEN = "jensen_bound"
    EXACT = "exact_logsumexp"


@dataclass
class TrainConfig:
    discount: float = 0.5
    lr: float = 1e-4
    elbo_mode: ElboMode = ElboMode.JENSEN
    epochs: int = 100
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        self.elbo_mode = ElboMode(self.elbo_mode)
        if not 0.0 < self.discount <= 1.0:
            raise InvalidInputError(f"discount must lie in (0, 1], got {self.discount}")
        if self.lr <= 0:
            raise InvalidInputError("lr must be positive")


class MixtureModel:
    """K primitive survival distributions mixed by a gating network.

    Component parameters are global raw ``(eta_raw, beta_raw)`` vectors of
    length K.  With ``perturbation=True`` an extra MLP adds x-dependent
    offsets to both; its output layer starts at zero.  ``gating=False``
    drops the gating MLP for models whose gate comes from elsewhere (the
    VAE front-ends), in which case ``log_gates`` must be supplied.
    """

    def __init__(
        self,
        input_dim,
        k,
        family="weibull",
        rng=None,
        hidden_dims=(100,),
        activation="tanh",
        gating=True,
        perturbation=False,
        time_scale=1.0,
    ):
        if k < 1:
            raise InvalidInputError("K must be at least 1")
        self.k = int(k)
        self.input_dim = int(input_dim)
        self.family = PrimitiveFamily.parse(family)
        self.time_scale = float(time_scale)
        self.eta_raw = param(np.full(self.k, softplus_inverse(1.0)), "dsm.eta_raw")
        self.beta_raw = param(np.full(self.k, softplus_inverse(1.0)), "dsm.beta_raw")
        if self.family is PrimitiveFamily.LOGNORMAL:
            self.eta_raw.data[:] = 0.0
        self.gating = None
        self.perturb = None
        if gating or perturbation:
            if rng is None:
                raise InvalidInputError("an RngStream is required to initialise networks")
        if gating:
            self.gating = Mlp(MlpSpec(self.input_dim, hidden_dims, self.k, activation), rng, "gate")
        if perturbation:
            self.perturb = Mlp(MlpSpec(self.input_dim, hidden_dims, 2 * self.k, activation), rng, "shift")
            last = len(self.perturb.spec.layer_dims) - 2
            self.perturb.params[f"shift.W{last}"].data[...] = 0.0

    def parameters(self):
        out = {"dsm.eta_raw": self.eta_raw, "dsm.beta_raw": self.beta_raw}
        for net in (self.gating, self.perturb):
            if net is not None:
                out.update(net.params)
        return out

    def set_components(self, eta, beta):
        """Set natural component parameters (on the rescaled time axis)."""
        eta = np.broadcast_to(np.asarray(eta, dtype=np.float64), (self.k,))
        beta = np.broadcast_to(np.asarray(beta, dtype=np.float64), (self.k,))
        self.eta_raw.data[:] = eta if self.family is PrimitiveFamily.LOGNORMAL else softplus_inverse(eta)
        self.beta_raw.data[:] = softplus_inverse(beta)

    def natural_components(self):
        """Global component (eta, beta) in original time units."""
        eta, beta = dist.natural_params(self.family, self.eta_raw.data, self.beta_raw.data)
        eta, beta = eta.data.copy(), beta.data.copy()
        if self.family is PrimitiveFamily.WEIBULL:
            beta = beta * self.time_scale
        else:
            eta = eta + math.log(self.time_scale)
        return eta, beta

    def component_raw(self, x):
        """Raw parameters broadcastable against a (B, K) grid."""
        if self.perturb is None:
            return self.eta_raw, self.beta_raw
        shift = self.perturb(x)
        return self.eta_raw + shift[:, : self.k], self.beta_raw + shift[:, self.k :]

    def gate_logits(self, x):
        x = _as_batch(x, self.input_dim)
        if self.gating is None:
            raise InvalidInputError("model has no gating network; pass log_gates explicitly")
        return self.gating(x)

    def log_gates(self, x):
        return log_softmax(self.gate_logits(x), axis=-1)

    def scaled(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(~(t > 0)):
            raise InvalidInputError("times must be strictly positive")
        return t / self.time_scale

    def component_terms(self, x, t, event):
        """(B, K) matrix of ln f_k(t_i) (event) or ln S_k(t_i) (censored)."""
        x = _as_batch(x, self.input_dim)
        eta_raw, beta_raw = self.component_raw(x)
        col = self.scaled(t).reshape(-1, 1)
        fn = dist.log_pdf if event else dist.log_survival
        return fn(self.family, (eta_raw, beta_raw), col)


def _as_batch(x, dim):
    x = as_tensor(x)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != dim:
        raise InvalidInputError(f"expected covariates of width {dim}, got shape {x.shape}")
    return x


def _resolve_log_gates(model, x, log_gates):
    if log_gates is not None:
        return as_tensor(log_gates)
    return model.log_gates(x)


def gate_probs(model, x):
    """P(Z | X = x) as a K-simplex (rows for a batch)."""
    single = np.ndim(x) == 1
    probs = model.log_gates(x).exp().data
    return probs[0] if single else probs


def _mixture_nll(terms, log_gates, mode):
    mode = ElboMode(mode)
    if mode is ElboMode.JENSEN:
        return -(log_gates.exp() * terms).sum()
    return -logsumexp(log_gates + terms, axis=-1).sum()


def _subset_loss(model, x, u, delta, mode, log_gates, event):
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    if u.size == 0:
        return Tensor(0.0)
    if delta is not None:
        delta = np.asarray(delta).reshape(-1)
        want = 1 if event else 0
        if np.any(delta != want):
            kind = "uncensored" if event else "censored"
            raise InvalidInputError(f"{kind} loss received records with delta != {want}")
    x = _as_batch(x, model.input_dim)
    terms = model.component_terms(x, u, event=event)
    return _mixture_nll(terms, _resolve_log_gates(model, x, log_gates), mode)


def uncensored_loss(model, x, u, delta=None, mode=ElboMode.JENSEN, log_gates=None):
    """Negative log-likelihood of observed events (summed over the batch).

    In ``jensen_bound`` mode this is the negated lower bound
    ``-sum_i E_{Z~gate(x_i)} ln f_Z(u_i)``; in ``exact_logsumexp`` mode the
    exact mixture negative log-likelihood.
    """
    return _subset_loss(model, x, u, delta, mode, log_gates, event=True)


def censored_loss(model, x, u, delta=None, mode=ElboMode.JENSEN, log_gates=None):
    """As :func:`uncensored_loss` with ln S_k(u_i) in place of the density."""
    return _subset_loss(model, x, u, delta, mode, log_gates, event=False)


def dsm_loss(model, x, u, delta, cfg=None, log_gates=None):
    """``(L_U + discount * L_C) / batch_size`` on a mixed batch."""
    cfg = cfg or TrainConfig()
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    delta = np.asarray(delta).reshape(-1).astype(int)
    n = u.size
    if n == 0:
        return Tensor(0.0)
    x = _as_batch(x, model.input_dim)
    lg = _resolve_log_gates(model, x, log_gates)
    obs = np.flatnonzero(delta == 1)
    cens = np.flatnonzero(delta == 0)
    total = Tensor(0.0)
    if obs.size:
        total = total + uncensored_loss(model, x[obs], u[obs], mode=cfg.elbo_mode, log_gates=lg[obs])
    if cens.size:
        lc = censored_loss(model, x[cens], u[cens], mode=cfg.elbo_mode, log_gates=lg[cens])
        total = total + cfg.discount * lc
    return total * (1.0 / n)


def predict_log_survival(model, x, t, log_gates=None):
    """ln S(t | x) for each row of ``x`` and each time in ``t``.

    A single covariate vector with a scalar time returns a float; otherwise
    the result has shape (B, H) for B rows and H times.
    """
    single_x = np.ndim(x) == 1
    scalar_t = np.ndim(t) == 0
    x = _as_batch(x, model.input_dim)
    times = model.scaled(np.atleast_1d(t))
    lg = _resolve_log_gates(model, x, log_gates).data
    eta_raw, beta_raw = model.component_raw(x)
    eta_raw, beta_raw = np.asarray(as_tensor(eta_raw).data), np.asarray(as_tensor(beta_raw).data)
    if eta_raw.ndim == 2:
        eta_raw, beta_raw = eta_raw[:, None, :], beta_raw[:, None, :]
    log_s = dist.log_survival(model.family, (eta_raw, beta_raw), times.reshape(1, -1, 1)).data
    out = logsumexp(lg[:, None, :] + log_s, axis=-1).data
    out = np.minimum(out, 0.0)
    if single_x and scalar_t:
        return float(out[0, 0])
    if single_x:
        return out[0]
    if scalar_t:
        return out[:, 0]
    return out


def predict_risk(model, x, t, log_gates=None):
    """Risk of the event by horizon t: 1 - S(t | x)."""
    return -np.expm1(predict_log_survival(model, x, t, log_gates=log_gates))


__all__ = [
    "ElboMode",
    "MixtureModel",
    "TrainConfig",
    "censored_loss",
    "dsm_loss",
    "gate_probs",
    "predict_log_survival",
    "predict_risk",
    "uncensored_loss",
]
