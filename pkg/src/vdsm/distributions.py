"""Weibull and Log-Normal primitive distributions.

Each primitive is parameterised by an unconstrained pair ``(eta_raw,
beta_raw)``.  For the Weibull, shape ``eta = softplus(eta_raw)`` and scale
``beta = softplus(beta_raw)``.  For the Log-Normal, ``eta = eta_raw`` is the
location of ``ln t`` and ``beta = softplus(beta_raw)`` its scale.

All functions accept :class:`~vdsm.numerics.Tensor` or array inputs and
broadcast, so a ``(B, 1)`` column of times against ``(K,)`` parameters
yields a ``(B, K)`` matrix of per-component terms.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .numerics import LOG_2PI, Tensor, as_tensor, log_ndtr, softplus_inverse


class PrimitiveFamily(str, enum.Enum):
    WEIBULL = "weibull"
    LOGNORMAL = "lognormal"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("-", "").replace("_", ""))
        except ValueError:
            raise InvalidInputError(f"unknown primitive family {value!r}") from None


@dataclass(frozen=True)
class PrimitiveParams:
    eta_raw: float
    beta_raw: float

    @classmethod
    def from_natural(cls, family, eta, beta):
        """Build raw parameters from natural (eta, beta)."""
        family = PrimitiveFamily.parse(family)
        if beta <= 0 or (family is PrimitiveFamily.WEIBULL and eta <= 0):
            raise InvalidInputError("natural parameters out of range")
        eta_raw = eta if family is PrimitiveFamily.LOGNORMAL else float(softplus_inverse(eta))
        return cls(float(eta_raw), float(softplus_inverse(beta)))

    def natural(self, family):
        eta, beta = natural_params(family, self.eta_raw, self.beta_raw)
        return float(eta.data), float(beta.data)


def natural_params(family, eta_raw, beta_raw):
    family = PrimitiveFamily.parse(family)
    eta_raw, beta_raw = as_tensor(eta_raw), as_tensor(beta_raw)
    beta = beta_raw.softplus()
    eta = eta_raw.softplus() if family is PrimitiveFamily.WEIBULL else eta_raw
    return eta, beta


def _check_times(t):
    t = as_tensor(t)
    if np.any(~(t.data > 0)):
        raise InvalidInputError("times must be strictly positive")
    return t


def _unpack(p):
    if isinstance(p, PrimitiveParams):
        return p.eta_raw, p.beta_raw
    return p


def log_pdf(family, p, t):
    """ln f(t) for one primitive (or a broadcast batch of them)."""
    family = PrimitiveFamily.parse(family)
    t = _check_times(t)
    eta, beta = natural_params(family, *_unpack(p))
    log_t = np.log(t.data)
    if family is PrimitiveFamily.WEIBULL:
        z = log_t - beta.log()
        return eta.log() - beta.log() + (eta - 1.0) * z - (eta * z).exp()
    z = (log_t - eta) / beta
    return -0.5 * z.square() - beta.log() - log_t - 0.5 * LOG_2PI


def log_survival(family, p, t):
    """ln S(t) = ln P(T > t)."""
    family = PrimitiveFamily.parse(family)
    t = _check_times(t)
    eta, beta = natural_params(family, *_unpack(p))
    log_t = np.log(t.data)
    if family is PrimitiveFamily.WEIBULL:
        return -(eta * (log_t - beta.log())).exp()
    return log_ndtr(-(log_t - eta) / beta)


def median(family, eta, beta):
    """Median of the primitive in natural parameters."""
    family = PrimitiveFamily.parse(family)
    if family is PrimitiveFamily.WEIBULL:
        return beta * math.log(2.0) ** (1.0 / eta)
    return math.exp(eta)


def sample(family, eta, beta, rng, size):
    """Inverse-CDF draws in natural parameters."""
    family = PrimitiveFamily.parse(family)
    if family is PrimitiveFamily.WEIBULL:
        return beta * rng.exponential(size) ** (1.0 / eta)
    return np.exp(eta + beta * rng.normal(size))


__all__ = [
    "PrimitiveFamily",
    "PrimitiveParams",
    "Tensor",
    "log_pdf",
    "log_survival",
    "median",
    "natural_params",
    "sample",
]
