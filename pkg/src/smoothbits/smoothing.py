"""Smoothing relaxations of binary variables.

Each relaxation pairs two continuous conditionals r(zeta|z=0) and
r(zeta|z=1); mixing them with a Bernoulli mean q gives a continuous
marginal that can be sampled differentiably through its inverse CDF.
The exponential and logistic mixtures share support for both z values,
which is what makes the Boltzmann-prior bound fully automatic to
differentiate; spike-and-exp and the binary Concrete relaxation are
provided as baselines.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor, DomainError

__all__ = [
    "ExpMixture", "LogisticMixture", "SpikeExp", "BinaryConcrete",
    "SmoothingKind", "UnsupportedSmoothingError", "Q_MIN",
    "exp_mixture_cdf", "exp_mixture_inverse_cdf", "exp_mixture_log_pdf",
    "logistic_mixture_cdf", "logistic_mixture_inverse_cdf",
    "spike_exp_inverse_cdf", "binary_concrete_sample",
    "log_density_ratio", "posterior_nu", "component_inverse_cdf",
    "uniform_open",
]

# q multiplies 1/(1-q) inside the inverse CDF; saturate to keep it finite
Q_MIN = 1e-7


class UnsupportedSmoothingError(ValueError):
    """Operation undefined for this relaxation family."""


@dataclass(frozen=True)
class ExpMixture:
    """Two opposed truncated exponentials on [0,1] with sharpness beta."""
    beta: float

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")


@dataclass(frozen=True)
class LogisticMixture:
    """Two logistics centered at mu0 < mu1 with common scale s."""
    mu0: float
    mu1: float
    s: float

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError("scale s must be positive")
        if not self.mu1 > self.mu0:
            raise ValueError("mu1 must exceed mu0")


@dataclass(frozen=True)
class SpikeExp:
    """Point mass at zero paired with a rising exponential on [0,1]."""
    beta: float

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")


@dataclass(frozen=True)
class BinaryConcrete:
    """Logistic-noise relaxation of a Bernoulli logit with temperature lam."""
    lam: float

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")


SmoothingKind = Union[ExpMixture, LogisticMixture, SpikeExp, BinaryConcrete]


def uniform_open(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform draws on the open interval (0,1); exact endpoints rejected."""
    u = np.asarray(rng.uniform(size=shape))
    flat = u.reshape(-1)
    while True:
        bad = (flat <= 0.0) | (flat >= 1.0)
        if not np.any(bad):
            return flat.reshape(u.shape)
        flat[bad] = rng.uniform(size=int(np.count_nonzero(bad)))


def _check_unit_interval(name: str, value: np.ndarray) -> None:
    if np.any((value < 0.0) | (value > 1.0)):
        raise DomainError(f"{name} outside [0, 1]")


def _check_open_unit(name: str, value: np.ndarray) -> None:
    if np.any((value <= 0.0) | (value >= 1.0)):
        raise DomainError(f"{name} outside the open interval (0, 1)")


# ---------------------------------------------------------------------------
# exponential mixture

def exp_mixture_cdf(q, zeta, beta: float) -> np.ndarray:
    """CDF of the two-exponential mixture at zeta, for Bernoulli mean q."""
    q = np.asarray(q, dtype=np.float64)
    zeta = np.asarray(zeta, dtype=np.float64)
    _check_unit_interval("q", q)
    _check_unit_interval("zeta", zeta)
    denom = -np.expm1(-beta)  # 1 - e^{-beta}
    low = -np.expm1(-beta * zeta)               # 1 - e^{-beta zeta}
    high = np.exp(beta * (zeta - 1.0)) - np.exp(-beta)
    return ((1.0 - q) * low + q * high) / denom


def _stable_positive_root(b: Tensor, c, a=None) -> Tensor:
    """Positive root of a m^2 + b m + c = 0 with a > 0 >= c.

    Chooses between the two algebraically equivalent expressions for the
    root so that no catastrophic cancellation occurs for either sign of b;
    required for sharpness values where b^2 dwarfs |4ac|.
    """
    a_t = as_tensor(1.0 if a is None else a)
    c_t = as_tensor(c)
    disc = ad.maximum_const(ad.sub(ad.mul(b, b), ad.mul(ad.mul(a_t, c_t), 4.0)), 0.0)
    r = ad.sqrt(disc)
    pos = b.data > 0.0
    q_aux = ad.where(pos,
                     ad.mul(ad.add(b, r), -0.5),
                     ad.mul(ad.sub(r, b), 0.5))
    return ad.where(pos, ad.div(c_t, q_aux), ad.div(q_aux, a_t))


def exp_mixture_inverse_cdf(q, rho, beta: float) -> Tensor:
    """Differentiable inverse CDF of the exponential mixture.

    Solves the quadratic in m = e^{-beta zeta} with
    b = [rho + e^{-beta}(q - rho)]/(1 - q) - 1 and c = -q e^{-beta}/(1 - q),
    takes the positive root and maps back through zeta = -log(m)/beta.
    Gradients flow to q through b and c.
    """
    q = as_tensor(q)
    rho = np.asarray(rho, dtype=np.float64)
    _check_open_unit("rho", rho)
    q = ad.clamp(q, Q_MIN, 1.0 - Q_MIN)
    d = float(np.exp(-beta))
    one_minus_q = ad.sub(1.0, q)
    b = ad.sub(ad.div(ad.add(rho, ad.mul(ad.sub(q, rho), d)), one_minus_q), 1.0)
    c = ad.div(ad.mul(q, -d), one_minus_q)
    m = _stable_positive_root(b, c)
    zeta = ad.div(ad.log(m), -beta)
    return ad.clamp(zeta, 0.0, 1.0)


def exp_mixture_log_pdf(q, zeta, beta: float) -> Tensor:
    """Log density of the mixture marginal, assembled in log space."""
    q = as_tensor(q)
    zeta_t = as_tensor(zeta)
    _check_unit_interval("zeta", zeta_t.data)
    q = ad.clamp(q, Q_MIN, 1.0 - Q_MIN)
    log_norm = float(np.log(-np.expm1(-beta)) - np.log(beta))  # log Z_beta
    low = ad.sub(ad.log(ad.sub(1.0, q)), ad.mul(zeta_t, beta))
    high = ad.add(ad.log(q), ad.mul(ad.sub(zeta_t, 1.0), beta))
    return ad.sub(ad.logaddexp(low, high), log_norm)


# ---------------------------------------------------------------------------
# logistic mixture

def logistic_mixture_cdf(q, zeta, kind: LogisticMixture) -> np.ndarray:
    from scipy.special import expit
    q = np.asarray(q, dtype=np.float64)
    zeta = np.asarray(zeta, dtype=np.float64)
    return ((1.0 - q) * expit((zeta - kind.mu0) / kind.s)
            + q * expit((zeta - kind.mu1) / kind.s))


def logistic_mixture_inverse_cdf(q, rho, mu0: float, mu1: float, s: float) -> Tensor:
    """Differentiable inverse CDF of the two-logistic mixture.

    The quadratic in m = e^{-zeta/s} has coefficients growing like
    e^{mu/s}; substituting m' = sqrt(d0 d1) m cancels the common scale so
    only exp((mu1-mu0)/(2s)) appears, which stays finite for s >= 0.01
    with |mu| <= 1.
    """
    if not (s > 0 and mu1 > mu0):
        raise ValueError("require s > 0 and mu1 > mu0")
    q = as_tensor(q)
    rho = np.asarray(rho, dtype=np.float64)
    _check_open_unit("rho", rho)
    q = ad.clamp(q, Q_MIN, 1.0 - Q_MIN)
    half_gap = (mu1 - mu0) / (2.0 * s)
    e_pos = float(np.exp(half_gap))   # sqrt(d1/d0)
    e_neg = float(np.exp(-half_gap))  # sqrt(d0/d1)
    # scaled quadratic: rho m'^2 + b' m' + (rho - 1) = 0
    b = ad.sub(rho * (e_pos + e_neg),
               ad.add(ad.mul(q, e_neg), ad.mul(ad.sub(1.0, q), e_pos)))
    m = _stable_positive_root(b, rho - 1.0, a=rho)
    return ad.sub((mu0 + mu1) / 2.0, ad.mul(ad.log(m), s))


# ---------------------------------------------------------------------------
# baselines

def spike_exp_inverse_cdf(q, rho, beta: float) -> Tensor:
    """Inverse CDF of the spike-plus-rising-exponential relaxation.

    Returns 0 inside the spike mass (rho <= 1-q); otherwise inverts the
    exponential component's CDF.
    """
    q = as_tensor(q)
    rho = np.asarray(rho, dtype=np.float64)
    _check_open_unit("rho", rho)
    qs = ad.clamp(q, Q_MIN, 1.0 - Q_MIN)
    scale = float(np.expm1(beta))  # e^beta - 1
    excess = ad.div(ad.sub(rho, ad.sub(1.0, qs)), qs)
    body = ad.div(ad.log1p(ad.mul(ad.maximum_const(excess, 0.0), scale)), beta)
    return ad.where(rho <= 1.0 - np.asarray(qs.data), 0.0, body)


def binary_concrete_sample(g, rho, lam: float) -> Tensor:
    """Relaxed Bernoulli draw: sigmoid((g + logit(rho)) / lam)."""
    g = as_tensor(g)
    rho = np.asarray(rho, dtype=np.float64)
    _check_open_unit("rho", rho)
    noise = np.log(rho) - np.log1p(-rho)
    return ad.sigmoid(ad.div(ad.add(g, noise), lam))


# ---------------------------------------------------------------------------
# posterior over z given the relaxed sample

def log_density_ratio(zeta, kind: SmoothingKind) -> Tensor:
    """log r(zeta|z=1) - log r(zeta|z=0) for overlapping relaxations."""
    zeta = as_tensor(zeta)
    if isinstance(kind, ExpMixture):
        return ad.mul(ad.sub(ad.mul(zeta, 2.0), 1.0), kind.beta)
    if isinstance(kind, LogisticMixture):
        t0 = ad.div(ad.sub(kind.mu0, zeta), kind.s)
        t1 = ad.div(ad.sub(kind.mu1, zeta), kind.s)
        gap = (kind.mu1 - kind.mu0) / kind.s
        return ad.add(ad.mul(ad.sub(ad.softplus(t0), ad.softplus(t1)), 2.0), gap)
    raise UnsupportedSmoothingError(
        f"log density ratio undefined for {type(kind).__name__}: "
        "the two conditionals must share support")


def posterior_nu(g, zeta, kind: SmoothingKind) -> Tensor:
    """Probability that z = 1 after observing the relaxed sample zeta."""
    g = as_tensor(g)
    return ad.sigmoid(ad.add(g, log_density_ratio(zeta, kind)))


# ---------------------------------------------------------------------------
# sampling a single conditional r(zeta | z) — the generative direction

def component_inverse_cdf(z: np.ndarray, rho: np.ndarray,
                          kind: SmoothingKind) -> np.ndarray:
    """Draw zeta ~ r(zeta|z) by inverting the chosen component's CDF."""
    z = np.asarray(z, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    _check_open_unit("rho", rho)
    if isinstance(kind, ExpMixture):
        b = kind.beta
        low = -np.log1p(rho * np.expm1(-b)) / b          # z = 0 branch
        high = 1.0 + np.log(rho + (1.0 - rho) * np.exp(-b)) / b
        return np.where(z > 0.5, high, low)
    if isinstance(kind, LogisticMixture):
        mu = np.where(z > 0.5, kind.mu1, kind.mu0)
        return mu + kind.s * (np.log(rho) - np.log1p(-rho))
    if isinstance(kind, SpikeExp):
        b = kind.beta
        high = np.log1p(rho * np.expm1(b)) / b
        return np.where(z > 0.5, high, 0.0)
    if isinstance(kind, BinaryConcrete):
        # zero-temperature limit has no per-component density; pass z through
        return z.copy()
    raise UnsupportedSmoothingError(f"unknown kind {type(kind).__name__}")
