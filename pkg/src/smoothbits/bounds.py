"""Variational objectives for binary-latent models.

Closed-form Bernoulli KL for the joint bound, Monte Carlo mixture KL for
the marginal bound, the analytic Boltzmann-prior KL whose only
non-automatic piece is log Z, importance-weighted evaluation in the
binary limit, and per-group KL balancing.

All bound functions return per-datum vectors on the tape; take the mean
for a training scalar.  Every expectation over a relaxed sample is the
single-draw reparameterized estimate at the sample the caller passed in.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from . import autodiff as ad
from . import models as mdl
from .autodiff import Tensor, as_tensor
from .smoothing import (
    ExpMixture, SmoothingKind, UnsupportedSmoothingError,
    exp_mixture_log_pdf, posterior_nu, uniform_open,
)

__all__ = [
    "ElboBreakdown", "KlBalancer", "bernoulli_log_likelihood",
    "bernoulli_entropy", "bernoulli_kl", "joint_elbo", "marginal_elbo",
    "rbm_kl", "iw_log_likelihood", "kl_balance",
]


@dataclass
class ElboBreakdown:
    """Per-datum bound pieces; total = reconstruction - sum(kl_terms)."""
    reconstruction: Tensor
    kl_terms: list[Tensor]
    total: Tensor
    log_z: float | None = None

    def mean_total(self) -> Tensor:
        return ad.tmean(self.total)


def bernoulli_log_likelihood(x, logits) -> Tensor:
    """Sum over units of x*y - softplus(y); the factorial Bernoulli log-lik."""
    x = as_tensor(x)
    logits = as_tensor(logits)
    return ad.tsum(ad.sub(ad.mul(x, logits), ad.softplus(logits)), axis=1)


def bernoulli_entropy(logits) -> Tensor:
    """Entropy of factorial Bernoulli from logits: sum softplus(g) - mu*g."""
    g = as_tensor(logits)
    per_unit = ad.sub(ad.softplus(g), ad.mul(ad.sigmoid(g), g))
    return ad.tsum(per_unit, axis=1)


def bernoulli_kl(q_logits, p_logits) -> Tensor:
    """KL between factorial Bernoullis, from logits, softplus-stable.

    Per unit: softplus(gp) - softplus(gq) + mu_q (gq - gp).
    """
    gq = as_tensor(q_logits)
    gp = as_tensor(p_logits)
    if gq.shape[-1] != gp.shape[-1]:
        raise ad.ShapeError(f"factor widths differ: {gq.shape} vs {gp.shape}")
    per_unit = ad.add(ad.sub(ad.softplus(gp), ad.softplus(gq)),
                      ad.mul(ad.sigmoid(gq), ad.sub(gq, gp)))
    return ad.tsum(per_unit, axis=1)


def joint_elbo(reconstruction: Tensor,
               groups: list[tuple[Tensor, Tensor]]) -> ElboBreakdown:
    """Bound on the (z, zeta) joint model: closed-form Bernoulli KL per group.

    ``groups`` pairs each group's posterior logits with its prior logits;
    conditioning on earlier relaxed samples is already baked into both.
    """
    kls = [bernoulli_kl(gq, gp) for gq, gp in groups]
    total = reconstruction
    for kl in kls:
        total = ad.sub(total, kl)
    return ElboBreakdown(reconstruction, kls, total)


def marginal_elbo(reconstruction: Tensor,
                  groups: list[tuple[Tensor, Tensor, Tensor]],
                  kind: SmoothingKind) -> ElboBreakdown:
    """Bound on the z-marginalized model; KL terms are single-sample
    log q(zeta*) - log p(zeta*) at the shared reparameterized draw.

    ``groups`` entries are (posterior logits, prior logits, zeta sample).
    """
    if not isinstance(kind, ExpMixture):
        raise UnsupportedSmoothingError(
            "marginal bound needs the mixture log-density; implemented for "
            "the exponential mixture")
    kls = []
    for gq, gp, zeta in groups:
        log_q = exp_mixture_log_pdf(ad.sigmoid(gq), zeta, kind.beta)
        log_p = exp_mixture_log_pdf(ad.sigmoid(gp), zeta, kind.beta)
        kls.append(ad.tsum(ad.sub(log_q, log_p), axis=1))
    total = reconstruction
    for kl in kls:
        total = ad.sub(total, kl)
    return ElboBreakdown(reconstruction, kls, total)


def rbm_kl(g1: Tensor, zeta1: Tensor, g2: Tensor,
           a1: Tensor, a2: Tensor, w: Tensor,
           kind: SmoothingKind, log_z: float) -> Tensor:
    """Analytic KL against an unnormalized bipartite Boltzmann prior.

    Per datum: log Z - H(q1) - H(q2) - a1.mu1 - a2.mu2 - nu1 W mu2, with
    nu1 the exact posterior on z1 after observing zeta1.  Everything is on
    the tape except log Z itself; pair with the persistent-chain surrogate
    to give log Z a gradient path.
    """
    mu1 = ad.sigmoid(g1)
    mu2 = ad.sigmoid(g2)
    nu1 = posterior_nu(g1, zeta1, kind)
    ent = ad.add(bernoulli_entropy(g1), bernoulli_entropy(g2))
    lin1 = ad.tsum(ad.mul(mu1, a1), axis=1)
    lin2 = ad.tsum(ad.mul(mu2, a2), axis=1)
    quad = ad.tsum(ad.mul(ad.matmul(nu1, w), mu2), axis=1)
    cross = ad.add(ad.add(lin1, lin2), quad)
    return ad.sub(float(log_z), ad.add(ent, cross))


# ---------------------------------------------------------------------------
# importance-weighted evaluation (binary limit)

def iw_log_likelihood(model: "mdl.Model", x: np.ndarray, k: int,
                      rng: np.random.Generator, log_z: float | None = None,
                      chunk: int = 200_000) -> np.ndarray:
    """Per-datum IW log-likelihood estimate with k discrete posterior draws.

    Evaluation runs at beta = infinity: z ~ q(z|x) by Bernoulli sampling
    (never by rounding a relaxed draw) and zeta is identified with z.
    Weights use the full posterior chain and, for a Boltzmann prior, the
    supplied log Z estimate.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    spec = model.spec
    if spec.prior == "rbm" and log_z is None:
        raise ValueError("Boltzmann prior needs a log Z estimate")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n_data = x.shape[0]
    out = np.empty(n_data)
    rows_per_chunk = max(1, chunk // max(k, 1))
    params = mdl.wrap_params(None, model.params)
    for lo in range(0, n_data, rows_per_chunk):
        hi = min(n_data, lo + rows_per_chunk)
        xb = np.repeat(x[lo:hi], k, axis=0)
        log_w = _binary_log_weight(spec, params, xb, rng, log_z)
        out[lo:hi] = (logsumexp(log_w.reshape(hi - lo, k), axis=1)
                      - np.log(k))
    return out


def _binary_log_weight(spec, params, xb, rng, log_z):
    """log p(z) + log p(x|z) - log q(z|x) for one discrete draw per row."""
    zs, log_q = [], 0.0
    for i in range(len(spec.groups)):
        g = mdl.group_logits(spec, params, i, xb, [Tensor(z) for z in zs]).data
        mu = expit(g)
        z = (rng.uniform(size=g.shape) < mu).astype(np.float64)
        log_q = log_q + np.sum(z * g - np.logaddexp(0.0, g), axis=1)
        zs.append(z)

    if spec.prior == "rbm":
        from .rbm import RbmParams, energy
        rp = RbmParams(params["rbm/a1"].data, params["rbm/a2"].data,
                       params["rbm/w"].data)
        log_p = -energy(rp, zs[0], zs[1]) - log_z
    else:
        log_p = 0.0
        for i in range(len(spec.groups)):
            gp = mdl.prior_group_logits(spec, params, i,
                                        [Tensor(z) for z in zs]).data
            gp = np.broadcast_to(gp, zs[i].shape)
            log_p = log_p + np.sum(zs[i] * gp - np.logaddexp(0.0, gp), axis=1)

    y = mdl.decode(spec, params, [Tensor(z) for z in zs]).data
    log_lik = np.sum(xb * y - np.logaddexp(0.0, y), axis=1)
    return log_p + log_lik - log_q


# ---------------------------------------------------------------------------
# KL balancing

@dataclass
class KlBalancer:
    """Per-group KL coefficients that equalize usage during annealing."""
    epsilon: float = 0.1
    gamma: float = 0.0
    alpha: np.ndarray = field(default_factory=lambda: np.array([]))


def kl_balance(balancer: KlBalancer, kl_means: list[Tensor]) -> Tensor:
    """Weighted KL: gamma * sum_i alpha_i KL_i with alpha held constant.

    alpha_i = N (mean KL_i + eps) / sum_j (mean KL_j + eps); once gamma has
    reached 1 the coefficients freeze to ones so the true bound is
    optimized.  Updates balancer.alpha in place.
    """
    n = len(kl_means)
    if balancer.gamma >= 1.0:
        alpha = np.ones(n)
    else:
        raw = np.array([float(np.asarray(kl.data)) for kl in kl_means])
        raw = raw + balancer.epsilon
        alpha = n * raw / raw.sum()
    balancer.alpha = alpha
    total = ad.mul(kl_means[0], float(alpha[0]))
    for i in range(1, n):
        total = ad.add(total, ad.mul(kl_means[i], float(alpha[i])))
    return ad.mul(total, float(balancer.gamma))
