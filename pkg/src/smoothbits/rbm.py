"""Restricted Boltzmann machine prior.

Energy and exact small-instance oracles, block Gibbs chains, the
persistent-chain surrogate whose tape gradient estimates d(log Z)/d(theta),
and a parallel-tempering estimator of log Z anchored at the exactly known
infinite-temperature partition function.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "RbmParams", "GibbsChains", "PtLadder", "PtResult", "EnumerationError",
    "LadderError", "energy", "exact_log_z", "exact_moments", "init_chains",
    "gibbs_sweep", "pcd_surrogate_loss", "geometric_ladder", "adapt_ladder",
    "pt_log_z", "write_pt_diagnostics",
]

ENUM_LIMIT = 24  # exhaustive enumeration guard on n1 + n2


class EnumerationError(ValueError):
    """Instance too large for exact enumeration; use pt_log_z instead."""


class LadderError(ValueError):
    """Invalid parallel-tempering ladder."""


@dataclass
class RbmParams:
    """Biases and couplings of a bipartite Boltzmann machine."""
    a1: np.ndarray
    a2: np.ndarray
    w: np.ndarray
    log_z: float | None = None  # cached estimate, refreshed by callers

    def __post_init__(self):
        self.a1 = np.asarray(self.a1, dtype=np.float64)
        self.a2 = np.asarray(self.a2, dtype=np.float64)
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.shape != (self.a1.size, self.a2.size):
            raise ValueError(
                f"coupling shape {self.w.shape} does not match biases "
                f"({self.a1.size}, {self.a2.size})")
        if not (np.all(np.isfinite(self.a1)) and np.all(np.isfinite(self.a2))
                and np.all(np.isfinite(self.w))):
            raise ValueError("parameters must be finite")

    @property
    def n1(self) -> int:
        return self.a1.size

    @property
    def n2(self) -> int:
        return self.a2.size


def energy(params: RbmParams, z1: np.ndarray, z2: np.ndarray) -> np.ndarray:
    """E = -a1.z1 - a2.z2 - z1 W z2, one value per row of a batch."""
    z1 = np.atleast_2d(np.asarray(z1, dtype=np.float64))
    z2 = np.atleast_2d(np.asarray(z2, dtype=np.float64))
    if z1.shape[1] != params.n1 or z2.shape[1] != params.n2:
        raise ValueError(
            f"state widths ({z1.shape[1]}, {z2.shape[1]}) do not match "
            f"({params.n1}, {params.n2})")
    return -(z1 @ params.a1) - (z2 @ params.a2) - np.sum((z1 @ params.w) * z2, axis=1)


def _all_states(n: int) -> np.ndarray:
    """All 2^n binary rows, lexicographic, bit 0 fastest."""
    idx = np.arange(2 ** n, dtype=np.uint32)
    return ((idx[:, None] >> np.arange(n)) & 1).astype(np.float64)


def _check_enum(params: RbmParams) -> None:
    if params.n1 + params.n2 > ENUM_LIMIT:
        raise EnumerationError(
            f"n1+n2 = {params.n1 + params.n2} exceeds the enumeration limit "
            f"{ENUM_LIMIT}; use pt_log_z for an estimate")


def exact_log_z(params: RbmParams) -> float:
    """log partition function by exhaustive enumeration (log-space).

    One side is summed analytically, so only 2^min(n1,n2) states are
    enumerated; the guard still applies to n1+n2.
    """
    _check_enum(params)
    if params.n2 <= params.n1:
        states = _all_states(params.n2)
        fields = params.a1[None, :] + states @ params.w.T
        free = states @ params.a2
    else:
        states = _all_states(params.n1)
        fields = params.a2[None, :] + states @ params.w
        free = states @ params.a1
    log_terms = free + np.sum(np.logaddexp(0.0, fields), axis=1)
    return float(logsumexp(log_terms))


def exact_moments(params: RbmParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact (E[z1], E[z2], E[z1 z2^T]) under the normalized distribution."""
    _check_enum(params)
    swap = params.n1 < params.n2
    if swap:
        params_s = RbmParams(params.a2, params.a1, params.w.T)
    else:
        params_s = params
    # enumerate side 2 of params_s (the smaller side), side 1 analytic
    states2 = _all_states(params_s.n2)
    fields = params_s.a1[None, :] + states2 @ params_s.w.T
    log_w = states2 @ params_s.a2 + np.sum(np.logaddexp(0.0, fields), axis=1)
    weights = np.exp(log_w - logsumexp(log_w))
    cond1 = expit(fields)  # E[z1 | z2] rows
    m2 = weights @ states2
    m1 = weights @ cond1
    pair = (cond1 * weights[:, None]).T @ states2
    if swap:
        return m2, m1, pair.T
    return m1, m2, pair


# ---------------------------------------------------------------------------
# block Gibbs chains

@dataclass
class GibbsChains:
    """Persistent binary states for L parallel chains plus their generator."""
    z1: np.ndarray
    z2: np.ndarray
    rng: np.random.Generator

    @property
    def count(self) -> int:
        return self.z1.shape[0]


def init_chains(params: RbmParams, count: int, seed: int) -> GibbsChains:
    rng = np.random.default_rng(np.random.Philox(seed))
    z1 = (rng.uniform(size=(count, params.n1)) < 0.5).astype(np.float64)
    z2 = (rng.uniform(size=(count, params.n2)) < 0.5).astype(np.float64)
    return GibbsChains(z1, z2, rng)


def gibbs_sweep(params: RbmParams, chains: GibbsChains, sweeps: int = 1) -> GibbsChains:
    """Block updates: resample z1 | z2 then z2 | z1, all units independent."""
    for _ in range(sweeps):
        p1 = expit(params.a1[None, :] + chains.z2 @ params.w.T)
        chains.z1 = (chains.rng.uniform(size=chains.z1.shape) < p1).astype(np.float64)
        p2 = expit(params.a2[None, :] + chains.z1 @ params.w)
        chains.z2 = (chains.rng.uniform(size=chains.z2.shape) < p2).astype(np.float64)
    return chains


def pcd_surrogate_loss(a1_t: Tensor, a2_t: Tensor, w_t: Tensor,
                       chains: GibbsChains, sweeps: int = 40) -> Tensor:
    """Advance persistent chains and return the negative mean energy on tape.

    The chain samples are constants to the tape, so backward through this
    scalar yields the Monte Carlo estimate of d(log Z)/d(theta) =
    -E_p[dE/d(theta)].  Add it to a minimized objective wherever +log Z
    appears.
    """
    if sweeps < 1:
        raise ValueError("sweeps must be >= 1")
    params = RbmParams(a1_t.data, a2_t.data, w_t.data)
    gibbs_sweep(params, chains, sweeps)
    z1 = chains.z1.copy()  # detached snapshots
    z2 = chains.z2.copy()
    lin1 = ad.tsum(ad.mul(a1_t, z1), axis=None)
    lin2 = ad.tsum(ad.mul(a2_t, z2), axis=None)
    quad = ad.tsum(ad.mul(ad.matmul(Tensor(z1), w_t), z2), axis=None)
    return ad.div(ad.add(ad.add(lin1, lin2), quad), float(chains.count))


# ---------------------------------------------------------------------------
# parallel tempering

@dataclass
class PtLadder:
    """Strictly increasing inverse temperatures from 0 to 1."""
    betas: np.ndarray

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.size < 2:
            raise LadderError("ladder needs at least two temperatures")
        if self.betas[0] != 0.0 or self.betas[-1] != 1.0:
            raise LadderError("ladder must start at 0 and end at 1")
        if np.any(np.diff(self.betas) <= 0.0):
            raise LadderError("ladder must be strictly increasing")

    def __len__(self) -> int:
        return self.betas.size


def geometric_ladder(n: int = 20, beta_min: float = 0.02) -> PtLadder:
    """Zero plus n-1 geometrically spaced inverse temperatures up to 1."""
    if n < 2:
        raise LadderError("need at least two temperatures")
    if n == 2:
        return PtLadder(np.array([0.0, 1.0]))
    body = beta_min ** (np.arange(n - 2, -1, -1, dtype=np.float64) / (n - 2))
    return PtLadder(np.concatenate([[0.0], body]))


@dataclass
class PtResult:
    log_z: float
    stderr: float
    ladder: PtLadder
    swap_rates: np.ndarray       # one per adjacent pair
    mean_energy: np.ndarray      # one per rung

    def __iter__(self):
        yield self.log_z
        yield self.stderr


def _sweep_rung(args):
    beta, a1, a2, w, z1, z2, u1, u2 = args
    z1[:] = (u1 < expit(beta * (a1 + z2 @ w.T))).astype(np.float64)
    z2[:] = (u2 < expit(beta * (a2 + z1 @ w))).astype(np.float64)


def pt_log_z(params: RbmParams, ladder: PtLadder | None = None,
             sweeps: int = 20_000, seed: int = 0, burn_frac: float = 0.1,
             bootstrap: int = 100, workers: int = 1) -> PtResult:
    """Estimate log Z by tempered chains with stepping-stone accumulation.

    Each rung k samples p_k(z) proportional to exp(-beta_k E(z)); the ratio
    log(Z_{k+1}/Z_k) is the log mean of exp(-(beta_{k+1}-beta_k) E) over
    rung k's samples, anchored at log Z_0 = (n1+n2) log 2 for beta = 0.
    Adjacent-pair swap moves run every sweep with alternating parity.
    Results are deterministic for fixed (seed, ladder, sweeps) regardless
    of the worker count: all randomness is drawn up front each sweep.
    """
    ladder = ladder or geometric_ladder()
    betas = ladder.betas
    k = len(betas)
    rng = np.random.default_rng(np.random.Philox(seed))
    z1 = (rng.uniform(size=(k, params.n1)) < 0.5).astype(np.float64)
    z2 = (rng.uniform(size=(k, params.n2)) < 0.5).astype(np.float64)
    energies = np.empty((sweeps, k))
    swap_accept = np.zeros(k - 1)
    swap_tries = np.zeros(k - 1)

    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for t in range(sweeps):
            u1 = rng.uniform(size=(k, params.n1))
            u2 = rng.uniform(size=(k, params.n2))
            jobs = [(betas[i], params.a1, params.a2, params.w,
                     z1[i], z2[i], u1[i], u2[i]) for i in range(k)]
            if pool is None:
                for job in jobs:
                    _sweep_rung(job)
            else:
                list(pool.map(_sweep_rung, jobs))
            e = energy(params, z1, z2)
            energies[t] = e
            # swap phase: even pairs on even sweeps, odd pairs otherwise
            start = t % 2
            pair_u = rng.uniform(size=k - 1)
            for i in range(start, k - 1, 2):
                swap_tries[i] += 1
                log_acc = (betas[i + 1] - betas[i]) * (e[i + 1] - e[i])
                if np.log(pair_u[i]) < min(0.0, log_acc):
                    z1[[i, i + 1]] = z1[[i + 1, i]]
                    z2[[i, i + 1]] = z2[[i + 1, i]]
                    e[[i, i + 1]] = e[[i + 1, i]]
                    energies[t] = e
                    swap_accept[i] += 1
    finally:
        if pool is not None:
            pool.shutdown()

    burn = int(burn_frac * sweeps)
    kept = energies[burn:]
    deltas = np.diff(betas)
    base = (params.n1 + params.n2) * np.log(2.0)

    def accumulate(sample_rows: np.ndarray) -> float:
        total = base
        for i in range(k - 1):
            total += logsumexp(-deltas[i] * sample_rows[:, i]) - np.log(sample_rows.shape[0])
        return total

    estimate = accumulate(kept)

    # circular block bootstrap over the sweep axis
    t_kept = kept.shape[0]
    block = max(1, int(np.sqrt(t_kept)))
    n_blocks = int(np.ceil(t_kept / block))
    boot = np.empty(bootstrap)
    for b in range(bootstrap):
        starts = rng.integers(0, t_kept, size=n_blocks)
        idx = (starts[:, None] + np.arange(block)[None, :]).reshape(-1) % t_kept
        boot[b] = accumulate(kept[idx[:t_kept]])
    stderr = float(np.std(boot, ddof=1))

    rates = np.divide(swap_accept, swap_tries, out=np.zeros(k - 1),
                      where=swap_tries > 0)
    return PtResult(float(estimate), stderr, ladder, rates,
                    kept.mean(axis=0))


def adapt_ladder(params: RbmParams, ladder: PtLadder | None = None,
                 target_rate: float = 0.2, probe_sweeps: int = 2_000,
                 seed: int = 0, max_rounds: int = 6,
                 max_size: int = 60) -> PtLadder:
    """Insert midpoints until all adjacent swap rates exceed the target."""
    ladder = ladder or geometric_ladder()
    for _ in range(max_rounds):
        result = pt_log_z(params, ladder, sweeps=probe_sweeps, seed=seed,
                          bootstrap=2)
        low = result.swap_rates < target_rate
        if not np.any(low) or len(ladder) >= max_size:
            return ladder
        betas = list(ladder.betas)
        inserted = []
        for i, flag in enumerate(low):
            if flag:
                inserted.append(0.5 * (betas[i] + betas[i + 1]))
        ladder = PtLadder(np.sort(np.concatenate([betas, inserted])))
    return ladder


def write_pt_diagnostics(path, result: PtResult) -> None:
    """CSV of inverse temperature, adjacent swap rate, mean energy per rung."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["inverse_temperature", "swap_rate", "mean_energy"])
        for i, beta in enumerate(result.ladder.betas):
            rate = result.swap_rates[i] if i < len(result.swap_rates) else ""
            writer.writerow([f"{beta:.10g}", rate, f"{result.mean_energy[i]:.10g}"])
