"""Dominance analysis: the maximal level mu* at which a zero-sum direction
u (sum u_i = 0, ||u||_1 = 1) satisfies u . x_t >= mu for every observation.

If mu* exceeds the linear penalty amplitude, pushing the portfolio along u
lowers any positively homogeneous, translation-covariant risk estimate
faster than the L1 penalty can pay for it, so the regularized optimization
is unbounded; mu* <= eta certifies the opposite.  mu* is computed by the LP

    max mu   s.t.  u.x_t >= mu  (all t),  sum u = 0,  sum(u+ + u-) = 1,

whose optimum never goes below zero (the split variables may overlap, which
floors the reported level at 0; any strictly positive optimum is attained
by a genuine unit-L1-norm direction).
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from . import risk as risk_mod
from .core import (
    RegKind,
    RegularizerSpec,
    ReturnSample,
    VarianceConvention,
    penalty,
    sample_returns,
    substream,
)
from .simplex import solve_lp


@dataclass(frozen=True)
class DominanceCertificate:
    mu_star: float
    direction: np.ndarray  # sum = 0, ||.||_1 = 1 whenever mu_star > 0
    margins: np.ndarray    # u . x_t over observations

    def to_dict(self) -> dict:
        return {
            "mu_star": self.mu_star,
            "direction": [float(v) for v in self.direction],
            "margins": [float(v) for v in self.margins],
        }


def max_dominance(sample: ReturnSample) -> DominanceCertificate:
    """Solve the dominance LP with the dense simplex solver.

    mu_star may be 0 when no direction dominates at a positive level; the
    certificate invariants (unit L1 norm, min margin == mu_star) are
    guaranteed for mu_star > 0.
    """
    x = sample.returns
    n, t = sample.n_assets, sample.n_obs
    # columns: u+ (n), u- (n), mu+, mu-, slack (t)
    ncol = 2 * n + 2 + t
    a = np.zeros((t + 2, ncol))
    b = np.zeros(t + 2)
    # margin rows written as mu - u.x_t + s_t = 0 so the slack block is a
    # positive identity (usable as a crash basis)
    a[:t, :n] = -x.T
    a[:t, n : 2 * n] = x.T
    a[:t, 2 * n] = 1.0
    a[:t, 2 * n + 1] = -1.0
    a[:t, 2 * n + 2 :] = np.eye(t)
    a[t, :n] = 1.0
    a[t, n : 2 * n] = -1.0
    a[t + 1, : 2 * n] = 1.0
    b[t + 1] = 1.0
    c = np.zeros(ncol)
    c[2 * n] = -1.0
    c[2 * n + 1] = 1.0

    res = solve_lp(c, a, b)
    if res.status == "max_iterations":
        # rare degenerate stall: retry with the (slower) lexicographic
        # ratio test from the first pivot, which guarantees termination
        res = solve_lp(c, a, b, lex=True)
    if res.status != "optimal":
        raise RuntimeError(f"dominance LP did not solve: {res.status}")
    u = res.x[:n] - res.x[n : 2 * n]
    mu_star = max(0.0, -res.objective)  # the split LP floors the level at 0
    norm = float(np.abs(u).sum())
    if norm > 1e-9:
        u = u / norm
    else:
        # degenerate boundary (mu* = 0 attained by cancelling masses);
        # report a deterministic unit direction for diagnostics
        means = x.mean(axis=1)
        i, j = int(np.argmax(means)), int(np.argmin(means))
        u = np.zeros(n)
        if i != j:
            u[i], u[j] = 0.5, -0.5
    margins = u @ x
    return DominanceCertificate(mu_star=float(mu_star), direction=u, margins=margins)


def verify_unbounded_ray(
    sample: ReturnSample,
    reg: RegularizerSpec,
    w0: np.ndarray,
    cert: DominanceCertificate,
    a_grid: np.ndarray,
    es_cfg: risk_mod.ESConfig | None = None,
) -> bool:
    """Check that the regularized objective strictly decreases along
    w0 + a*u at (at least) the certified linear rate.

    The certified slope is mu* minus the linear penalty amplitude; for a
    faster-than-linear penalty (p > 1, or eta2 > 0) the bound eventually
    fails and the function returns False, which is the expected outcome.
    """
    reg = reg.canonicalize()
    eta_lin = reg.eta if reg.kind is RegKind.PURE_LP else reg.eta1
    if cert.mu_star <= eta_lin:
        raise ValueError("certificate does not dominate the linear penalty")
    if es_cfg is None:
        risk_fn = lambda w: risk_mod.maximal_loss(w, sample)
    else:
        risk_fn = lambda w: risk_mod.expected_shortfall(w, sample, es_cfg)
    obj0 = risk_fn(w0) + penalty(w0, reg)
    slope = (cert.mu_star - eta_lin) * (1.0 - 1e-6)
    for a in np.asarray(a_grid, dtype=float):
        if a <= 0:
            raise ValueError("a_grid must be positive")
        w = w0 + a * cert.direction
        if risk_fn(w) + penalty(w, reg) > obj0 - a * slope:
            return False
    return True


def closed_form_instability_probability(eta: float) -> float:
    """P(mu* > eta) for two unit-variance Gaussian assets observed twice:
    (1/2) erfc(eta)^2."""
    return float(0.5 * erfc(eta) ** 2)


@dataclass(frozen=True)
class FrequencyEstimate:
    eta: float
    p_hat: float
    ci_low: float
    ci_high: float
    n_samples: int
    n_hits: int


def _mu_star_task(args: tuple[int, int, int, int, str]) -> float:
    n_assets, n_obs, seed, index, convention = args
    sample = sample_returns(
        n_assets, n_obs, substream(seed, index), VarianceConvention(convention)
    )
    return max_dominance(sample).mu_star


def worker_count() -> int:
    env = os.environ.get("RPO_THREADS")
    if env:
        return max(1, int(env))
    return 1


def mu_star_batch(
    n_assets: int,
    n_obs: int,
    n_samples: int,
    seed: int,
    convention: VarianceConvention = VarianceConvention.UNIT,
) -> np.ndarray:
    """mu* of ``n_samples`` independent instances, sample k seeded by
    substream(seed, k).  Parallel across samples when RPO_THREADS > 1;
    results are ordered by sample index either way."""
    tasks = [
        (n_assets, n_obs, seed, k, VarianceConvention(convention).value)
        for k in range(n_samples)
    ]
    workers = worker_count()
    if workers == 1 or n_samples < 32:
        return np.array([_mu_star_task(t) for t in tasks])
    with ProcessPoolExecutor(max_workers=workers) as pool:
        out = list(pool.map(_mu_star_task, tasks, chunksize=max(1, n_samples // (8 * workers))))
    return np.array(out)


def _frequency_from_mu(mu: np.ndarray, eta: float) -> FrequencyEstimate:
    hits = int(np.sum(mu > eta))
    m = mu.size
    p = hits / m
    half = 1.96 * np.sqrt(max(p * (1.0 - p), 1e-300) / m)
    return FrequencyEstimate(
        eta=float(eta),
        p_hat=p,
        ci_low=max(0.0, p - half),
        ci_high=min(1.0, p + half),
        n_samples=m,
        n_hits=hits,
    )


def instability_frequency(
    n_assets: int,
    n_obs: int,
    eta: float,
    n_samples: int,
    seed: int,
    convention: VarianceConvention = VarianceConvention.UNIT,
) -> FrequencyEstimate:
    """Empirical P(mu* > eta) with a 95% normal-approximation CI."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    mu = mu_star_batch(n_assets, n_obs, n_samples, seed, convention)
    return _frequency_from_mu(mu, eta)


def dominance_sweep(
    eta_grid: np.ndarray,
    n_assets: int,
    n_obs: int,
    n_samples: int,
    seed: int,
    convention: VarianceConvention = VarianceConvention.UNIT,
) -> list[FrequencyEstimate]:
    """Instability frequency on a grid of eta values, reusing one batch of
    mu* draws so estimates across the grid are seed-paired."""
    mu = mu_star_batch(n_assets, n_obs, n_samples, seed, convention)
    return [_frequency_from_mu(mu, eta) for eta in np.asarray(eta_grid, dtype=float)]
