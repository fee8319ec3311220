"""Empirical risk estimators (Maximal Loss, Expected Shortfall) and
executable coherence-axiom checks.

Losses are measured per observation as ``l_t = -sum_i w_i x_{i,t}``.
Expected Shortfall at quantile parameter ``beta`` is the minimum over
``eps`` of

    eps + (1 / ((1-beta) T)) * sum_t max(0, l_t - eps),

attained at the empirical beta-quantile of the loss series.  With
``beta = 1 - 1/T`` the tail holds a single observation and ES equals the
Maximal Loss max_t l_t.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .core import ReturnSample, VarianceConvention, sample_returns, substream


class DegenerateTail(ValueError):
    """Raised when (1-beta)*T < 1, i.e. the tail holds less than one
    observation."""


@dataclass(frozen=True)
class ESConfig:
    """Expected Shortfall quantile parameter.

    ``beta`` is the fraction of observations excluded from the tail; the
    confidence threshold usually quoted (e.g. 0.95, 0.99) is the same
    number.  The Maximal Loss limit is beta = 1 - 1/T.
    """

    beta: float

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")

    def tail_count(self, n_obs: int) -> float:
        """(1-beta) * T, the (possibly fractional) number of tail points."""
        k = (1.0 - self.beta) * n_obs
        if k < 1.0 - 1e-12:
            raise DegenerateTail(
                f"(1-beta)*T = {k:.6g} < 1: tail holds no observation"
            )
        return k


def loss_series(weights: np.ndarray, sample: ReturnSample) -> np.ndarray:
    """Per-observation losses l_t = -w . x_t, length T."""
    w = np.asarray(weights, dtype=float)
    if w.shape != (sample.n_assets,):
        raise ValueError(
            f"weights shape {w.shape} != ({sample.n_assets},)"
        )
    return -(w @ sample.returns)


def maximal_loss(weights: np.ndarray, sample: ReturnSample) -> float:
    """Worst single-observation loss max_t (-w . x_t)."""
    return float(np.max(loss_series(weights, sample)))


def es_from_losses(losses: np.ndarray, beta: float) -> tuple[float, float]:
    """Expected Shortfall of a loss series; returns (es, eps_star).

    Tie rule: when (1-beta)*T is an exact integer k, ES is the mean of the
    k largest losses and the minimizing eps forms the interval between the
    (k+1)-th and k-th largest loss; the smallest optimal eps is reported
    (the smallest loss when k = T).  Otherwise the minimizer is unique at
    the ceil((1-beta)T)-th largest loss.
    """
    losses = np.asarray(losses, dtype=float)
    t = losses.size
    k = (1.0 - beta) * t
    if k < 1.0 - 1e-12:
        raise DegenerateTail(f"(1-beta)*T = {k:.6g} < 1")
    order = np.sort(losses)[::-1]
    k_int = round(k)
    if abs(k - k_int) <= 1e-9 * max(1.0, t):
        es = float(np.mean(order[:k_int]))
        eps = float(order[k_int]) if k_int < t else float(order[t - 1])
        return es, eps
    m = math.ceil(k)
    eps = float(order[m - 1])
    es = eps + float(np.sum(np.maximum(order - eps, 0.0))) / k
    return es, eps


def expected_shortfall(
    weights: np.ndarray, sample: ReturnSample, cfg: ESConfig
) -> float:
    cfg.tail_count(sample.n_obs)
    es, _ = es_from_losses(loss_series(weights, sample), cfg.beta)
    return es


def empirical_variance(weights: np.ndarray, sample: ReturnSample) -> float:
    """Population variance of the loss series.  Deliberately *not* a
    coherent risk measure (it scales quadratically); used as a control in
    coherence checks."""
    return float(np.var(loss_series(weights, sample)))


@dataclass(frozen=True)
class RiskEstimator:
    """A named estimator handle: maps (weights, sample) -> risk."""

    name: str
    fn: Callable[[np.ndarray, ReturnSample], float]

    def __call__(self, weights: np.ndarray, sample: ReturnSample) -> float:
        return self.fn(weights, sample)


def ml_estimator() -> RiskEstimator:
    return RiskEstimator("maximal_loss", maximal_loss)


def es_estimator(cfg: ESConfig) -> RiskEstimator:
    return RiskEstimator(
        f"expected_shortfall(beta={cfg.beta:g})",
        lambda w, s: expected_shortfall(w, s, cfg),
    )


def variance_estimator() -> RiskEstimator:
    return RiskEstimator("empirical_variance", empirical_variance)


@dataclass(frozen=True)
class CoherenceViolation:
    axiom: str
    seed: int
    magnitude: float

    def to_dict(self) -> dict:
        return {"axiom": self.axiom, "seed": self.seed, "magnitude": self.magnitude}


@dataclass
class CoherenceReport:
    estimator: str
    n_instances: int
    tolerance: float
    violations: list[CoherenceViolation] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for v in self.violations:
            out[v.axiom] = out.get(v.axiom, 0) + 1
        return out

    def to_json(self, path: str | Path | None = None) -> str:
        doc = {
            "estimator": self.estimator,
            "n_instances": self.n_instances,
            "tolerance": self.tolerance,
            "violations": [v.to_dict() for v in self.violations],
        }
        text = json.dumps(doc, indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def _shifted(sample: ReturnSample, c: float) -> ReturnSample:
    return ReturnSample(
        n_assets=sample.n_assets,
        n_obs=sample.n_obs,
        returns=sample.returns + c,
        seed=sample.seed,
        variance_convention=sample.variance_convention,
    )


def coherence_check(
    risk_fn: RiskEstimator,
    samples: list[ReturnSample],
    tolerance: float = 1e-9,
) -> CoherenceReport:
    """Test the coherence axioms on randomized weight pairs per sample.

    Checked: normalization (zero weights), positive homogeneity under a
    random a > 0, translation covariance under a uniform return shift
    (rho drops by c * sum(w)), subadditivity of w1 + w2, and monotonicity
    under an elementwise-dominating return matrix (with long-only weights,
    larger returns cannot increase risk).  Violations beyond ``tolerance``
    (relative to the instance scale) are collected, never raised.
    """
    report = CoherenceReport(
        estimator=risk_fn.name, n_instances=len(samples), tolerance=tolerance
    )
    for sample in samples:
        rng = np.random.Generator(np.random.PCG64(substream(sample.seed, 0xC0)))
        n = sample.n_assets
        w1 = rng.standard_normal(n)
        w2 = rng.standard_normal(n)
        a = float(rng.uniform(0.2, 5.0))
        c = float(rng.uniform(-1.0, 1.0))
        scale = 1.0 + max(abs(risk_fn(w1, sample)), abs(risk_fn(w2, sample)))

        def record(axiom: str, gap: float):
            if gap > tolerance * scale:
                report.violations.append(
                    CoherenceViolation(axiom=axiom, seed=sample.seed, magnitude=gap)
                )

        record("normalization", abs(risk_fn(np.zeros(n), sample)))
        record(
            "positive_homogeneity",
            abs(risk_fn(a * w1, sample) - a * risk_fn(w1, sample)),
        )
        record(
            "translation",
            abs(
                risk_fn(w1, _shifted(sample, c))
                - (risk_fn(w1, sample) - c * float(np.sum(w1)))
            ),
        )
        record(
            "subadditivity",
            risk_fn(w1 + w2, sample)
            - (risk_fn(w1, sample) + risk_fn(w2, sample)),
        )
        w_pos = np.abs(w1) + 1e-3
        bumped = ReturnSample(
            n_assets=n,
            n_obs=sample.n_obs,
            returns=sample.returns + rng.uniform(0.0, 1.0, sample.returns.shape),
            seed=sample.seed,
            variance_convention=sample.variance_convention,
        )
        record("monotonicity", risk_fn(w_pos, bumped) - risk_fn(w_pos, sample))
    return report


def coherence_samples(
    n_instances: int,
    n_assets: int = 5,
    n_obs: int = 40,
    seed: int = 0,
    convention: VarianceConvention = VarianceConvention.UNIT,
) -> list[ReturnSample]:
    """Independent random instances with per-sample derived seeds."""
    return [
        sample_returns(n_assets, n_obs, substream(seed, k), convention)
        for k in range(n_instances)
    ]
