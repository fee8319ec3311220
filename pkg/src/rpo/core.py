"""Domain types shared by every solver: Gaussian return ensembles, budget
conventions, and the market-impact / regularizer correspondence.

Two self-consistent scaling conventions are supported and must not be mixed:

* ``UNIT`` variance returns with a ``SUM_TO_ONE`` budget (the small toy
  setting, weights on the unit simplex slice), and
* ``ONE_OVER_N`` variance returns with a ``SUM_TO_N`` budget (the large-N
  ensemble, entries ~ N(0, 1/N) and sum(w) = W*N so weights stay O(1)).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

_SEED_MASK = (1 << 64) - 1


class ConventionMismatch(ValueError):
    """Raised when a unit-variance sample is paired with a sum-to-N budget
    (or vice versa)."""


class VarianceConvention(str, Enum):
    UNIT = "unit"
    ONE_OVER_N = "one_over_n"


class Normalization(str, Enum):
    SUM_TO_N = "sum_to_n"      # sum(w) = W * N
    SUM_TO_ONE = "sum_to_one"  # sum(w) = 1


class RegKind(str, Enum):
    PURE_LP = "pure_lp"
    ELASTIC_NET = "elastic_net"


@dataclass(frozen=True)
class ReturnSample:
    """An N x T matrix of asset returns plus generation metadata.

    ``returns[i, t]`` is the return of asset ``i`` at observation ``t``.
    """

    n_assets: int
    n_obs: int
    returns: np.ndarray
    seed: int
    variance_convention: VarianceConvention

    def __post_init__(self):
        if self.n_assets < 1 or self.n_obs < 1:
            raise ValueError("n_assets and n_obs must be >= 1")
        arr = np.asarray(self.returns, dtype=float)
        if arr.shape != (self.n_assets, self.n_obs):
            raise ValueError(
                f"returns shape {arr.shape} != ({self.n_assets}, {self.n_obs})"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("returns contain non-finite entries")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "returns", arr)
        object.__setattr__(self, "seed", int(self.seed) & _SEED_MASK)
        object.__setattr__(
            self, "variance_convention", VarianceConvention(self.variance_convention)
        )


@dataclass(frozen=True)
class RegularizerSpec:
    """Penalty specification: pure L_p (amplitude ``eta``) or an
    L1+L2 combination (amplitudes ``eta1``, ``eta2``)."""

    kind: RegKind
    p: float | None = None
    eta: float | None = None
    eta1: float | None = None
    eta2: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", RegKind(self.kind))
        if self.kind is RegKind.PURE_LP:
            if self.p is None or self.eta is None:
                raise ValueError("pure Lp regularizer needs p and eta")
            if self.p <= 0:
                raise ValueError("p must be > 0")
            if self.eta < 0:
                raise ValueError("eta must be >= 0")
        else:
            if self.eta1 is None or self.eta2 is None:
                raise ValueError("elastic net regularizer needs eta1 and eta2")
            if self.eta1 < 0 or self.eta2 < 0:
                raise ValueError("eta1 and eta2 must be >= 0")

    @staticmethod
    def pure_lp(p: float, eta: float) -> "RegularizerSpec":
        return RegularizerSpec(kind=RegKind.PURE_LP, p=float(p), eta=float(eta))

    @staticmethod
    def elastic_net(eta1: float, eta2: float) -> "RegularizerSpec":
        return RegularizerSpec(
            kind=RegKind.ELASTIC_NET, eta1=float(eta1), eta2=float(eta2)
        )

    def canonicalize(self) -> "RegularizerSpec":
        """Collapse the overlapping representations: an elastic net with
        eta2 = 0 is the same penalty as pure L1 with eta = eta1, and the
        canonical form of both is ``pure_lp(1, eta1)``."""
        if self.kind is RegKind.ELASTIC_NET and self.eta2 == 0.0:
            return RegularizerSpec.pure_lp(1.0, self.eta1)
        return self


@dataclass(frozen=True)
class BudgetSpec:
    """Linear budget equality: sum(w) = W*N (``SUM_TO_N``) or sum(w) = 1."""

    wealth_per_asset: float = 1.0
    normalization: Normalization = Normalization.SUM_TO_N

    def __post_init__(self):
        object.__setattr__(self, "normalization", Normalization(self.normalization))
        if self.wealth_per_asset <= 0:
            raise ValueError("wealth_per_asset must be > 0")

    def total(self, n_assets: int) -> float:
        if self.normalization is Normalization.SUM_TO_N:
            return self.wealth_per_asset * n_assets
        return 1.0

    def check_convention(self, convention: VarianceConvention) -> None:
        """The large-N budget goes with 1/N-variance returns; the unit
        simplex budget goes with unit-variance returns."""
        ok = (
            self.normalization is Normalization.SUM_TO_N
            and convention is VarianceConvention.ONE_OVER_N
        ) or (
            self.normalization is Normalization.SUM_TO_ONE
            and convention is VarianceConvention.UNIT
        )
        if not ok:
            raise ConventionMismatch(
                f"budget {self.normalization.value} cannot be paired with "
                f"{convention.value} returns"
            )


def substream(seed: int, index: int) -> int:
    """Derive the 64-bit seed of sample ``index`` from a base seed.

    The rule is a fixed hash of the pair (seed, index) (numpy's SeedSequence
    entropy mixing), so parallel sweeps are order-independent and
    reproducible across platforms.
    """
    ss = np.random.SeedSequence((int(seed) & _SEED_MASK, int(index)))
    return int(ss.generate_state(1, np.uint64)[0])


def sample_returns(
    n_assets: int,
    n_obs: int,
    seed: int,
    convention: VarianceConvention = VarianceConvention.UNIT,
) -> ReturnSample:
    """Draw i.i.d. normal returns, N(0,1) or N(0,1/N) per ``convention``.

    The generator is PCG64 keyed by ``seed`` alone, so the same seed gives
    a bit-identical matrix on every platform.
    """
    if n_assets < 1 or n_obs < 1:
        raise ValueError("n_assets and n_obs must be >= 1")
    convention = VarianceConvention(convention)
    rng = np.random.Generator(np.random.PCG64(int(seed) & _SEED_MASK))
    x = rng.standard_normal((n_assets, n_obs))
    if convention is VarianceConvention.ONE_OVER_N:
        x /= np.sqrt(n_assets)
    return ReturnSample(
        n_assets=n_assets,
        n_obs=n_obs,
        returns=x,
        seed=seed,
        variance_convention=convention,
    )


def impact_to_regularizer(impact_exponent: float, amplitude: float) -> RegularizerSpec:
    """Map a liquidation impact psi_i(w) = |w_i|^gamma to the penalty it
    induces on the portfolio value, eta * sum |w_i|^(gamma+1).

    gamma = 0 (bid-ask spread) -> L1, gamma = 1/2 (square-root meta-order
    impact) -> L_{3/2}, gamma = 1 (linear impact) -> L2.
    """
    if impact_exponent < 0:
        raise ValueError("impact exponent must be >= 0")
    return RegularizerSpec.pure_lp(p=impact_exponent + 1.0, eta=amplitude)


def penalty(weights: np.ndarray, reg: RegularizerSpec) -> float:
    """Evaluate the regularization penalty of a weight vector."""
    w = np.asarray(weights, dtype=float)
    if not np.all(np.isfinite(w)):
        raise ValueError("weights contain non-finite entries")
    a = np.abs(w)
    if reg.kind is RegKind.PURE_LP:
        return float(reg.eta * np.sum(a**reg.p))
    return float(reg.eta1 * np.sum(a) + reg.eta2 * np.sum(a**2))


# ---------------------------------------------------------------------------
# CSV + sidecar serialization


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_sample(sample: ReturnSample, path: str | Path) -> None:
    """Write a sample as CSV (header asset_0..asset_{N-1}, one row per
    observation, shortest round-trip decimal formatting) plus a JSON
    sidecar holding the seed and variance convention."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"asset_{i}" for i in range(sample.n_assets)])
        for t in range(sample.n_obs):
            writer.writerow([repr(float(v)) for v in sample.returns[:, t]])
    meta = {
        "seed": sample.seed,
        "variance_convention": sample.variance_convention.value,
        "n_assets": sample.n_assets,
        "n_obs": sample.n_obs,
    }
    _sidecar_path(path).write_text(json.dumps(meta, indent=2) + "\n")


def load_sample(
    path: str | Path, convention: VarianceConvention | None = None
) -> ReturnSample:
    """Read a sample written by :func:`save_sample`.

    If the JSON sidecar is missing, ``convention`` must be supplied and the
    seed is recorded as 0 (the matrix, not the seed, is authoritative for a
    file round-trip).
    """
    path = Path(path)
    rows: list[list[float]] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}:1: empty file") from None
        n_assets = len(header)
        expected = [f"asset_{i}" for i in range(n_assets)]
        if header != expected:
            raise ValueError(f"{path}:1: malformed header {header[:4]}...")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != n_assets:
                raise ValueError(
                    f"{path}:{lineno}: expected {n_assets} columns, got {len(row)}"
                )
            parsed = []
            for j, cell in enumerate(row):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise ValueError(
                        f"{path}:{lineno}: column {j} ({cell!r}) is not a number"
                    ) from None
            rows.append(parsed)
    if not rows:
        raise ValueError(f"{path}: no observations")
    sidecar = _sidecar_path(path)
    seed = 0
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        seed = int(meta.get("seed", 0))
        convention = VarianceConvention(meta["variance_convention"])
    elif convention is None:
        raise ValueError(
            f"{path}: no sidecar {sidecar.name}; pass the variance convention"
        )
    matrix = np.array(rows, dtype=float).T
    return ReturnSample(
        n_assets=matrix.shape[0],
        n_obs=matrix.shape[1],
        returns=matrix,
        seed=seed,
        variance_convention=VarianceConvention(convention),
    )
