"""Percentile bootstrap confidence intervals for sensitivity bounds."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._parallel import ordered_map
from .bounds import (
    bounds_from_parts,
    fit_quantile_features,
    resolve_propensities,
    tau_from_lambda,
)
from .data import Dataset
from .errors import DataError, MSMError, NumericalError

_MASK64 = (1 << 64) - 1


def derive_replicate_seed(master_seed: int, replicate_index: int) -> int:
    """64-bit seed for one replicate.

    Hashes ``(master_seed mod 2^64, replicate_index)`` with numpy's
    ``SeedSequence`` and returns the first 64-bit word of its state, so the
    value depends only on the two integers.
    """
    ss = np.random.SeedSequence([int(master_seed) & _MASK64, int(replicate_index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 1000
    alpha: float = 0.10
    refit_quantiles: bool = False
    master_seed: int = 0
    max_redraws: int = 10

    def __post_init__(self):
        if self.B < 2:
            raise DataError(f"bootstrap needs B >= 2, got {self.B}")
        if not 0.0 < self.alpha < 1.0:
            raise DataError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.max_redraws < 0:
            raise DataError("max_redraws must be nonnegative")


@dataclass
class BootstrapInterval:
    ci_lower: float
    ci_upper: float
    replicate_lowers: np.ndarray
    replicate_uppers: np.ndarray
    skipped_replicates: int = 0
    alpha: float = 0.10

    def to_dict(self, include_replicates: bool = False) -> dict:
        out = {
            "ci_lower": self.ci_lower,
            "ci_upper": self.ci_upper,
            "alpha": self.alpha,
            "B": int(self.replicate_lowers.size),
            "skipped_replicates": self.skipped_replicates,
        }
        if include_replicates:
            out["replicate_lowers"] = self.replicate_lowers.tolist()
            out["replicate_uppers"] = self.replicate_uppers.tolist()
        return out


def order_statistic(values, q: float) -> float:
    """The ``ceil(q * B)``-th smallest of ``values`` (1-based, at least the first)."""
    v = np.sort(np.asarray(values, dtype=float))
    j = math.ceil(q * v.size - 1e-9)
    j = min(max(j, 1), v.size)
    return float(v[j - 1])


def percentile_interval(lowers, uppers, alpha: float) -> tuple[float, float]:
    return order_statistic(lowers, alpha / 2.0), order_statistic(uppers, 1.0 - alpha / 2.0)


@dataclass(frozen=True)
class _Job:
    ds: Dataset
    lam: float
    estimand: str
    method: str
    quantile_method: str
    features: Optional[dict]
    config: BootstrapConfig
    trim: bool
    folds: int
    k_neighbors: Optional[int]


def _replicate(job: _Job, b: int):
    """Bounds on one resample; returns (lower, upper, redraws)."""
    ds = job.ds
    rng = np.random.default_rng(derive_replicate_seed(job.config.master_seed, b))
    last_err: Optional[Exception] = None
    for attempt in range(job.config.max_redraws + 1):
        idx = rng.integers(0, ds.n, ds.n)
        z = ds.treatment[idx]
        if z.min() == z.max():
            last_err = DataError("resample has a single treatment level")
            continue
        rs = ds.subset(idx)
        try:
            e, _ = resolve_propensities(rs, trim=job.trim)
            feats = None
            if job.method == "quantile_balance":
                if job.config.refit_quantiles:
                    feats = fit_quantile_features(
                        rs, job.lam, job.estimand, job.quantile_method, job.folds, job.k_neighbors, seed=b
                    )
                else:
                    feats = {k: v[idx] for k, v in job.features.items()}
            lo, hi, _ = bounds_from_parts(rs, e, job.lam, job.estimand, job.method, feats)
        except MSMError as err:
            last_err = err
            continue
        return lo, hi, attempt
    raise NumericalError(
        f"bootstrap replicate {b}: {job.config.max_redraws} redraws exhausted ({last_err})"
    )


def _run_block(job: _Job, block: range):
    return [_replicate(job, b) for b in block]


def percentile_bootstrap_ci(ds: Dataset, lam: float, estimand: str, method: str,
                            config: BootstrapConfig, quantile_method: str = "linear", *,
                            trim: bool = False, folds: int = 5, k_neighbors: Optional[int] = None,
                            features: Optional[dict] = None, threads: Optional[int] = None,
                            seed: int = 0) -> BootstrapInterval:
    """Percentile bootstrap CI ``[Q_{alpha/2}(lowers), Q_{1-alpha/2}(uppers)]``.

    Each replicate resamples rows with its own derived seed and refits the
    propensity model (known propensities are carried along instead).
    Quantile features come from the full data unless
    ``config.refit_quantiles``. Output is identical for any ``threads``.
    """
    tau_from_lambda(lam)
    if method == "quantile_balance" and features is None and not config.refit_quantiles:
        features = fit_quantile_features(ds, lam, estimand, quantile_method, folds, k_neighbors, seed)
    job = _Job(ds, float(lam), estimand, method, quantile_method, features, config, trim, folds, k_neighbors)
    nblocks = min(config.B, 64)
    edges = np.linspace(0, config.B, nblocks + 1).astype(int)
    blocks = [range(edges[i], edges[i + 1]) for i in range(nblocks) if edges[i + 1] > edges[i]]
    results = ordered_map(functools.partial(_run_block, job), blocks, threads)
    flat = [r for block in results for r in block]
    lowers = np.array([r[0] for r in flat])
    uppers = np.array([r[1] for r in flat])
    skipped = int(sum(r[2] for r in flat))
    ci_lo, ci_hi = percentile_interval(lowers, uppers, config.alpha)
    return BootstrapInterval(ci_lo, ci_hi, lowers, uppers, skipped, config.alpha)
