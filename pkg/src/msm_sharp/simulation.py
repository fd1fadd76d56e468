"""Synthetic data-generating processes and replication studies."""

from __future__ import annotations

import csv
import functools
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, ndtri

from ._parallel import ordered_map
from .bootstrap import BootstrapConfig, derive_replicate_seed, percentile_bootstrap_ci
from .bounds import ESTIMANDS, sensitivity_interval, tau_from_lambda
from .data import Dataset, validate_dataset
from .errors import DataError, MSMError, NumericalError
from .oracle import (
    dgp1_spec,
    dgp2_spec,
    example7_spec,
    gaussian_apo_bounds,
    gaussian_ate_identified_set,
    gaussian_att_identified_set,
)

DGPS = ("dgp1", "dgp2", "example7")

# study method name -> (bounds method, quantile method)
STUDY_METHODS = {
    "zsb": ("zsb", "linear"),
    "qb_linear": ("quantile_balance", "linear"),
    "qb_knn": ("quantile_balance", "knn_crossfit"),
    "cov": ("covariate_balance", "linear"),
}

MAX_FAILURE_RATE = 0.05


def generate_dgp(dgp: str, n: int, seed: int, sigma_x: float = 1.0) -> Dataset:
    """Draw ``n`` rows from one of the simulation designs.

    ``dgp1``/``dgp2``: ``X ~ U[-1, 1]^5``, ``Z ~ Bern(expit(sum X / sqrt 5))``,
    ``Y ~ N(mu(X), 1)`` with ``mu = sum X`` or ``1.5 sign(X1) + sign(X2)``.
    ``example7``: ``X ~ N(0, sigma_x^2)``, ``Z ~ Bern(1/2)``, ``Y ~ N(X, 1)``,
    with the known propensity 1/2 attached.

    Uses ``numpy.random.default_rng(seed)`` (PCG64); the uniform stream is
    consumed as covariates, then treatment, then noise (via inverse CDF).
    """
    if n < 1:
        raise DataError("n must be positive")
    rng = np.random.default_rng(seed)
    if dgp in ("dgp1", "dgp2"):
        X = 2.0 * rng.random((n, 5)) - 1.0
        e = expit(X.sum(axis=1) / math.sqrt(5.0))
        z = (rng.random(n) < e).astype(float)
        if dgp == "dgp1":
            mu = X.sum(axis=1)
        else:
            s = np.where(X[:, :2] >= 0.0, 1.0, -1.0)
            mu = 1.5 * s[:, 0] + s[:, 1]
        y = mu + ndtri(rng.random(n))
        return validate_dataset(X, z, y, [f"x{j + 1}" for j in range(5)])
    if dgp == "example7":
        X = sigma_x * ndtri(rng.random((n, 1)))
        z = (rng.random(n) < 0.5).astype(float)
        y = X[:, 0] + ndtri(rng.random(n))
        return validate_dataset(X, z, y, ["x1"], known_propensity=np.full(n, 0.5))
    raise DataError(f"unknown dgp {dgp!r}; expected one of {DGPS}")


def dgp_spec(dgp: str, sigma_x: float = 1.0):
    if dgp == "dgp1":
        return dgp1_spec()
    if dgp == "dgp2":
        return dgp2_spec()
    if dgp == "example7":
        return example7_spec(sigma_x)
    raise DataError(f"unknown dgp {dgp!r}; expected one of {DGPS}")


def reference_interval(dgp: str, lam: float, estimand: str, sigma_x: float = 1.0,
                       mc_draws: int = 1_000_000) -> tuple[float, float]:
    """Identified set for the estimand under the DGP's Gaussian outcome model."""
    spec = dgp_spec(dgp, sigma_x)
    if estimand == "ATE":
        return gaussian_ate_identified_set(spec, lam)
    if estimand == "ATT":
        return gaussian_att_identified_set(spec, lam, mc_draws=mc_draws)
    b = gaussian_apo_bounds(spec, lam, mc_draws=mc_draws)
    if estimand == "psi_T":
        return b["psi_T_minus"], b["psi_T_plus"]
    if estimand == "psi_C":
        return b["psi_C_minus"], b["psi_C_plus"]
    raise DataError(f"unknown estimand {estimand!r}")


@dataclass(frozen=True)
class StudyConfig:
    dgp: str = "dgp1"
    n: int = 500
    replications: int = 100
    lam: float = 2.0
    estimand: str = "ATE"
    methods: tuple = ("qb_linear", "cov", "zsb")
    bootstrap: Optional[BootstrapConfig] = None
    master_seed: int = 0
    sigma_x: float = 1.0

    def __post_init__(self):
        if self.dgp not in DGPS:
            raise DataError(f"unknown dgp {self.dgp!r}; expected one of {DGPS}")
        if self.replications < 1:
            raise DataError("replications must be at least 1")
        if self.n < 20:
            raise DataError("n must be at least 20")
        if self.estimand not in ESTIMANDS:
            raise DataError(f"unknown estimand {self.estimand!r}")
        tau_from_lambda(self.lam)
        for m in self.methods:
            if m not in STUDY_METHODS:
                raise DataError(f"unknown study method {m!r}; expected one of {tuple(STUDY_METHODS)}")
        if not self.methods:
            raise DataError("at least one method is required")


@dataclass
class MethodSummary:
    method: str
    replications: int
    failures: int
    mean_lower: float
    sd_lower: float
    mean_upper: float
    sd_upper: float
    coverage: Optional[float]
    runtime_seconds: float


@dataclass
class StudySummary:
    config: dict
    reference_interval: Optional[tuple]
    methods: dict = field(default_factory=dict)
    records: list = field(default_factory=list)

    def to_dict(self, include_timing: bool = False) -> dict:
        """JSON-ready summary; wall-clock timings are left out unless asked for."""
        methods = {}
        for k, v in self.methods.items():
            d = asdict(v)
            if not include_timing:
                d.pop("runtime_seconds")
            methods[k] = d
        return {
            "config": self.config,
            "reference_interval": None if self.reference_interval is None else list(self.reference_interval),
            "methods": methods,
        }


def _one_replication(config: StudyConfig, r: int) -> list:
    seed = derive_replicate_seed(config.master_seed, r)
    ds = generate_dgp(config.dgp, config.n, seed, sigma_x=config.sigma_x)
    rows = []
    for name in config.methods:
        method, qmethod = STUDY_METHODS[name]
        t0 = time.perf_counter()
        rec = {"rep": r, "method": name, "lower": None, "upper": None,
               "ci_lower": None, "ci_upper": None, "error": None}
        try:
            est = sensitivity_interval(ds, config.lam, config.estimand, method, qmethod, seed=seed)
            rec["lower"], rec["upper"] = est.lower, est.upper
            if config.bootstrap is not None:
                bcfg = BootstrapConfig(
                    B=config.bootstrap.B,
                    alpha=config.bootstrap.alpha,
                    refit_quantiles=config.bootstrap.refit_quantiles,
                    master_seed=seed,
                    max_redraws=config.bootstrap.max_redraws,
                )
                ci = percentile_bootstrap_ci(ds, config.lam, config.estimand, method, bcfg, qmethod,
                                             threads=1, seed=seed)
                rec["ci_lower"], rec["ci_upper"] = ci.ci_lower, ci.ci_upper
        except MSMError as err:
            rec["error"] = str(err)
        rec["seconds"] = time.perf_counter() - t0
        rows.append(rec)
    return rows


def _summarize(name: str, recs: list, ref, with_ci: bool) -> MethodSummary:
    ok = [r for r in recs if r["error"] is None]
    lo = np.array([r["lower"] for r in ok], dtype=float)
    hi = np.array([r["upper"] for r in ok], dtype=float)

    def sd(a):
        return float(a.std(ddof=1)) if a.size > 1 else 0.0

    coverage = None
    if with_ci and ref is not None and ok:
        covered = [r["ci_lower"] <= ref[0] and r["ci_upper"] >= ref[1] for r in ok]
        coverage = float(np.mean(covered))
    return MethodSummary(
        method=name,
        replications=len(ok),
        failures=len(recs) - len(ok),
        mean_lower=float(lo.mean()) if lo.size else float("nan"),
        sd_lower=sd(lo),
        mean_upper=float(hi.mean()) if hi.size else float("nan"),
        sd_upper=sd(hi),
        coverage=coverage,
        runtime_seconds=float(sum(r["seconds"] for r in recs)),
    )


def run_study(config: StudyConfig, threads: Optional[int] = None) -> StudySummary:
    """Run every configured method on ``config.replications`` fresh datasets.

    Replication r draws its data with seed ``derive_replicate_seed(master_seed, r)``.
    Failed replications are skipped and counted; more than 5% failures for
    any method raises :class:`NumericalError`.
    """
    per_rep = ordered_map(functools.partial(_one_replication, config), range(config.replications), threads)
    records = [rec for rows in per_rep for rec in rows]
    ref = reference_interval(config.dgp, config.lam, config.estimand, config.sigma_x)
    summary = StudySummary(config=_config_dict(config), reference_interval=tuple(float(v) for v in ref))
    for name in config.methods:
        recs = [r for r in records if r["method"] == name]
        ms = _summarize(name, recs, ref, config.bootstrap is not None)
        if ms.failures > MAX_FAILURE_RATE * config.replications:
            first = next(r["error"] for r in recs if r["error"] is not None)
            raise NumericalError(
                f"{name}: {ms.failures} of {config.replications} replications failed (first: {first})"
            )
        summary.methods[name] = ms
    summary.records = records
    return summary


def _config_dict(config: StudyConfig) -> dict:
    d = asdict(config)
    d["methods"] = list(config.methods)
    return d


def write_records_csv(summary: StudySummary, path) -> None:
    cols = ["rep", "method", "lower", "upper", "ci_lower", "ci_upper"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for rec in summary.records:
            w.writerow(["" if rec[c] is None else (repr(rec[c]) if isinstance(rec[c], float) else rec[c])
                        for c in cols])
