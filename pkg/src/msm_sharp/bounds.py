"""Point-estimate sensitivity intervals under the marginal sensitivity model.

Every bound here is a weighted mean of one arm's outcomes, where unit i's
weight is ``a_i + b_i * D_i`` and the multiplier ``D_i`` ranges over
``[1/lambda, lambda]``:

* treated mean: ``a = 1, b = (1 - e)/e`` (this is ``1/e_bar``);
* control mean: ``a = 1, b = e/(1 - e)`` (this is ``1/(1 - e_bar)``);
* ATT control mean: ``a = 0, b = e/(1 - e)`` (odds weights).

ZSB bounds optimize over the whole box. Balancing bounds add the equality
constraints ``sum_i b_i g_i (D_i - 1) = 0`` for a design ``g`` with an
intercept, and are computed from one weighted quantile regression.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Dataset
from .errors import DataError, NumericalError
from .regression import (
    QuantileFit,
    crossfit_knn_quantiles,
    fit_linear_quantiles,
    fit_logistic,
    fit_weighted_qr,
)

ESTIMANDS = ("psi_T", "psi_C", "ATE", "ATT")
METHODS = ("zsb", "quantile_balance", "covariate_balance")
QUANTILE_METHODS = ("linear", "knn_crossfit")
TRIM_RANGE = (0.01, 0.99)


def tau_from_lambda(lam: float) -> float:
    """Quantile level ``lambda / (lambda + 1)`` balanced by the sharp bounds."""
    if not (lam >= 1.0) or not math.isfinite(lam):
        raise DataError(f"lambda must be a finite number >= 1, got {lam}")
    return lam / (lam + 1.0)


@dataclass(frozen=True)
class SensitivityModel:
    lam: float
    tau: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "tau", tau_from_lambda(self.lam))


@dataclass(frozen=True)
class WeightBox:
    lower: np.ndarray
    upper: np.ndarray
    arm: str


BOX_ARMS = ("treated_inverse", "control_inverse", "control_odds")


def _check_propensities(e) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    if not np.all((e > 0.0) & (e < 1.0)):
        raise DataError("propensities must lie strictly inside (0, 1)")
    return e


def _box_coefficients(e: np.ndarray, arm: str):
    """(a, b) so that the box is ``a + b * [1/lambda, lambda]``."""
    if arm == "treated_inverse":
        return np.ones_like(e), (1.0 - e) / e
    if arm == "control_inverse":
        return np.ones_like(e), e / (1.0 - e)
    if arm == "control_odds":
        return np.zeros_like(e), e / (1.0 - e)
    raise ValueError(f"unknown box arm {arm!r}; expected one of {BOX_ARMS}")


def weight_box(propensities, lam: float, arm: str) -> WeightBox:
    """Per-unit range of the inverse-propensity (or odds) weight."""
    e = _check_propensities(propensities)
    tau_from_lambda(lam)
    a, b = _box_coefficients(e, arm)
    return WeightBox(a + b / lam, a + b * lam, arm)


# ---------------------------------------------------------------------------
# point estimates


def _arm_mean(y, wts) -> float:
    return float(np.sum(wts * y) / np.sum(wts))


def ipw_point_estimate(ds: Dataset, propensities, estimand: str) -> float:
    """Stabilized IPW estimate of ``psi_T``, ``psi_C``, ``ATE`` or ``ATT``."""
    e = _check_propensities(propensities)
    z = ds.treatment == 1
    y = ds.outcome
    if not z.any() or z.all():
        raise DataError("both arms must be nonempty")
    if estimand == "psi_T":
        return _arm_mean(y[z], 1.0 / e[z])
    if estimand == "psi_C":
        return _arm_mean(y[~z], 1.0 / (1.0 - e[~z]))
    if estimand == "ATE":
        return ipw_point_estimate(ds, e, "psi_T") - ipw_point_estimate(ds, e, "psi_C")
    if estimand == "ATT":
        odds = e[~z] / (1.0 - e[~z])
        return float(y[z].mean()) - _arm_mean(y[~z], odds)
    raise ValueError(f"unknown estimand {estimand!r}; expected one of {ESTIMANDS}")


# ---------------------------------------------------------------------------
# arm-level programs


def zsb_arm_max(y, lo, hi) -> float:
    """Max of ``sum w y / sum w`` over the box ``lo <= w <= hi``.

    The optimum puts the upper weight on the largest outcomes and the lower
    weight on the rest; all ``m + 1`` threshold splits are scanned.
    """
    y = np.asarray(y, dtype=float)
    order = np.argsort(-y, kind="stable")
    ys, los, his = y[order], np.asarray(lo, float)[order], np.asarray(hi, float)[order]
    # split j: first j sorted units at hi, remaining at lo
    hi_num = np.concatenate([[0.0], np.cumsum(his * ys)])
    hi_den = np.concatenate([[0.0], np.cumsum(his)])
    lo_num = np.concatenate([np.cumsum((los * ys)[::-1])[::-1], [0.0]])
    lo_den = np.concatenate([np.cumsum(los[::-1])[::-1], [0.0]])
    ratios = (hi_num + lo_num) / (hi_den + lo_den)
    return float(np.max(ratios))


def _independent_columns(G: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Greedy subset of columns that are linearly independent on positive-weight rows.

    A dependent column's balancing constraint is implied by the others, so
    dropping it leaves the feasible set unchanged.
    """
    rows = G[weights > 0]
    keep = []
    for j in range(G.shape[1]):
        cand = keep + [j]
        if np.linalg.matrix_rank(rows[:, cand]) == len(cand):
            keep = cand
    return G[:, keep]


def balanced_arm_max(y, a, b, design, lam: float):
    """Max of ``sum (a + b D) y / sum (a + b)`` subject to balancing ``design``.

    ``D`` ranges over ``[1/lambda, lambda]`` and the constraint is
    ``sum_i b_i g_i (D_i - 1) = 0``; ``design`` must contain an intercept,
    which pins the denominator. Solved through the weighted quantile
    regression of ``y`` on ``design`` with weights ``b`` at level
    ``lambda/(lambda+1)``; the optimum uses ``D_i = lambda^sign(r_i)``.

    Returns ``(value, QuantileFit)``.
    """
    y = np.asarray(y, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    G = _independent_columns(np.asarray(design, dtype=float), b)
    tau = tau_from_lambda(lam)
    fit = fit_weighted_qr(G, y, b, tau)
    resid = fit.residuals
    v = np.where(resid >= 0.0, 1.0, -1.0)  # sign(0) := +1
    num = np.sum(resid * (a + b * lam ** v)) + np.sum(fit.fitted_values * (a + b))
    return float(num / np.sum(a + b)), fit


# ---------------------------------------------------------------------------
# estimand-level bounds


def _arm_data(ds: Dataset, e: np.ndarray, estimand: str):
    """Outcomes, box coefficients and row mask for the arm behind an estimand."""
    if estimand == "psi_T":
        mask = ds.treatment == 1
        a, b = _box_coefficients(e[mask], "treated_inverse")
    elif estimand == "psi_C":
        mask = ds.treatment == 0
        a, b = _box_coefficients(e[mask], "control_inverse")
    elif estimand == "ATT_control":
        mask = ds.treatment == 0
        a, b = _box_coefficients(e[mask], "control_odds")
    else:
        raise ValueError(f"no single-arm program for {estimand!r}")
    if not mask.any():
        raise DataError(f"arm for {estimand} is empty")
    return ds.outcome[mask], a, b, mask


def _directed(fn, y, direction: str):
    if direction == "upper":
        return fn(y)
    if direction == "lower":
        return -fn(-y)
    raise ValueError(f"direction must be 'lower' or 'upper', got {direction!r}")


def zsb_bound(ds: Dataset, propensities, lam: float, estimand: str, direction: str) -> float:
    """Largest/smallest stabilized IPW estimate over the whole weight box."""
    e = _check_propensities(propensities)
    tau_from_lambda(lam)
    if estimand not in ("psi_T", "psi_C"):
        raise ValueError("zsb_bound handles psi_T and psi_C; use sensitivity_interval for composites")
    y, a, b, _ = _arm_data(ds, e, estimand)
    lo, hi = a + b / lam, a + b * lam
    return _directed(lambda v: zsb_arm_max(v, lo, hi), y, direction)


def _quantile_design(values) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    return np.column_stack([np.ones(values.shape[0]), values])


def qb_apo_bound(ds: Dataset, propensities, quantile_fit, lam: float, estimand: str,
                 direction: str, return_fit: bool = False):
    """Quantile-balancing bound on ``psi_T`` or ``psi_C``.

    ``quantile_fit`` supplies the balancing feature for every row: a
    :class:`QuantileFit` (its ``fitted_values``) or a raw ``(n,)``/``(n, k)``
    array. An intercept is always added. For the upper bound the feature
    should be the arm's tau-quantile, for the lower bound the
    (1 - tau)-quantile.
    """
    e = _check_propensities(propensities)
    tau = tau_from_lambda(lam)
    if estimand not in ("psi_T", "psi_C"):
        raise ValueError("qb_apo_bound handles psi_T and psi_C")
    if isinstance(quantile_fit, QuantileFit):
        want_arm = 1 if estimand == "psi_T" else 0
        if quantile_fit.arm is not None and quantile_fit.arm != want_arm:
            raise DataError(f"quantile fit is for arm {quantile_fit.arm}, {estimand} needs arm {want_arm}")
        want = tau if direction == "upper" else 1.0 - tau
        if not math.isclose(quantile_fit.level, want, rel_tol=1e-9, abs_tol=1e-12):
            warnings.warn(
                f"quantile fit level {quantile_fit.level:g} differs from the level {want:g} "
                f"balanced by the {direction} bound",
                stacklevel=2,
            )
        features = quantile_fit.fitted_values
    else:
        features = quantile_fit
    y, a, b, mask = _arm_data(ds, e, estimand)
    G = _quantile_design(np.asarray(features, dtype=float)[mask])
    fits = []

    def run(v):
        val, fit = balanced_arm_max(v, a, b, G, lam)
        fits.append(fit)
        return val

    value = _directed(run, y, direction)
    return (value, fits[0]) if return_fit else value


def att_bound(ds: Dataset, propensities, quantile_fit, lam: float, direction: str,
              return_fit: bool = False):
    """Balancing bound on the ATT.

    Treated mean minus an extremal odds-weighted control mean. The upper
    bound minimizes the control mean balancing the control
    (1 - tau)-quantile; the lower bound maximizes it balancing the
    tau-quantile.
    """
    e = _check_propensities(propensities)
    tau = tau_from_lambda(lam)
    if isinstance(quantile_fit, QuantileFit):
        if quantile_fit.arm is not None and quantile_fit.arm != 0:
            raise DataError("ATT bounds need a quantile fit on the control arm")
        want = 1.0 - tau if direction == "upper" else tau
        if not math.isclose(quantile_fit.level, want, rel_tol=1e-9, abs_tol=1e-12):
            warnings.warn(
                f"quantile fit level {quantile_fit.level:g} differs from the level {want:g} "
                f"balanced by the ATT {direction} bound",
                stacklevel=2,
            )
        features = quantile_fit.fitted_values
    else:
        features = quantile_fit
    treated = ds.treatment == 1
    if not treated.any():
        raise DataError("treated arm is empty")
    y, a, b, mask = _arm_data(ds, e, "ATT_control")
    G = _quantile_design(np.asarray(features, dtype=float)[mask])
    fits = []

    def run(v):
        val, fit = balanced_arm_max(v, a, b, G, lam)
        fits.append(fit)
        return val

    control_dir = "lower" if direction == "upper" else "upper"
    if direction not in ("lower", "upper"):
        raise ValueError(f"direction must be 'lower' or 'upper', got {direction!r}")
    control = _directed(run, y, control_dir)
    value = float(ds.outcome[treated].mean()) - control
    return (value, fits[0]) if return_fit else value


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class BoundsEstimate:
    estimand: str
    lam: float
    lower: float
    upper: float
    method: str
    point_estimate_at_lambda1: float
    quantile_method: Optional[str] = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "estimand": self.estimand,
            "lambda": self.lam,
            "method": self.method,
            "quantile_method": self.quantile_method,
            "lower": self.lower,
            "upper": self.upper,
            "point_estimate_at_lambda1": self.point_estimate_at_lambda1,
            "diagnostics": self.diagnostics,
        }


def resolve_propensities(ds: Dataset, trim: bool = False):
    """Known propensities if the dataset carries them, else a logistic fit.

    Returns ``(propensities, info)`` where ``info`` records the source, the
    logistic coefficients (if fitted) and the number of clamped units.
    """
    info = {}
    if ds.known_propensity is not None:
        e = np.array(ds.known_propensity, dtype=float)
        info["propensity_source"] = "known"
    else:
        fit = fit_logistic(ds)
        e = fit.fitted.copy()
        info["propensity_source"] = "logistic"
        info["propensity_coefficients"] = [float(c) for c in fit.coefficients]
        info["logistic_iterations"] = fit.iterations
    if trim:
        lo, hi = TRIM_RANGE
        clamped = int(np.sum((e < lo) | (e > hi)))
        e = np.clip(e, lo, hi)
        info["clamped_units"] = clamped
    return e, info


def _levels_needed(estimand: str, tau: float):
    """(arm, level) pairs of quantile features used by a quantile_balance run."""
    hi, lo = tau, 1.0 - tau
    if estimand == "psi_T":
        return [(1, hi), (1, lo)]
    if estimand == "psi_C":
        return [(0, hi), (0, lo)]
    if estimand == "ATE":
        return [(1, hi), (1, lo), (0, hi), (0, lo)]
    if estimand == "ATT":
        return [(0, lo), (0, hi)]
    raise ValueError(f"unknown estimand {estimand!r}; expected one of {ESTIMANDS}")


def fit_quantile_features(ds: Dataset, lam: float, estimand: str, quantile_method: str = "linear",
                          folds: int = 5, k_neighbors: Optional[int] = None, seed: int = 0) -> dict:
    """Per-row fitted conditional quantiles keyed by ``(arm, level)``."""
    tau = tau_from_lambda(lam)
    out = {}
    for arm, level in _levels_needed(estimand, tau):
        key = (arm, round(level, 12))
        if key in out:
            continue
        if quantile_method == "linear":
            fit = fit_linear_quantiles(ds, arm, level)
        elif quantile_method == "knn_crossfit":
            fit = crossfit_knn_quantiles(ds, arm, level, folds=folds, k_neighbors=k_neighbors, seed=seed)
        else:
            raise ValueError(f"unknown quantile method {quantile_method!r}; expected one of {QUANTILE_METHODS}")
        out[key] = fit.fitted_values
    return out


def _feature(features: dict, arm: int, level: float) -> np.ndarray:
    return features[(arm, round(level, 12))]


def _warn_ties(y: np.ndarray, label: str) -> None:
    if y.size > 1:
        dup = 1.0 - np.unique(y).size / y.size
        if dup > 0.05:
            warnings.warn(
                f"{label}: {dup:.0%} of outcomes are tied; balancing bounds assume a continuous outcome",
                stacklevel=3,
            )


def bounds_from_parts(ds: Dataset, e: np.ndarray, lam: float, estimand: str, method: str,
                      features: Optional[dict] = None):
    """Lower/upper bounds given propensities and (for quantile_balance) features.

    Returns ``(lower, upper, diagnostics)``. ATE and ATT bounds are composed
    from single-arm programs.
    """
    tau = tau_from_lambda(lam)
    diag = {}
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if estimand not in ESTIMANDS:
        raise ValueError(f"unknown estimand {estimand!r}; expected one of {ESTIMANDS}")

    def apo(arm_estimand: str, direction: str) -> float:
        arm = 1 if arm_estimand == "psi_T" else 0
        if method == "zsb":
            return zsb_bound(ds, e, lam, arm_estimand, direction)
        if method == "covariate_balance":
            feat = ds.covariates
        else:
            level = tau if direction == "upper" else 1.0 - tau
            feat = _feature(features, arm, level)
        val, fit = qb_apo_bound(ds, e, feat, lam, arm_estimand, direction, return_fit=True)
        diag[f"{arm_estimand}_{direction}"] = {
            "qr_objective": fit.objective,
            "gamma": [float(c) for c in fit.coefficients],
        }
        return val

    def att(direction: str) -> float:
        if method == "zsb":
            treated = ds.treatment == 1
            y, a, b, _ = _arm_data(ds, e, "ATT_control")
            lo, hi = a + b / lam, a + b * lam
            control_dir = "lower" if direction == "upper" else "upper"
            control = _directed(lambda v: zsb_arm_max(v, lo, hi), y, control_dir)
            return float(ds.outcome[treated].mean()) - control
        if method == "covariate_balance":
            feat = ds.covariates
        else:
            level = 1.0 - tau if direction == "upper" else tau
            feat = _feature(features, 0, level)
        val, fit = att_bound(ds, e, feat, lam, direction, return_fit=True)
        diag[f"ATT_{direction}"] = {
            "qr_objective": fit.objective,
            "gamma": [float(c) for c in fit.coefficients],
        }
        return val

    if estimand in ("psi_T", "psi_C"):
        lower, upper = apo(estimand, "lower"), apo(estimand, "upper")
    elif estimand == "ATE":
        t_lo, t_hi = apo("psi_T", "lower"), apo("psi_T", "upper")
        c_lo, c_hi = apo("psi_C", "lower"), apo("psi_C", "upper")
        diag["arm_bounds"] = {"psi_T": [t_lo, t_hi], "psi_C": [c_lo, c_hi]}
        lower, upper = t_lo - c_hi, t_hi - c_lo
    else:
        lower, upper = att("lower"), att("upper")
    return lower, upper, diag


def sensitivity_interval(ds: Dataset, lam: float, estimand: str, method: str = "quantile_balance",
                         quantile_method: str = "linear", *, propensities=None, trim: bool = False,
                         folds: int = 5, k_neighbors: Optional[int] = None, seed: int = 0,
                         features: Optional[dict] = None) -> BoundsEstimate:
    """Sensitivity interval for one estimand, method and lambda.

    Propensities default to the dataset's known column, else a logistic fit.
    """
    tau_from_lambda(lam)
    if propensities is None:
        e, info = resolve_propensities(ds, trim=trim)
    else:
        e = _check_propensities(propensities)
        info = {"propensity_source": "supplied"}
        if trim:
            lo, hi = TRIM_RANGE
            info["clamped_units"] = int(np.sum((e < lo) | (e > hi)))
            e = np.clip(e, lo, hi)
    if estimand not in ESTIMANDS:
        raise ValueError(f"unknown estimand {estimand!r}; expected one of {ESTIMANDS}")
    if method == "quantile_balance" and features is None:
        features = fit_quantile_features(ds, lam, estimand, quantile_method, folds, k_neighbors, seed)
    if method != "zsb":
        for arm in (0, 1):
            _warn_ties(ds.outcome[ds.treatment == arm], f"arm {arm}")
    lower, upper, diag = bounds_from_parts(ds, e, lam, estimand, method, features)
    if lower > upper:
        if lower - upper <= 1e-9 * (1.0 + abs(lower)):
            lower = upper = 0.5 * (lower + upper)
        else:
            raise NumericalError(f"bounds crossed: lower {lower} > upper {upper}")
    diag.update(info)
    return BoundsEstimate(
        estimand=estimand,
        lam=float(lam),
        lower=float(lower),
        upper=float(upper),
        method=method,
        point_estimate_at_lambda1=ipw_point_estimate(ds, e, estimand),
        quantile_method=quantile_method if method == "quantile_balance" else None,
        diagnostics=diag,
    )


# ---------------------------------------------------------------------------
# diagnostics


def balance_table(ds: Dataset, propensities) -> list[dict]:
    """Unweighted and IPW-weighted covariate means by arm."""
    e = _check_propensities(propensities)
    z = ds.treatment == 1
    wt = 1.0 / e[z]
    wc = 1.0 / (1.0 - e[~z])
    rows = []
    for j, name in enumerate(ds.covariate_names):
        x = ds.covariates[:, j]
        rows.append({
            "covariate": name,
            "treated_mean": float(x[z].mean()),
            "control_mean": float(x[~z].mean()),
            "treated_weighted_mean": _arm_mean(x[z], wt),
            "control_weighted_mean": _arm_mean(x[~z], wc),
        })
    return rows


def odds_calibration(ds: Dataset) -> list[dict]:
    """Largest change in fitted treatment odds from dropping each covariate.

    For covariate j the logistic model is refit without it and the reported
    factor is ``max_i exp(|logit_full_i - logit_reduced_i|)`` (always >= 1).
    """
    if ds.d < 2:
        raise DataError("odds calibration needs at least 2 covariates")
    full = fit_logistic(ds)
    eta_full = full.coefficients[0] + ds.covariates @ full.coefficients[1:]
    out = []
    for j, name in enumerate(ds.covariate_names):
        keep = [k for k in range(ds.d) if k != j]
        reduced = Dataset(
            covariates=ds.covariates[:, keep],
            treatment=ds.treatment,
            outcome=ds.outcome,
            covariate_names=tuple(ds.covariate_names[k] for k in keep),
        )
        fit = fit_logistic(reduced)
        eta_red = fit.coefficients[0] + reduced.covariates @ fit.coefficients[1:]
        out.append({"covariate": name, "max_odds_ratio": float(np.exp(np.max(np.abs(eta_full - eta_red))))})
    return out
