"""Nominal propensity and conditional-quantile models.

* :func:`fit_logistic` -- Newton-Raphson logistic MLE with step-halving.
* :func:`fit_weighted_qr` -- weighted linear quantile regression, solved by
  a Frisch-Newton primal-dual interior point method on the bounded dual LP.
* :func:`crossfit_knn_quantiles` -- cross-fitted nearest-neighbour quantiles.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from .data import Dataset, standardize_covariates
from .errors import DataError, NumericalError, SeparationError

MAX_COEF_NORM = 1e3
MAX_LINEAR_INDEX = 30.0


@dataclass(frozen=True)
class PropensityFit:
    coefficients: np.ndarray
    fitted: np.ndarray
    converged: bool
    iterations: int
    score_norm: float

    def predict(self, covariates: np.ndarray) -> np.ndarray:
        X = np.asarray(covariates, dtype=float)
        return expit(self.coefficients[0] + X @ self.coefficients[1:])


@dataclass(frozen=True)
class QuantileFit:
    level: float
    arm: Optional[int]
    coefficients: np.ndarray
    fitted_values: np.ndarray
    residuals: np.ndarray
    objective: float
    method: str = "linear"


def _design(X: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(X.shape[0]), X])


def _loglik(eta: np.ndarray, z: np.ndarray) -> float:
    # sum z*eta - log(1 + e^eta), overflow-safe
    return float(np.sum(z * eta - np.logaddexp(0.0, eta)))


def fit_logistic(ds: Dataset, max_iter: int = 100, tol: float = 1e-6) -> PropensityFit:
    """Maximum-likelihood logistic regression of treatment on ``[1, X]``.

    Converged means ``||D^T (Z - p)||_inf <= tol``. Raises
    :class:`SeparationError` when the coefficients blow up (norm above 1e3),
    fitted probabilities saturate, or Newton fails to converge in
    ``max_iter`` iterations.
    """
    D = _design(ds.covariates)
    z = ds.treatment.astype(float)
    k = D.shape[1]
    beta = np.zeros(k)
    zbar = z.mean()
    beta[0] = math.log(zbar / (1.0 - zbar))
    eta = D @ beta
    ll = _loglik(eta, z)
    converged = False
    score_norm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(eta)
        score = D.T @ (z - p)
        score_norm = float(np.max(np.abs(score)))
        if score_norm <= tol:
            converged = True
            it -= 1
            break
        H = (D * (p * (1.0 - p))[:, None]).T @ D
        try:
            if np.linalg.cond(H) > 1e12:
                raise np.linalg.LinAlgError
            step = np.linalg.solve(H, score)
            if not np.all(np.isfinite(step)):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            ridge = 1e-8 * max(1.0, float(np.trace(H)) / k)
            try:
                step = np.linalg.solve(H + ridge * np.eye(k), score)
            except np.linalg.LinAlgError:
                raise SeparationError("singular Hessian in logistic fit even after ridge jitter") from None
        t = 1.0
        while True:
            cand = beta + t * step
            eta_c = D @ cand
            ll_c = _loglik(eta_c, z)
            if ll_c >= ll - 1e-12 * abs(ll) or t < 1e-10:
                break
            t *= 0.5
        beta, eta, ll = cand, eta_c, ll_c
        if np.linalg.norm(beta) > MAX_COEF_NORM:
            raise SeparationError(
                f"logistic coefficients diverged (norm {np.linalg.norm(beta):.3g} > 1e3); "
                "treatment looks separable in the covariates"
            )
    else:
        p = expit(eta)
        score_norm = float(np.max(np.abs(D.T @ (z - p))))
        converged = score_norm <= tol
    if not converged:
        raise SeparationError(
            f"logistic fit did not converge in {max_iter} iterations (score norm {score_norm:.3g})"
        )
    if np.max(np.abs(eta)) > MAX_LINEAR_INDEX:
        raise SeparationError(
            "fitted propensities saturate at 0 or 1; treatment looks separable in the covariates"
        )
    fitted = expit(eta)
    return PropensityFit(beta, fitted, converged, it, score_norm)


def check_loss(u, tau: float):
    """Quantile check function ``u * (tau - 1{u < 0})``."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    u = np.asarray(u, dtype=float)
    out = u * (tau - (u < 0))
    return float(out) if out.ndim == 0 else out


def weighted_check_objective(coef, design, y, weights, tau) -> float:
    r = np.asarray(y, dtype=float) - np.asarray(design, dtype=float) @ np.asarray(coef, dtype=float)
    return float(np.sum(np.asarray(weights, dtype=float) * check_loss(r, tau)))


def _step_bound(v: np.ndarray, dv: np.ndarray) -> float:
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ratio = np.where(dv < 0, -v / dv, np.inf)
    m = ratio.min()
    return 1e20 if m == np.inf else float(m)


def _box_step(x: np.ndarray, s: np.ndarray, dx: np.ndarray) -> float:
    # largest step keeping x + t dx >= 0 and s - t dx >= 0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ratio = np.where(dx < 0, -x / dx, np.where(dx > 0, s / dx, np.inf))
    m = ratio.min()
    return 1e20 if m == np.inf else float(m)


def _frisch_newton(X: np.ndarray, y: np.ndarray, tau: float, gap_tol: float = 1e-10,
                   max_it: int = 100, beta: float = 0.99995):
    # degenerate iterates can overflow; they are caught by the finiteness checks
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        return _frisch_newton_core(X, y, tau, gap_tol, max_it, beta)


def _frisch_newton_core(X, y, tau, gap_tol, max_it, beta):
    """Mehrotra predictor-corrector on ``min -y'a  s.t.  X'a = (1-tau) X'1, 0 <= a <= 1``.

    Returns (coefficients, converged). Coefficients are minus the equality
    multipliers.
    """
    n, p = X.shape
    A = X.T
    c = -y
    b = (1.0 - tau) * X.sum(axis=0)
    x = np.full(n, 1.0 - tau)
    s = 1.0 - x
    yd = np.linalg.lstsq(X, c, rcond=None)[0]
    r = c - X @ yd
    r = r + 0.001 * (r == 0)
    z = np.where(r > 0, r, 0.0)
    w = z - r
    scale = 1.0 + float(np.sum(np.abs(y)))

    def gap_of():
        return float(c @ x - yd @ b + w.sum())

    gap = gap_of()
    for _ in range(max_it):
        if not np.isfinite(gap):
            return -yd, False
        if gap <= gap_tol * scale:
            return -yd, True
        q = 1.0 / (z / x + w / s)
        r = z - w
        M = (A * q) @ X
        if not np.all(np.isfinite(M)):
            return -yd, False

        def solve(v):
            return np.linalg.solve(M, v)

        try:
            dy = solve(A @ (q * r))
        except np.linalg.LinAlgError:
            return -yd, False
        dx = q * (X @ dy - r)
        ds = -dx
        dz = -z * (dx / x + 1.0)
        dw = -w * (ds / s + 1.0)
        fp = min(beta * _box_step(x, s, dx), 1.0)
        fd = min(beta * min(_step_bound(w, dw), _step_bound(z, dz)), 1.0)
        if min(fp, fd) < 1.0:
            mu = float(z @ x + w @ s)
            g = float((z + fd * dz) @ (x + fp * dx) + (w + fd * dw) @ (s + fp * ds))
            mu = mu * (g / mu) ** 3 / (2.0 * n)
            dxdz = dx * dz
            dsdw = ds * dw
            xinv = 1.0 / x
            sinv = 1.0 / s
            xi = mu * (xinv - sinv)
            try:
                dy = solve(A @ (q * r + q * (dxdz - dsdw - xi)))
            except np.linalg.LinAlgError:
                return -yd, False
            dx = q * (X @ dy + xi - r - dxdz + dsdw)
            ds = -dx
            dz = mu * xinv - z - xinv * z * dx - dxdz
            dw = mu * sinv - w - sinv * w * ds - dsdw
            fp = min(beta * _box_step(x, s, dx), 1.0)
            fd = min(beta * min(_step_bound(w, dw), _step_bound(z, dz)), 1.0)
        x = x + fp * dx
        s = s + fp * ds
        yd = yd + fd * dy
        w = w + fd * dw
        z = z + fd * dz
        gap = gap_of()
    return -yd, gap <= gap_tol * scale


def _vertex_polish(X, y, tau, coef):
    """Refit exactly through the p points with the smallest residuals.

    An optimal QR solution interpolates p observations; when the interior
    point iterate is close to such a vertex this recovers it exactly.
    """
    n, p = X.shape
    r = np.abs(y - X @ coef)
    idx = np.argsort(r, kind="stable")[:p]
    XB = X[idx]
    if np.linalg.matrix_rank(XB) < p:
        return None
    return np.linalg.solve(XB, y[idx])


def _highs_qr(X, y, tau):
    from scipy.optimize import linprog

    n, p = X.shape
    cost = np.concatenate([np.zeros(p), np.full(n, tau), np.full(n, 1.0 - tau)])
    A_eq = np.hstack([X, np.eye(n), -np.eye(n)])
    bounds = [(None, None)] * p + [(0, None)] * (2 * n)
    res = linprog(cost, A_eq=A_eq, b_eq=y, bounds=bounds, method="highs")
    if res.status != 0:
        raise NumericalError(f"quantile regression LP failed: {res.message}")
    return res.x[:p]


def fit_weighted_qr(design, y, weights, tau: float, arm: Optional[int] = None,
                    method: str = "linear") -> QuantileFit:
    """Minimize ``sum_i w_i * rho_tau(y_i - g_i' gamma)`` over ``gamma``.

    Zero-weight rows are dropped before solving. Because the check loss is
    positively homogeneous the weighted problem is an ordinary quantile
    regression on rows scaled by ``w_i``.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    G = np.asarray(design, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    yv = np.asarray(y, dtype=float).ravel()
    wv = np.asarray(weights, dtype=float).ravel()
    if G.shape[0] != yv.shape[0] or wv.shape[0] != yv.shape[0]:
        raise DataError("design, y and weights must have the same number of rows")
    if not (np.all(np.isfinite(G)) and np.all(np.isfinite(yv)) and np.all(np.isfinite(wv))):
        raise DataError("non-finite input to quantile regression")
    if np.any(wv < 0):
        raise DataError("quantile regression weights must be nonnegative")
    keep = wv > 0
    Gk, yk, wk = G[keep], yv[keep], wv[keep]
    m, k = Gk.shape
    if m < k or np.linalg.matrix_rank(Gk) < k:
        raise NumericalError(
            f"rank-deficient quantile regression design ({m} positive-weight rows, {k} columns)"
        )
    Xs = Gk * wk[:, None]
    ys = yk * wk
    coef, ok = _frisch_newton(Xs, ys, tau)
    obj = weighted_check_objective(coef, Gk, yk, wk, tau) if ok else np.inf
    if not ok or not np.isfinite(obj):
        coef = _highs_qr(Xs, ys, tau)
        obj = weighted_check_objective(coef, Gk, yk, wk, tau)
    polished = _vertex_polish(Xs, ys, tau, coef)
    if polished is not None:
        pobj = weighted_check_objective(polished, Gk, yk, wk, tau)
        if pobj <= obj:
            coef, obj = polished, pobj
    fitted = G @ coef
    return QuantileFit(
        level=float(tau),
        arm=arm,
        coefficients=coef,
        fitted_values=fitted,
        residuals=yv - fitted,
        objective=float(obj),
        method=method,
    )


def fit_linear_quantiles(ds: Dataset, arm: int, tau: float, features=None) -> QuantileFit:
    """Unweighted linear QR of Y on ``[1, features]`` within one arm.

    ``features`` defaults to the covariates. Fitted values are returned for
    every row of ``ds`` so they can serve as a balancing feature.
    """
    F = ds.covariates if features is None else np.asarray(features, dtype=float)
    G = _design(F)
    in_arm = (ds.treatment == arm).astype(float)
    fit = fit_weighted_qr(G, ds.outcome, in_arm, tau, arm=arm, method="linear")
    return fit


def default_k_neighbors(arm_size: int) -> int:
    return max(20, math.ceil(arm_size ** (2.0 / 3.0)))


def _order_stat_quantile(sorted_vals: np.ndarray, tau: float) -> np.ndarray:
    # ceil(tau * k)-th order statistic, 1-based, along the last axis
    k = sorted_vals.shape[-1]
    j = min(max(math.ceil(tau * k - 1e-12), 1), k)
    return sorted_vals[..., j - 1]


def _nearest(query: np.ndarray, ref: np.ndarray, k: int, chunk: int = 512) -> np.ndarray:
    """Indices into ``ref`` of the k nearest rows; ties go to the smaller index."""
    out = np.empty((query.shape[0], k), dtype=np.int64)
    ref_sq = np.einsum("ij,ij->i", ref, ref)
    for start in range(0, query.shape[0], chunk):
        q = query[start:start + chunk]
        d2 = np.einsum("ij,ij->i", q, q)[:, None] - 2.0 * q @ ref.T + ref_sq[None, :]
        if k < ref.shape[0]:
            part = np.argpartition(d2, k - 1, axis=1)[:, :k]
            kth = np.take_along_axis(d2, part, axis=1).max(axis=1)
            for row in range(q.shape[0]):
                cand = np.flatnonzero(d2[row] <= kth[row])
                order = np.lexsort((cand, d2[row, cand]))
                out[start + row] = cand[order[:k]]
        else:
            order = np.argsort(d2, axis=1, kind="stable")
            out[start:start + q.shape[0]] = order[:, :k]
    return out


def crossfit_knn_quantiles(ds: Dataset, arm: int, tau: float, folds: int = 5,
                           k_neighbors: Optional[int] = None, seed: int = 0) -> QuantileFit:
    """Cross-fitted k-nearest-neighbour estimate of the arm's tau-quantile.

    Rows are split into ``folds`` folds by a seeded permutation. For row i,
    the fitted value is the ``ceil(tau * k)``-th smallest outcome among the k
    nearest arm units (Euclidean, standardized covariates) outside i's fold,
    so every fitted value is an observed arm outcome.
    """
    if folds < 2:
        raise DataError("folds must be at least 2")
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    arm_idx = np.flatnonzero(ds.treatment == arm)
    if arm_idx.size < 2 * folds:
        raise DataError(
            f"arm {arm} has {arm_idx.size} units; need at least {2 * folds} for {folds}-fold cross-fitting"
        )
    k = default_k_neighbors(arm_idx.size) if k_neighbors is None else int(k_neighbors)
    if k < 1:
        raise DataError("k_neighbors must be positive")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sds, _ = standardize_covariates(ds)
    X = sds.covariates
    y = ds.outcome
    fold_of = np.random.default_rng(seed).permutation(ds.n) % folds
    fitted = np.empty(ds.n)
    for f in range(folds):
        rows = np.flatnonzero(fold_of == f)
        if rows.size == 0:
            continue
        ref = arm_idx[fold_of[arm_idx] != f]
        kk = min(k, ref.size)
        nb = _nearest(X[rows], X[ref], kk)
        vals = np.sort(y[ref][nb], axis=1)
        fitted[rows] = _order_stat_quantile(vals, tau)
    in_arm = ds.treatment == arm
    resid = np.where(in_arm, y - fitted, 0.0)
    obj = float(np.sum(check_loss(y[in_arm] - fitted[in_arm], tau)))
    return QuantileFit(
        level=float(tau),
        arm=arm,
        coefficients=np.empty(0),
        fitted_values=fitted,
        residuals=resid,
        objective=obj,
        method="knn_crossfit",
    )
