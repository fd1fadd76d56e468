"""Ground truth for testing: Gaussian identified sets, worst-case
propensities, and brute-force vertex enumeration of small weight programs.

Normal CDF and quantile come from ``scipy.special.ndtr`` / ``ndtri``
(Cephes; absolute error near 1e-16). Monte Carlo draws use numpy's PCG64
generator seeded directly; normal variates are produced by inverse CDF so
streams only depend on the uniform stream.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit, ndtr, ndtri

from .bounds import WeightBox, tau_from_lambda
from .errors import DataError, InfeasibleError

DEFAULT_MC_DRAWS = 1_000_000


def norm_pdf(x):
    return np.exp(-0.5 * np.square(x)) / math.sqrt(2.0 * math.pi)


def norm_cdf(x):
    return ndtr(x)


def norm_ppf(p):
    return ndtri(p)


def msm_scale(lam: float) -> float:
    """``(lambda^2 - 1)/lambda * phi(z_tau)``: worst-case shift per unit of noise sd."""
    tau = tau_from_lambda(lam)
    return (lam * lam - 1.0) / lam * float(norm_pdf(norm_ppf(tau)))


@dataclass(frozen=True)
class GaussianDGPSpec:
    """Observed-data law ``X ~ P_X``, ``Z|X ~ Bern(e(X))``, ``Y|X,Z ~ N(mu(X, Z), sigma^2)``.

    ``covariate_law`` is ``"uniform_cube"`` (on [-1, 1]^dim) or ``"gaussian"``
    (iid N(0, sigma_x^2)^dim). ``mu`` is ``"linear_sum"``, ``"two_signs"``,
    ``"identity_x"`` or ``"custom"`` (affine, ``mu_coefficients`` =
    intercept then slopes, same for both arms). ``propensity`` is
    ``"logistic"`` (``propensity_coefficients`` = intercept then slopes) or
    ``"constant"`` (``propensity_constant``).
    """

    covariate_law: str = "uniform_cube"
    dim: int = 5
    sigma_x: float = 1.0
    mu: str = "linear_sum"
    mu_coefficients: tuple = ()
    sigma: float = 1.0
    propensity: str = "logistic"
    propensity_coefficients: tuple = ()
    propensity_constant: float = 0.5

    def __post_init__(self):
        if not self.sigma > 0:
            raise DataError("sigma must be positive")
        if self.propensity == "constant" and not 0.0 < self.propensity_constant < 1.0:
            raise DataError("constant propensity must lie in (0, 1)")
        if self.covariate_law not in ("uniform_cube", "gaussian"):
            raise DataError(f"unknown covariate law {self.covariate_law!r}")
        if self.mu not in ("linear_sum", "two_signs", "identity_x", "custom"):
            raise DataError(f"unknown mu tag {self.mu!r}")
        if self.propensity not in ("logistic", "constant"):
            raise DataError(f"unknown propensity tag {self.propensity!r}")

    def draw_covariates(self, uniforms: np.ndarray) -> np.ndarray:
        if self.covariate_law == "uniform_cube":
            return 2.0 * uniforms - 1.0
        return self.sigma_x * norm_ppf(uniforms)

    def mean_outcome(self, X: np.ndarray, z: int = 1) -> np.ndarray:
        # mu does not depend on the arm for any supported tag
        if self.mu == "linear_sum":
            return X.sum(axis=1)
        if self.mu == "two_signs":
            sgn = np.where(X[:, :2] >= 0.0, 1.0, -1.0)  # sign(0) := +1
            return 1.5 * sgn[:, 0] + sgn[:, 1]
        if self.mu == "identity_x":
            return X[:, 0].copy()
        c = np.asarray(self.mu_coefficients, dtype=float)
        return c[0] + X @ c[1:]

    def expected_mean_outcome(self) -> float:
        """E[mu(X, z)]; exact because both covariate laws are symmetric about 0."""
        if self.mu == "custom":
            return float(self.mu_coefficients[0])
        return 0.0

    def propensity_score(self, X: np.ndarray) -> np.ndarray:
        if self.propensity == "constant":
            return np.full(X.shape[0], self.propensity_constant)
        c = np.asarray(self.propensity_coefficients, dtype=float)
        return expit(c[0] + X @ c[1:])


def dgp1_spec() -> GaussianDGPSpec:
    return GaussianDGPSpec(
        covariate_law="uniform_cube", dim=5, mu="linear_sum", sigma=1.0,
        propensity="logistic", propensity_coefficients=(0.0,) + (1.0 / math.sqrt(5.0),) * 5,
    )


def dgp2_spec() -> GaussianDGPSpec:
    return GaussianDGPSpec(
        covariate_law="uniform_cube", dim=5, mu="two_signs", sigma=1.0,
        propensity="logistic", propensity_coefficients=(0.0,) + (1.0 / math.sqrt(5.0),) * 5,
    )


def example7_spec(sigma_x: float = 1.0) -> GaussianDGPSpec:
    return GaussianDGPSpec(
        covariate_law="gaussian", dim=1, sigma_x=sigma_x, mu="identity_x", sigma=1.0,
        propensity="constant", propensity_constant=0.5,
    )


SPECS = {"dgp1": dgp1_spec, "dgp2": dgp2_spec, "prop1": example7_spec}


def _propensity_moments(spec: GaussianDGPSpec, mc_draws: int, seed: int):
    """(E[(1 - e(X)) sigma], E[e(X) sigma]), by Monte Carlo unless e is constant."""
    if spec.propensity == "constant":
        p = spec.propensity_constant
        return (1.0 - p) * spec.sigma, p * spec.sigma
    rng = np.random.default_rng(seed)
    total = 0.0
    done = 0
    chunk = 200_000
    while done < mc_draws:
        m = min(chunk, mc_draws - done)
        X = spec.draw_covariates(rng.random((m, spec.dim)))
        total += float(np.sum(spec.propensity_score(X)))
        done += m
    mean_e = total / mc_draws
    return (1.0 - mean_e) * spec.sigma, mean_e * spec.sigma


def gaussian_apo_bounds(spec: GaussianDGPSpec, lam: float, mc_draws: int = DEFAULT_MC_DRAWS,
                        seed: int = 0) -> dict:
    """Sharp bounds on both counterfactual means under the Gaussian model."""
    c = msm_scale(lam)
    m1 = m0 = spec.expected_mean_outcome()
    ctl_sd, trt_sd = _propensity_moments(spec, mc_draws, seed)
    return {
        "psi_T_minus": m1 - c * ctl_sd,
        "psi_T_plus": m1 + c * ctl_sd,
        "psi_C_minus": m0 - c * trt_sd,
        "psi_C_plus": m0 + c * trt_sd,
    }


def gaussian_ate_identified_set(spec: GaussianDGPSpec, lam: float, mc_draws: int = DEFAULT_MC_DRAWS,
                                seed: int = 0) -> tuple[float, float]:
    """ATE identified set ``nominal ATE +/- msm_scale(lambda) * E[sigma]``.

    With constant sigma this needs no Monte Carlo at all.
    """
    c = msm_scale(lam)
    ate = spec.expected_mean_outcome() - spec.expected_mean_outcome()
    half = c * spec.sigma
    return ate - half, ate + half


def prop1_identified_half_width(lam: float = 2.0) -> float:
    """Half-width of the psi_T identified set for the N(X, 1), e = 1/2 example."""
    return 0.5 * msm_scale(lam)


def zsb_limit_lower_bound(sigma_x: float, cut: float = 0.27) -> float:
    """A value the ZSB upper bound exceeds asymptotically in the N(X, 1), e = 1/2 example.

    Ratio achieved by the feasible propensity 1/3 + 1/3 * 1{Y <= cut * s},
    ``s = sqrt(sigma_x^2 + 1)``; it is at least ``cut * s``.
    """
    s = math.sqrt(sigma_x ** 2 + 1.0)
    return float(norm_pdf(cut)) * s / (2.0 - float(norm_cdf(cut)))


@dataclass(frozen=True)
class WorstCasePropensity:
    values: np.ndarray
    direction: str
    quantile_values: np.ndarray


def worst_case_propensity(nominal, outcomes, quantile_values, lam: float, direction: str) -> WorstCasePropensity:
    """Threshold-form propensity attaining the sharp treated-mean bound.

    ``1/E = 1 + (1 - e)/e * lambda`` for units above the cutoff (``plus``) or
    below it (``minus``), and ``lambda^-1`` in place of ``lambda`` otherwise.
    Ties with the cutoff take the ``lambda^-1`` branch.
    """
    e = np.asarray(nominal, dtype=float)
    y = np.asarray(outcomes, dtype=float)
    q = np.asarray(quantile_values, dtype=float)
    if not (e.shape == y.shape == q.shape):
        raise DataError("nominal, outcomes and quantile_values must have equal length")
    if not np.all((e > 0) & (e < 1)):
        raise DataError("nominal propensities must lie in (0, 1)")
    tau_from_lambda(lam)
    if direction == "plus":
        up = y > q
    elif direction == "minus":
        up = y < q
    else:
        raise ValueError("direction must be 'plus' or 'minus'")
    mult = np.where(up, lam, 1.0 / lam)
    inv = 1.0 + (1.0 - e) / e * mult
    return WorstCasePropensity(1.0 / inv, direction, q)


def vertex_bound_oracle(values, box, balance_design=None, balance_targets=None,
                        direction: str = "upper", tol: float = 1e-9) -> float:
    """Optimize ``sum(values * w) / sum(w)`` over box-constrained ``w`` by brute force.

    Constraints are ``balance_design.T @ w == balance_targets``. Every vertex
    of the feasible polytope has at most k coordinates off the box
    boundary, so the search covers each subset S of at most k "free"
    coordinates and every lower/upper assignment of the others, solving for
    the free coordinates. A linear-fractional objective attains its optimum
    at a vertex. Intended for m <= 14 units and k <= 2 constraints.
    """
    v = np.asarray(values, dtype=float)
    if isinstance(box, WeightBox):
        lo, hi = np.asarray(box.lower, float), np.asarray(box.upper, float)
    else:
        lo, hi = (np.asarray(b, dtype=float) for b in box)
    m = v.size
    if lo.shape != (m,) or hi.shape != (m,):
        raise DataError("box bounds must match the number of values")
    if m > 14:
        raise DataError(f"vertex enumeration limited to 14 units, got {m}")
    if balance_design is None:
        G = np.zeros((m, 0))
        t = np.zeros(0)
    else:
        G = np.asarray(balance_design, dtype=float)
        if G.ndim == 1:
            G = G[:, None]
        t = np.asarray(balance_targets, dtype=float).ravel()
    k = G.shape[1]
    if k > 2:
        raise DataError("vertex enumeration supports at most 2 balance constraints")
    if direction not in ("upper", "lower"):
        raise ValueError("direction must be 'upper' or 'lower'")
    sign = 1.0 if direction == "upper" else -1.0
    scale = 1.0 + float(np.max(np.abs(t))) if k else 1.0
    box_tol = tol * (1.0 + float(np.max(np.abs(hi))))

    best = -np.inf
    for j in range(0, k + 1):
        for free in itertools.combinations(range(m), j):
            fixed = [i for i in range(m) if i not in free]
            corners = np.array(list(itertools.product((0, 1), repeat=len(fixed))), dtype=float)
            if corners.size == 0:
                corners = corners.reshape(1, 0)
            W = np.empty((corners.shape[0], m))
            if fixed:
                W[:, fixed] = lo[fixed] + corners * (hi[fixed] - lo[fixed])
            if j:
                Gf = G[list(free)]                      # j x k
                rhs = t[None, :] - W[:, fixed] @ G[fixed]  # c x k
                sol, *_ = np.linalg.lstsq(Gf.T, rhs.T, rcond=None)
                W[:, list(free)] = sol.T
            ok = np.ones(W.shape[0], dtype=bool)
            if k:
                resid = W @ G - t[None, :]
                ok &= np.max(np.abs(resid), axis=1) <= tol * scale
            ok &= np.all(W >= lo - box_tol, axis=1) & np.all(W <= hi + box_tol, axis=1)
            if not ok.any():
                continue
            Wk = W[ok]
            den = Wk.sum(axis=1)
            good = den > 0
            if not good.any():
                continue
            obj = sign * (Wk[good] @ v) / den[good]
            best = max(best, float(obj.max()))
    if best == -np.inf:
        raise InfeasibleError("no feasible vertex")
    return sign * best


def gaussian_att_identified_set(spec: GaussianDGPSpec, lam: float, mc_draws: int = DEFAULT_MC_DRAWS,
                                seed: int = 0) -> tuple[float, float]:
    """ATT identified set derived from the control-mean bounds.

    ``E[Y(0) | Z=1] = (psi_C - E[Y (1 - Z)]) / P(Z = 1)``, so the ATT upper
    bound uses ``psi_C_minus`` and the lower bound ``psi_C_plus``. The
    moments ``E[mu e]``, ``E[mu (1 - e)]`` and ``P(Z = 1)`` come from the same
    Monte Carlo stream as :func:`gaussian_apo_bounds`, or are exact when the
    propensity is constant.
    """
    c = msm_scale(lam)
    if spec.propensity == "constant":
        p1 = spec.propensity_constant
        mean_mu = spec.expected_mean_outcome()
        e_y_treated = mean_mu
        e_y_control_part = (1.0 - p1) * mean_mu
    else:
        rng = np.random.default_rng(seed)
        s_e = s_mu_e = s_mu = 0.0
        done = 0
        chunk = 200_000
        while done < mc_draws:
            m = min(chunk, mc_draws - done)
            X = spec.draw_covariates(rng.random((m, spec.dim)))
            e = spec.propensity_score(X)
            mu = spec.mean_outcome(X)
            s_e += float(e.sum())
            s_mu_e += float((mu * e).sum())
            s_mu += float(mu.sum())
            done += m
        p1 = s_e / mc_draws
        e_y_treated = (s_mu_e / mc_draws) / p1
        e_y_control_part = (s_mu - s_mu_e) / mc_draws
    trt_sd = p1 * spec.sigma
    psi_c_minus = spec.expected_mean_outcome() - c * trt_sd
    psi_c_plus = spec.expected_mean_outcome() + c * trt_sd
    lower = e_y_treated - (psi_c_plus - e_y_control_part) / p1
    upper = e_y_treated - (psi_c_minus - e_y_control_part) / p1
    return lower, upper
