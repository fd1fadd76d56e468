import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from conftest import random_dataset
from msm_sharp import (
    DataError,
    SensitivityModel,
    att_bound,
    balance_table,
    generate_dgp,
    ipw_point_estimate,
    odds_calibration,
    qb_apo_bound,
    sensitivity_interval,
    tau_from_lambda,
    validate_dataset,
    weight_box,
    zsb_bound,
)
from msm_sharp.bounds import balanced_arm_max, fit_quantile_features, resolve_propensities
from msm_sharp.oracle import vertex_bound_oracle
from msm_sharp.regression import fit_linear_quantiles

ESTIMANDS = ("psi_T", "psi_C", "ATE", "ATT")
METHODS = ("zsb", "quantile_balance", "covariate_balance")


@pytest.fixture(autouse=True)
def _quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


def _toy(y_t, e=0.5):
    y_t = np.asarray(y_t, float)
    n = y_t.size
    X = np.arange(2 * n, dtype=float)[:, None]
    z = np.r_[np.ones(n), np.zeros(n)]
    y = np.r_[y_t, np.zeros(n)]
    return validate_dataset(X, z, y, known_propensity=np.full(2 * n, e))


# ---------------------------------------------------------------------------
# primitives


@pytest.mark.parametrize("lam, tau", [(1.0, 0.5), (2.0, 2 / 3), (4.0, 0.8)])
def test_tau_from_lambda(lam, tau):
    assert tau_from_lambda(lam) == tau
    assert SensitivityModel(lam).tau == tau


@pytest.mark.parametrize("bad", [0.5, 0.0, -1.0, float("nan"), float("inf")])
def test_tau_rejects(bad):
    with pytest.raises(DataError):
        tau_from_lambda(bad)


@pytest.mark.parametrize(
    "e, lam, arm, lo, hi",
    [
        (0.5, 2.0, "treated_inverse", 1.5, 3.0),
        (0.8, 3.0, "treated_inverse", 1 + 0.25 / 3, 1.75),
        (0.2, 2.0, "control_inverse", 1.125, 1.5),
        (0.2, 2.0, "control_odds", 0.125, 0.5),
    ],
)
def test_weight_box_values(e, lam, arm, lo, hi):
    box = weight_box([e], lam, arm)
    assert box.lower[0] == pytest.approx(lo, rel=1e-15)
    assert box.upper[0] == pytest.approx(hi, rel=1e-15)
    assert box.arm == arm


@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=20))
def test_weight_box_collapses_at_one(es):
    for arm in ("treated_inverse", "control_inverse", "control_odds"):
        box = weight_box(es, 1.0, arm)
        np.testing.assert_array_equal(box.lower, box.upper)
        assert np.all(box.lower > 0)


def test_weight_box_rejects_boundary_propensity():
    with pytest.raises(DataError):
        weight_box([0.5, 1.0], 2.0, "treated_inverse")


def test_ipw_constant_propensity(small_ds):
    z = small_ds.treatment == 1
    e = np.full(small_ds.n, 0.5)
    assert ipw_point_estimate(small_ds, e, "psi_T") == pytest.approx(small_ds.outcome[z].mean(), rel=1e-14)
    e = np.full(small_ds.n, 0.3)
    att = small_ds.outcome[z].mean() - small_ds.outcome[~z].mean()
    assert ipw_point_estimate(small_ds, e, "ATT") == pytest.approx(att, rel=1e-12)


def test_ipw_dgp1_true_propensity_ate_zero():
    ds = generate_dgp("dgp1", 100_000, seed=21)
    e = expit(ds.covariates.sum(axis=1) / math.sqrt(5.0))
    assert abs(ipw_point_estimate(ds, e, "ATE")) <= 0.02


# ---------------------------------------------------------------------------
# ZSB


def test_zsb_toy_instance():
    ds = _toy([0.0, 1.0, 2.0])
    e = ds.known_propensity
    assert zsb_bound(ds, e, 2.0, "psi_T", "upper") == pytest.approx(1.25, rel=1e-14)
    assert zsb_bound(ds, e, 2.0, "psi_T", "lower") == pytest.approx(0.75, rel=1e-14)


def test_zsb_matches_corner_enumeration():
    rng = np.random.default_rng(3)
    for _ in range(20):
        m = int(rng.integers(2, 9))
        y = rng.normal(size=m)
        box = weight_box(rng.uniform(0.1, 0.9, m), 2.5, "treated_inverse")
        ds = validate_dataset(np.arange(m + 2.0)[:, None], np.r_[np.ones(m), 0, 0], np.r_[y, 0, 0],
                              known_propensity=np.r_[1 / (1 + (box.lower - 1) * 2.5), 0.5, 0.5])
        e = ds.known_propensity
        for direction in ("upper", "lower"):
            assert zsb_bound(ds, e, 2.5, "psi_T", direction) == pytest.approx(
                vertex_bound_oracle(y, weight_box(e[:m], 2.5, "treated_inverse"), direction=direction), abs=1e-12)


def test_zsb_example7_conservative():
    ds = generate_dgp("example7", 50_000, seed=31)
    assert zsb_bound(ds, ds.known_propensity, 2.0, "psi_T", "upper") >= 0.35


@pytest.mark.parametrize("seed", range(5))
def test_zsb_lambda_nesting(seed):
    ds = random_dataset(np.random.default_rng(seed), n=150)
    e, _ = resolve_propensities(ds)
    grid = [1.0, 1.2, 1.5, 2.0, 3.0, 5.0, 10.0]
    for est in ESTIMANDS:
        ivs = [sensitivity_interval(ds, lam, est, "zsb", propensities=e) for lam in grid]
        for a, b in zip(ivs, ivs[1:]):
            assert b.lower <= a.lower + 1e-12
            assert b.upper >= a.upper - 1e-12


# ---------------------------------------------------------------------------
# balancing bounds against brute force


def _instance(rng, m_t=6, m_c=6):
    n = m_t + m_c
    x = rng.normal(size=n)
    z = np.r_[np.ones(m_t), np.zeros(m_c)]
    y = x + rng.normal(size=n)
    e = rng.uniform(0.2, 0.8, n)
    return validate_dataset(x[:, None], z, y, known_propensity=e), rng.normal(size=n)


@pytest.mark.parametrize("seed", range(10))
def test_qb_apo_matches_vertex_oracle(seed):
    rng = np.random.default_rng(seed)
    ds, q = _instance(rng)
    e = ds.known_propensity
    lam = float(rng.uniform(1.2, 4.0))
    for est, arm, mask in (("psi_T", "treated_inverse", ds.treatment == 1),
                           ("psi_C", "control_inverse", ds.treatment == 0)):
        box = weight_box(e[mask], lam, arm)
        G = np.column_stack([np.ones(mask.sum()), q[mask]])
        nominal = weight_box(e[mask], 1.0, arm).lower
        for direction in ("upper", "lower"):
            got = qb_apo_bound(ds, e, q, lam, est, direction)
            want = vertex_bound_oracle(ds.outcome[mask], box, G, G.T @ nominal, direction)
            assert got == pytest.approx(want, abs=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_att_matches_vertex_oracle(seed):
    rng = np.random.default_rng(50 + seed)
    ds, q = _instance(rng, 5, 7)
    e = ds.known_propensity
    lam = float(rng.uniform(1.2, 4.0))
    c = ds.treatment == 0
    box = weight_box(e[c], lam, "control_odds")
    G = np.column_stack([np.ones(c.sum()), q[c]])
    odds = e[c] / (1 - e[c])
    ybar = ds.outcome[ds.treatment == 1].mean()
    hi = ybar - vertex_bound_oracle(ds.outcome[c], box, G, G.T @ odds, "lower")
    lo = ybar - vertex_bound_oracle(ds.outcome[c], box, G, G.T @ odds, "upper")
    assert att_bound(ds, e, q, lam, "upper") == pytest.approx(hi, abs=1e-6)
    assert att_bound(ds, e, q, lam, "lower") == pytest.approx(lo, abs=1e-6)


def test_att_constant_outcome():
    rng = np.random.default_rng(4)
    ds = random_dataset(rng, n=80)
    ds = ds.with_outcome(np.full(ds.n, 2.5))
    for method in METHODS:
        est = sensitivity_interval(ds, 3.0, "ATT", method)
        assert est.lower == pytest.approx(0.0, abs=1e-10)
        assert est.upper == pytest.approx(0.0, abs=1e-10)


def test_qb_example7_sharp():
    ds = generate_dgp("example7", 50_000, seed=32)
    fit = fit_linear_quantiles(ds, 1, 2 / 3)
    upper = qb_apo_bound(ds, ds.known_propensity, fit, 2.0, "psi_T", "upper")
    assert upper == pytest.approx(0.2727, abs=0.03)


def test_qb_level_mismatch_warns(small_ds):
    e, _ = resolve_propensities(small_ds)
    fit = fit_linear_quantiles(small_ds, 1, 0.5)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        with pytest.raises(UserWarning, match="level"):
            qb_apo_bound(small_ds, e, fit, 2.0, "psi_T", "upper")


def test_qb_wrong_arm(small_ds):
    e, _ = resolve_propensities(small_ds)
    with pytest.raises(DataError):
        qb_apo_bound(small_ds, e, fit_linear_quantiles(small_ds, 0, 2 / 3), 2.0, "psi_T", "upper")


# ---------------------------------------------------------------------------
# orchestration properties


def test_lambda_one_collapse():
    rng = np.random.default_rng(8)
    for _ in range(10):
        ds = random_dataset(rng, n=200)
        e, _ = resolve_propensities(ds)
        for est in ESTIMANDS:
            point = ipw_point_estimate(ds, e, est)
            for method in METHODS:
                iv = sensitivity_interval(ds, 1.0, est, method, propensities=e)
                assert abs(iv.upper - iv.lower) <= 1e-10
                assert iv.lower == pytest.approx(point, abs=1e-10)
                assert iv.point_estimate_at_lambda1 == pytest.approx(point, abs=1e-12)


def test_qb_inside_zsb_100_datasets():
    rng = np.random.default_rng(9)
    for i in range(100):
        ds = random_dataset(rng, n=int(rng.integers(40, 200)), d=int(rng.integers(1, 4)))
        e, _ = resolve_propensities(ds)
        lam = float(rng.choice([1.5, 2.0, 3.0]))
        est = ESTIMANDS[i % 4]
        z = sensitivity_interval(ds, lam, est, "zsb", propensities=e)
        for method in ("quantile_balance", "covariate_balance"):
            q = sensitivity_interval(ds, lam, est, method, propensities=e)
            assert z.lower <= q.lower + 1e-9
            assert q.upper <= z.upper + 1e-9
            assert q.lower <= q.upper


def test_ate_composition(small_ds):
    e, _ = resolve_propensities(small_ds)
    for method in METHODS:
        ate = sensitivity_interval(small_ds, 2.0, "ATE", method, propensities=e)
        t = sensitivity_interval(small_ds, 2.0, "psi_T", method, propensities=e)
        c = sensitivity_interval(small_ds, 2.0, "psi_C", method, propensities=e)
        assert ate.upper == t.upper - c.lower
        assert ate.lower == t.lower - c.upper


@pytest.mark.parametrize("method", ["zsb", "quantile_balance"])
def test_sample_bounded(method):
    rng = np.random.default_rng(10)
    for _ in range(20):
        ds = random_dataset(rng, n=100)
        yt = ds.outcome[ds.treatment == 1]
        iv = sensitivity_interval(ds, 5.0, "psi_T", method)
        assert yt.min() - 1e-12 <= iv.lower <= iv.upper <= yt.max() + 1e-12


@settings(max_examples=15, deadline=None)
@given(st.floats(0.05, 20.0), st.floats(-50.0, 50.0), st.integers(0, 1000))
def test_location_scale_equivariance(a, c, seed):
    ds = random_dataset(np.random.default_rng(seed), n=90)
    e, _ = resolve_propensities(ds)
    moved = ds.with_outcome(a * ds.outcome + c)
    for method in ("zsb", "quantile_balance"):
        for est in ("psi_T", "psi_C"):
            b0 = sensitivity_interval(ds, 2.0, est, method, propensities=e)
            b1 = sensitivity_interval(moved, 2.0, est, method, propensities=e)
            tol = 1e-8 * (1 + abs(c) + a * np.abs(ds.outcome).max())
            assert b1.lower == pytest.approx(a * b0.lower + c, abs=tol)
            assert b1.upper == pytest.approx(a * b0.upper + c, abs=tol)


@pytest.mark.parametrize("seed", range(3))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, n=150)
    perm = rng.permutation(ds.n)
    shuffled = validate_dataset(ds.subset(perm))
    for est in ESTIMANDS:
        for method in METHODS:
            a = sensitivity_interval(ds, 2.0, est, method)
            b = sensitivity_interval(shuffled, 2.0, est, method)
            assert b.lower == pytest.approx(a.lower, abs=1e-10)
            assert b.upper == pytest.approx(a.upper, abs=1e-10)


def test_zero_residual_insensitivity():
    rng = np.random.default_rng(12)
    m = 40
    G = np.column_stack([np.ones(m), rng.normal(size=m)])
    y = G @ [0.3, 1.0] + rng.normal(size=m)
    b = rng.uniform(0.3, 2.0, m)
    a = np.ones(m)
    lam = 2.0
    value, fit = balanced_arm_max(y, a, b, G, lam)
    r = fit.residuals
    zero = np.abs(r) <= 1e-12 * (1 + np.abs(y))
    assert zero.sum() >= 2  # a vertex solution interpolates the design dimension
    for v_zero in (-1.0, 1.0):
        v = np.where(r > 0, 1.0, -1.0)
        v[zero] = v_zero
        alt = (np.sum(r * (a + b * lam ** v)) + np.sum(fit.fitted_values * (a + b))) / np.sum(a + b)
        assert alt == pytest.approx(value, abs=1e-12)


def test_tie_warning():
    rng = np.random.default_rng(13)
    n = 100
    z = np.r_[0, 1, rng.integers(0, 2, n - 2)]
    ds = validate_dataset(rng.normal(size=(n, 1)), z, rng.integers(0, 3, n).astype(float))
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        sensitivity_interval(ds, 2.0, "psi_T", "quantile_balance")
    assert any("tied" in str(w.message) for w in rec)


def test_bounds_estimate_dict(small_ds):
    est = sensitivity_interval(small_ds, 2.0, "ATE", "quantile_balance")
    d = est.to_dict()
    assert d["lower"] <= d["upper"]
    assert d["quantile_method"] == "linear"
    assert "psi_T_upper" in d["diagnostics"]


def test_knn_quantile_method_runs():
    ds = generate_dgp("dgp2", 800, seed=14)
    est = sensitivity_interval(ds, 2.0, "ATE", "quantile_balance", "knn_crossfit", seed=2)
    zsb = sensitivity_interval(ds, 2.0, "ATE", "zsb")
    assert zsb.lower <= est.lower <= est.upper <= zsb.upper


def test_trim_records_clamped():
    rng = np.random.default_rng(15)
    n = 200
    x = rng.normal(size=n)
    e = expit(4 * x)
    z = (rng.random(n) < e).astype(int)
    ds = validate_dataset(x[:, None], z, x + rng.normal(size=n), known_propensity=np.clip(e, 1e-4, 1 - 1e-4))
    est = sensitivity_interval(ds, 2.0, "psi_T", "zsb", trim=True)
    assert est.diagnostics["clamped_units"] == int(np.sum((ds.known_propensity < 0.01) | (ds.known_propensity > 0.99)))


# ---------------------------------------------------------------------------
# diagnostics


def test_balance_table_constant_propensity(small_ds):
    for row in balance_table(small_ds, np.full(small_ds.n, 0.5)):
        assert row["treated_weighted_mean"] == pytest.approx(row["treated_mean"], rel=1e-12)
        assert row["control_weighted_mean"] == pytest.approx(row["control_mean"], rel=1e-12)


def test_balance_table_symmetric_design():
    X = np.array([[1.0], [2.0], [1.0], [2.0]])
    ds = validate_dataset(X, [0, 0, 1, 1], [0.0, 1.0, 2.0, 3.0])
    row = balance_table(ds, np.full(4, 0.4))[0]
    assert row["treated_mean"] == row["control_mean"]
    assert row["treated_weighted_mean"] == row["control_weighted_mean"]


def test_balance_table_dgp1():
    ds = generate_dgp("dgp1", 10_000, seed=16)
    e, _ = resolve_propensities(ds)
    diffs = [abs(r["treated_weighted_mean"] - r["control_weighted_mean"]) for r in balance_table(ds, e)]
    assert max(diffs) <= 0.05


def test_odds_calibration_irrelevant_covariate():
    rng = np.random.default_rng(17)
    n = 50_000
    X = rng.normal(size=(n, 2))
    z = (rng.random(n) < expit(X[:, 0])).astype(int)
    out = odds_calibration(validate_dataset(X, z, rng.normal(size=n)))
    assert out[1]["max_odds_ratio"] <= 1.1
    assert out[0]["max_odds_ratio"] > 2.0


def test_odds_calibration_duplicate_columns():
    rng = np.random.default_rng(18)
    n = 2000
    x = rng.normal(size=n)
    X = np.column_stack([x, x, rng.normal(size=n)])
    z = (rng.random(n) < expit(x)).astype(int)
    out = odds_calibration(validate_dataset(X, z, x))
    assert out[0]["max_odds_ratio"] == pytest.approx(1.0, abs=1e-4)


def test_odds_calibration_dgp1():
    ds = generate_dgp("dgp1", 10_000, seed=19)
    out = odds_calibration(ds)
    assert out[0]["covariate"] == "x1"
    assert out[0]["max_odds_ratio"] >= 1.2
    assert all(r["max_odds_ratio"] >= 1.0 for r in out)


def test_odds_calibration_needs_two_covariates(small_ds):
    one = validate_dataset(small_ds.covariates[:, :1], small_ds.treatment, small_ds.outcome)
    with pytest.raises(DataError):
        odds_calibration(one)


def test_features_keyed_by_level(small_ds):
    feats = fit_quantile_features(small_ds, 2.0, "ATE")
    assert set(feats) == {(1, round(2 / 3, 12)), (1, round(1 / 3, 12)), (0, round(2 / 3, 12)), (0, round(1 / 3, 12))}
