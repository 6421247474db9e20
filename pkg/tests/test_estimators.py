from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from transfer_dr.data import FeatureMap, Study
from transfer_dr.estimators import (
    EstimateOptions,
    LinearSystem,
    assemble_dr,
    assemble_dr_moments,
    assemble_imp,
    assemble_imp_moments,
    assemble_iw,
    estimate,
    estimate_many,
    estimating_equations,
    solve,
)
from transfer_dr.exceptions import SingularSystemError, ValidationError
from transfer_dr.imputation import fit_gaussian_imputation, imputation_design
from transfer_dr.simulation import PRESETS, generate_replicate

from conftest import make_study

N_INSTANCES = 100


def _interpolating_study(rng, p=2, q=3, kind="quadratic"):
    """X is an exact function of (y, z) in the span of the chosen feature map."""
    n, N = 50, 30
    zs = np.column_stack([np.ones(n), rng.normal(size=(n, q - 1))])
    zt = np.column_stack([np.ones(N), rng.normal(size=(N, q - 1))])
    ys, yt = rng.normal(size=n), rng.normal(0.4, 1.0, size=N)
    fmap = FeatureMap.preset(kind, q, True)
    A = imputation_design(ys, zs, fmap, True)
    xs = A @ rng.normal(size=(p, A.shape[1])).T
    return Study(ys, xs, zs, yt, zt, intercept_in_z=True)


# --- hand oracles -------------------------------------------------------------


def test_iw_hand_system():
    y = [1, 2, 0, 3]
    x = [2, 1, 1, 0]
    z = [1, 1, 1, 1]
    w = [Fraction(1, 2), 2, 1, Fraction(3, 2)]
    s = Study(y, np.array(x, float)[:, None], np.array(z, float)[:, None], [1.0, 2.0, 0.0], np.ones((3, 1)),
              intercept_in_z=True)
    sys_ = assemble_iw(s, np.array([float(v) for v in w]))
    A = [[sum(wi * a * b for wi, a, b in zip(w, u, v)) / 4 for v in (x, z)] for u in (x, z)]
    b = [sum(wi * a * yi for wi, a, yi in zip(w, u, y)) / 4 for u in (x, z)]
    np.testing.assert_allclose(sys_.A, np.array(A, float), rtol=1e-15)
    np.testing.assert_allclose(sys_.b, np.array(b, float), rtol=1e-15)


def test_imp_hand_system():
    sys_ = assemble_imp_moments(
        np.array([1.0, 2.0]), np.array([[1.0], [3.0]]),
        np.array([[2.0], [4.0]]), np.array([[[5.0]], [[17.0]]]),
    )
    np.testing.assert_array_equal(sys_.A, [[11, 7], [7, 5]])
    np.testing.assert_array_equal(sys_.b, [5, 3.5])


def test_dr_hand_system():
    sys_ = assemble_dr_moments(
        np.array([2.0]), np.array([[3.0]]), np.array([[2.0]]), np.array([1.0]),
        np.array([[2.5]]), np.array([[[7.0]]]),
        np.array([1.0]), np.array([[3.0]]), np.array([[2.0]]), np.array([[[5.0]]]),
    )
    # U-row: (9 - 7) + 5, 0.5*2 + 2*3 ; V-row: 2*0.5 + 3*2, 9
    np.testing.assert_array_equal(sys_.A, [[7, 7], [7, 9]])
    np.testing.assert_array_equal(sys_.b, [0.5 * 2 + 2 * 1, 3 * 1])


def test_iw_unit_weights_are_ols_normal_equations(study):
    sys_ = assemble_iw(study, np.ones(study.n))
    W = np.hstack([study.x_source, study.z_source])
    np.testing.assert_allclose(sys_.A, W.T @ W / study.n, rtol=1e-13)
    np.testing.assert_allclose(sys_.b, W.T @ study.y_source / study.n, rtol=1e-13)


def test_imp_perfect_imputation_is_target_ols(rng):
    s = _interpolating_study(rng, p=1, kind="linear")
    fit = fit_gaussian_imputation(s)
    # apply the exact linear law to the target as well
    x_t = np.column_stack([np.ones(s.N), s.y_target, s.z_target[:, 1:]]) @ fit.gamma.T
    sys_ = assemble_imp(s, fit)
    W = np.hstack([x_t, s.z_target])
    np.testing.assert_allclose(sys_.A, W.T @ W / s.N, atol=1e-10)
    np.testing.assert_allclose(sys_.b, W.T @ s.y_target / s.N, atol=1e-10)
    np.testing.assert_allclose(sys_.A, sys_.A.T, atol=1e-12)


def test_dr_blocks_are_transposes_and_solver_is_general(rng):
    s = make_study(rng, n=80, p=2, q=3)
    imp = fit_gaussian_imputation(s)
    w = np.exp(rng.normal(scale=0.5, size=s.n))
    sys_ = assemble_dr(s, w, imp)
    # the U-theta and V-beta blocks are built from the same sums
    np.testing.assert_allclose(sys_.A, sys_.A.T, atol=1e-12)
    # an asymmetric system is solved as given, never symmetrised
    B = sys_.A + np.triu(rng.normal(scale=0.3, size=sys_.A.shape), 1)
    sol = solve(LinearSystem(B, sys_.b, method="dr"))
    np.testing.assert_allclose(B @ sol, sys_.b, atol=1e-10)
    assert not np.allclose(sol, np.linalg.solve(0.5 * (B + B.T), sys_.b))


def test_weights_must_match_and_be_positive(study):
    with pytest.raises(ValidationError):
        assemble_iw(study, np.ones(study.n - 1))
    w = np.ones(study.n)
    w[0] = -1
    with pytest.raises(ValidationError):
        assemble_iw(study, w)


# --- solver -------------------------------------------------------------------


def test_solve_identity():
    np.testing.assert_array_equal(solve(LinearSystem(np.eye(2), np.array([1.0, 2.0]))), [1, 2])


def test_solve_matches_extended_precision():
    rng = np.random.default_rng(9)
    A = rng.normal(size=(5, 5)) + 3 * np.eye(5)
    b = rng.normal(size=5)
    mpmath.mp.dps = 50
    ref = mpmath.lu_solve(mpmath.matrix(A.tolist()), mpmath.matrix(b.tolist()))
    np.testing.assert_allclose(solve(LinearSystem(A, b)), [float(v) for v in ref], rtol=1e-10)


def test_solve_rejects_ill_conditioned():
    Q = np.linalg.qr(np.random.default_rng(1).normal(size=(3, 3)))[0]
    A = Q @ np.diag([1.0, 1e-7, 1e-14]) @ Q.T
    sys_ = LinearSystem(A, np.ones(3), method="dr")
    assert sys_.condition_estimate > 1e12
    with pytest.raises(SingularSystemError, match="DR"):
        solve(sys_)


def test_condition_estimate_at_least_one():
    assert LinearSystem(np.eye(3) * 5, np.ones(3)).condition_estimate >= 1.0


# --- properties over randomized instances ------------------------------------


@settings(max_examples=N_INSTANCES, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_dr_equals_imp_under_interpolation(seed):
    rng = np.random.default_rng(seed)
    s = _interpolating_study(rng)
    w = np.exp(rng.normal(scale=0.5, size=s.n))
    res = estimate_many(s, ("imp", "dr"), EstimateOptions("quadratic"), weights=w)
    np.testing.assert_allclose(res["dr"].coef.vector, res["imp"].coef.vector, atol=1e-10)


@settings(max_examples=N_INSTANCES, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_iw_with_unit_weights_is_ols(seed):
    rng = np.random.default_rng(seed)
    s = make_study(rng, n=40, p=2, q=3)
    res = estimate(s, "iw", weights=np.ones(s.n))
    W = np.hstack([s.x_source, s.z_source])
    ols = np.linalg.lstsq(W, s.y_source, rcond=None)[0]
    np.testing.assert_allclose(res.coef.vector, ols, atol=1e-10)


@settings(max_examples=N_INSTANCES, deadline=None)
@given(seed=st.integers(0, 2**31), c=st.floats(0.01, 100.0))
def test_weight_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    s = make_study(rng, n=60, p=2, q=2)
    w = np.exp(rng.normal(scale=0.5, size=s.n))
    a = estimate_many(s, ("iw", "dr"), weights=w)
    b = estimate_many(s, ("iw", "dr"), weights=c * w)
    for m in ("iw", "dr"):
        np.testing.assert_allclose(a[m].coef.vector, b[m].coef.vector, atol=1e-10)


@settings(max_examples=N_INSTANCES, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_plug_back_residuals(seed):
    rng = np.random.default_rng(seed)
    s = make_study(rng, n=60, p=2, q=3)
    for m, r in estimate_many(s).items():
        assert r.residual_norm <= 1e-8 * (1 + np.linalg.norm(r.system.b)), m


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_estimating_equations_vanish_independently(seed):
    rng = np.random.default_rng(seed)
    s = make_study(rng, n=60, p=1, q=2)
    w = np.exp(rng.normal(scale=0.3, size=s.n))
    imp = fit_gaussian_imputation(s)
    for m in ("iw", "imp", "dr"):
        system = {"iw": lambda: assemble_iw(s, w), "imp": lambda: assemble_imp(s, imp),
                  "dr": lambda: assemble_dr(s, w, imp)}[m]()
        sol = solve(system)
        ee = estimating_equations(m, s, sol, w, imp)
        assert np.linalg.norm(ee) <= 1e-8 * (1 + np.linalg.norm(system.b))
        # and at a perturbed point they do not
        assert np.linalg.norm(estimating_equations(m, s, sol + 0.1, w, imp)) > 1e-6


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    s = make_study(rng, n=60, N=40)
    t = s.subset(rng.permutation(s.n), rng.permutation(s.N))
    a, b = estimate_many(s), estimate_many(t)
    for m in a:
        np.testing.assert_allclose(a[m].coef.vector, b[m].coef.vector, atol=1e-12)


def test_unknown_method(study):
    with pytest.raises(ValidationError):
        estimate(study, "ols")


def test_estimate_many_matches_estimate(study):
    many = estimate_many(study)
    for m in ("iw", "imp", "dr"):
        np.testing.assert_array_equal(many[m].coef.vector, estimate(study, m).coef.vector)


def test_config_one_single_replicate():
    s = generate_replicate(PRESETS["I"], 11)
    r = estimate(s, "dr")
    assert r.coef.beta[0] == pytest.approx(0.959, abs=0.05)
    assert r.ratio_fit.converged and r.imputation_fit is not None


def test_options_resolve_map(study):
    fmap = EstimateOptions("quadratic").resolve_map(study)
    assert fmap.kind == "quadratic"
