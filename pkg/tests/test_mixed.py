import numpy as np
import pytest

from oracles import mvn_logpdf
from trajitr.basis import BasisSpec, basis_matrix
from trajitr.data import SubjectRecord, pad_records
from trajitr.errors import ConvergenceError, RankDeficiencyError, UnderIdentifiedError
from trajitr.mixed import (
    GroupFit,
    GroupGLS,
    fit_group,
    fixed_design,
    gls_fixed_effects,
    log_likelihood,
    marginal_covariance,
)

QUAD = BasisSpec.polynomial(2)
TIMES = np.arange(8.0)
D_SUPP = np.array([[0.5, -0.1, -0.01], [-0.1, 0.5, -0.01], [-0.01, -0.01, 0.01]])


def make_group(n, beta, gamma=(0, 0, 0), D=None, sigma2=1.0, p=2, seed=0, alpha=None, drop=None):
    rng = np.random.default_rng(seed)
    alpha = np.ones(p) / np.sqrt(p) if alpha is None else np.asarray(alpha)
    Z = TIMES[:, None] ** np.arange(3)
    recs = []
    for i in range(n):
        x = rng.normal(size=p)
        u = x @ alpha
        mean = Z @ (np.asarray(beta) + u * np.asarray(gamma))
        b = rng.multivariate_normal(np.zeros(3), D) if D is not None else np.zeros(3)
        y = mean + Z @ b + np.sqrt(sigma2) * rng.normal(size=TIMES.size)
        keep = np.ones(TIMES.size, bool)
        if drop is not None:
            keep[TIMES.size - drop[i]:] = False
        recs.append(SubjectRecord(i, 1, x, TIMES[keep], y[keep]))
    return recs, alpha


# marginal covariance --------------------------------------------------------------


def test_marginal_covariance_examples():
    np.testing.assert_array_equal(marginal_covariance(np.eye(2), np.zeros((2, 2)), 2.0), 2 * np.eye(2))
    V = marginal_covariance(np.ones((3, 1)), [[1.0]], 1.0)
    np.testing.assert_array_equal(V, np.ones((3, 3)) + np.eye(3))


def test_marginal_covariance_symmetric_and_shape_checked():
    rng = np.random.default_rng(0)
    Z = rng.normal(size=(5, 3))
    L = rng.normal(size=(3, 3))
    V = marginal_covariance(Z, L @ L.T, 0.7)
    assert np.max(np.abs(V - V.T)) <= 1e-12
    with pytest.raises(ValueError):
        marginal_covariance(Z, np.eye(2), 1.0)


def test_marginal_covariance_monte_carlo():
    rng = np.random.default_rng(1)
    Z = rng.normal(size=(4, 2))
    L = np.array([[1.0, 0.0], [0.4, 0.6]])
    sigma2 = 0.5
    n = 100_000
    draws = (rng.normal(size=(n, 2)) @ L.T) @ Z.T + np.sqrt(sigma2) * rng.normal(size=(n, 4))
    emp = np.cov(draws, rowvar=False)
    V = marginal_covariance(Z, L @ L.T, sigma2)
    # standard error of a sample covariance entry is about sqrt((V_ii V_jj + V_ij^2) / n)
    se = np.sqrt((np.outer(np.diag(V), np.diag(V)) + V**2) / n)
    assert np.all(np.abs(emp - V) < 5 * se)


# GLS ------------------------------------------------------------------------------


def test_gls_identity_covariance_is_ols():
    rng = np.random.default_rng(2)
    Xs = [rng.normal(size=(4, 3)) for _ in range(6)]
    ys = [rng.normal(size=4) for _ in range(6)]
    est = gls_fixed_effects(Xs, ys, [np.eye(4)] * 6)
    ols, *_ = np.linalg.lstsq(np.vstack(Xs), np.concatenate(ys), rcond=None)
    np.testing.assert_allclose(est, ols, atol=1e-10)


def test_gls_weighted_mean():
    w = np.array([1.0, 2.0, 5.0])
    y = np.array([3.0, -1.0, 4.0])
    est = gls_fixed_effects([np.ones((1, 1))] * 3, [[v] for v in y], [[[1 / wi]] for wi in w])
    assert est[0] == pytest.approx(np.sum(w * y) / np.sum(w), abs=1e-12)


def test_gls_noiseless_recovery():
    rng = np.random.default_rng(4)
    eta0 = rng.normal(size=3)
    Xs = [rng.normal(size=(5, 3)) for _ in range(4)]
    Vs = []
    for _ in range(4):
        A = rng.normal(size=(5, 5))
        Vs.append(A @ A.T + np.eye(5))
    est = gls_fixed_effects(Xs, [X @ eta0 for X in Xs], Vs)
    np.testing.assert_allclose(est, eta0, atol=1e-8)


def test_gls_rank_deficiency():
    X = np.ones((4, 2))
    with pytest.raises(RankDeficiencyError, match="GLS"):
        gls_fixed_effects([X], [np.arange(4.0)], [np.eye(4)])


# fitting --------------------------------------------------------------------------


def test_fit_recovers_beta_within_three_se():
    beta = np.array([20.0, 3.0, -0.5])
    recs, alpha = make_group(100, beta, sigma2=1.0, seed=5)
    fit = fit_group(recs, alpha, QUAD, model_form="linear_index")
    # standard errors from the GLS information at the fitted covariance
    pad = pad_records(recs)
    X, _ = fixed_design(pad, alpha, QUAD, None, "linear_index")
    Z = pad.basis_rows(lambda t: basis_matrix(QUAD, t))
    info = sum(X[i].T @ np.linalg.solve(marginal_covariance(Z[i], fit.D, fit.sigma2), X[i]) for i in range(pad.n))
    se = np.sqrt(np.diag(np.linalg.inv(info)))[:3]
    assert np.all(np.abs(fit.beta - beta) < 3 * se)


def test_fit_supplement_covariance_is_psd():
    recs, alpha = make_group(150, [20, 3, -0.5], [0, 1, 0.1], D=D_SUPP, seed=6)
    fit = fit_group(recs, alpha, QUAD)
    assert np.min(np.linalg.eigvalsh(fit.D)) >= -1e-8
    assert fit.sigma2 > 0
    np.testing.assert_allclose(fit.D, fit.D.T)


def test_noiseless_fit_hits_floor_and_recovers():
    beta, gamma = np.array([20.0, 2.3, -0.4]), np.array([0.0, 1.0, 0.2])
    recs, alpha = make_group(40, beta, gamma, sigma2=0.0, seed=7)
    fit = fit_group(recs, alpha, QUAD)
    assert fit.sigma2 < 1e-4
    np.testing.assert_allclose(fit.beta, beta, atol=1e-6)
    np.testing.assert_allclose(fit.gamma, gamma, atol=1e-6)


def test_tensor_form_reduces_to_linear_index_with_linear_index_basis():
    recs, alpha = make_group(60, [20, 3, -0.5], [0, 1, 0.2], D=D_SUPP, seed=8)
    lin = fit_group(recs, alpha, QUAD, model_form="linear_index")
    ten = fit_group(recs, alpha, QUAD, BasisSpec.polynomial(1), model_form="tensor")
    # eta layout is (time i, index k) -> column i*2+k; beta = eta[::2], Gamma = eta[1::2]
    np.testing.assert_allclose(ten.eta[::2], lin.beta, atol=1e-5)
    np.testing.assert_allclose(ten.eta[1::2], lin.gamma, atol=1e-5)
    assert ten.loglik == pytest.approx(lin.loglik, abs=1e-6)


def test_under_identified():
    recs, alpha = make_group(3, [20, 3, -0.5], seed=9)
    with pytest.raises(UnderIdentifiedError):
        fit_group(recs, alpha, QUAD)
    single = [SubjectRecord(i, 1, [0.1 * i, 1.0], [0.0], [1.0]) for i in range(30)]
    with pytest.raises(UnderIdentifiedError):
        fit_group(single, [1.0, 0.0], QUAD)


def test_convergence_error_carries_best_fit():
    recs, alpha = make_group(50, [20, 3, -0.5], D=D_SUPP, seed=10)
    with pytest.raises(ConvergenceError) as info:
        fit_group(recs, alpha, QUAD, max_iter=1)
    assert isinstance(info.value.best, GroupFit)


def test_monotone_fitting_from_warm_start():
    recs, alpha = make_group(80, [20, 3, -0.5], [0, 1, 0.1], D=D_SUPP, seed=11)
    first = fit_group(recs, alpha, QUAD)
    again = fit_group(recs, alpha, QUAD, init=first)
    assert again.loglik >= first.loglik - 1e-9


# likelihood -----------------------------------------------------------------------


def test_loglik_single_point():
    rec = [SubjectRecord(0, 1, [0.0, 0.0], [0.0], [2.0])]
    fit = GroupFit("linear_index", np.array([2.0, 0.0]), np.zeros((1, 1)), 1.0, 0.0)
    val = log_likelihood(fit, rec, [1.0, 0.0], BasisSpec.polynomial(0), random_spec=BasisSpec.polynomial(0))
    assert val == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)


def test_loglik_doubling_sigma2():
    recs = [SubjectRecord(i, 1, [1.0, 0.0], TIMES[: 3 + i], 20 + 3 * TIMES[: 3 + i]) for i in range(3)]
    coef = np.r_[20.0, 3.0, 0.0, 0.0, 0.0, 0.0]
    zero = np.zeros((3, 3))
    l1 = log_likelihood(GroupFit("linear_index", coef, zero, 1.0, 0.0), recs, [1.0, 0.0], QUAD)
    l2 = log_likelihood(GroupFit("linear_index", coef, zero, 2.0, 0.0), recs, [1.0, 0.0], QUAD)
    n_obs = sum(r.m for r in recs)
    assert l1 - l2 == pytest.approx(n_obs / 2 * np.log(2), abs=1e-10)


def test_loglik_matches_dense_density():
    recs, alpha = make_group(3, [20, 3, -0.5], [0, 1, 0.2], D=D_SUPP, seed=12, drop=[0, 2, 4])
    fit = GroupFit("linear_index", np.r_[20, 3, -0.5, 0, 1, 0.2], D_SUPP, 0.8, 0.0)
    expected = 0.0
    for r in recs:
        Z = r.times[:, None] ** np.arange(3)
        u = r.x @ alpha
        mean = Z @ (fit.beta + u * fit.gamma)
        expected += mvn_logpdf(r.y, mean, Z @ D_SUPP @ Z.T + 0.8 * np.eye(r.m))
    assert log_likelihood(fit, recs, alpha, QUAD) == pytest.approx(expected, abs=1e-9)


def test_fitted_loglik_consistent_with_direct_evaluation():
    recs, alpha = make_group(60, [20, 3, -0.5], [0, 1, 0.1], D=D_SUPP, seed=13, drop=list(np.arange(60) % 5))
    fit = fit_group(recs, alpha, QUAD)
    assert log_likelihood(fit, recs, alpha, QUAD) == pytest.approx(fit.loglik, abs=1e-7)


def test_profiling_stationarity():
    recs, alpha = make_group(60, [20, 3, -0.5], [0, 1, 0.1], D=D_SUPP, seed=14)
    fit = fit_group(recs, alpha, QUAD)
    base = log_likelihood(fit, recs, alpha, QUAD)
    for j in range(fit.coef.size):
        for step in (1e-4, -1e-4):
            coef = fit.coef.copy()
            coef[j] += step
            moved = GroupFit(fit.model_form, coef, fit.D, fit.sigma2, 0.0)
            assert log_likelihood(moved, recs, alpha, QUAD) <= base + 1e-9


def test_missingness_neutrality():
    recs, alpha = make_group(40, [20, 3, -0.5], D=D_SUPP, seed=15)
    reduced = [SubjectRecord(r.id, r.group, r.x, r.times[:5], r.y[:5]) if i % 3 == 0 else r for i, r in enumerate(recs)]
    direct = [SubjectRecord(r.id, r.group, r.x, r.times.copy(), r.y.copy()) for r in reduced]
    a = fit_group(reduced, alpha, QUAD)
    b = fit_group(direct, alpha, QUAD)
    pa, pb = pad_records(reduced), pad_records(direct)
    Xa, _ = fixed_design(pa, alpha, QUAD, None, "linear_index")
    Xb, _ = fixed_design(pb, alpha, QUAD, None, "linear_index")
    assert np.array_equal(Xa, Xb)
    np.testing.assert_array_equal(a.coef, b.coef)
    assert a.loglik == b.loglik


def test_group_gls_matches_dense_solve():
    recs, alpha = make_group(30, [20, 3, -0.5], [0, 1, 0.1], D=D_SUPP, seed=16, drop=list(np.arange(30) % 4))
    fit = fit_group(recs, alpha, QUAD)
    new_alpha = np.array([0.6, 0.8])
    pad = pad_records(recs)
    for form, spec in (("linear_index", None), ("tensor", BasisSpec.cubic_bspline([0.0], (-3.0, 3.0)))):
        f = GroupFit(form, np.zeros(1), fit.D, fit.sigma2, 0.0)
        got = GroupGLS(pad, f, QUAD, QUAD).solve_alpha(new_alpha, spec)
        X, _ = fixed_design(pad, new_alpha, QUAD, spec, form)
        Z = pad.basis_rows(lambda t: basis_matrix(QUAD, t))
        Xs, ys, Vs = [], [], []
        for i in range(pad.n):
            obs = pad.mask[i]
            Xs.append(X[i, obs])
            ys.append(pad.y[i, obs])
            Vs.append(marginal_covariance(Z[i, obs], fit.D, fit.sigma2))
        np.testing.assert_allclose(got, gls_fixed_effects(Xs, ys, Vs), rtol=1e-7, atol=1e-7)


def test_groupfit_round_trip():
    recs, alpha = make_group(30, [20, 3, -0.5], seed=17)
    fit = fit_group(recs, alpha, QUAD)
    back = GroupFit.from_dict(fit.to_dict())
    np.testing.assert_array_equal(back.coef, fit.coef)
    np.testing.assert_array_equal(back.D, fit.D)
    assert back.loglik == fit.loglik
