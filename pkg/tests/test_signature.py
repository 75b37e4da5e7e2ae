import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import quadratic_chord_slope
from trajitr.basis import BasisSpec, basis_matrix
from trajitr.data import SubjectRecord, TrialDataset
from trajitr.errors import ConfigError, DegenerateIntervalError
from trajitr.mixed import GroupFit, log_likelihood
from trajitr.signature import (
    Biosignature,
    CovariateMoments,
    EstimationOptions,
    _stationary_point,
    ats_nonparametric,
    ats_parametric,
    fit_signature,
    initial_alpha,
    mle_components,
    normalize_signature,
    npats_objective,
    pats_constants,
    pats_criterion,
)

QUAD = BasisSpec.polynomial(2)
TIMES = np.arange(8.0)
B1, B2 = np.array([20.0, 3.0, -0.5]), np.array([20.0, 2.3, -0.4])
D_SUPP = np.array([[0.5, -0.1, -0.01], [-0.1, 0.5, -0.01], [-0.01, -0.01, 0.01]])


def two_group_data(n_per_group=60, alpha=(1.0, 2.0), theta=30.0, D=None, sigma2=1.0, seed=0, drop=False):
    """Linear-index data; independent of the package's simulator."""
    rng = np.random.default_rng(seed)
    alpha = normalize_signature(alpha)
    th = np.deg2rad(theta)
    gammas = (np.array([0, np.cos(th), np.sin(th)]), np.array([0, np.cos(th), -np.sin(th)]))
    Z = TIMES[:, None] ** np.arange(3)
    recs = []
    for i in range(2 * n_per_group):
        k = 1 + i % 2
        x = rng.normal(size=alpha.size)
        u = x @ alpha
        b = rng.multivariate_normal(np.zeros(3), D) if D is not None else np.zeros(3)
        y = Z @ ((B1, B2)[k - 1] + u * gammas[k - 1] + b) + np.sqrt(sigma2) * rng.normal(size=8)
        m = 8 - (i % 4 if drop else 0)
        recs.append(SubjectRecord(f"s{i}", k, x, TIMES[:m], y[:m]))
    return TrialDataset(tuple(recs), schedule=TIMES), alpha


# normalization -------------------------------------------------------------------


def test_normalize_examples():
    np.testing.assert_allclose(normalize_signature([1, 2]), [0.4472136, 0.8944272], atol=1e-7)
    np.testing.assert_allclose(normalize_signature([-1, -2]), [0.4472136, 0.8944272], atol=1e-7)
    np.testing.assert_array_equal(normalize_signature([0, -3]), [0, 1])
    with pytest.raises(ValueError):
        normalize_signature([0.0, 0.0])


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=6).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_normalize_invariants(v):
    a = normalize_signature(v)
    assert abs(np.linalg.norm(a) - 1) < 1e-10
    assert a[np.flatnonzero(a)[0]] > 0
    np.testing.assert_allclose(normalize_signature(3.7 * np.asarray(v)), a, atol=1e-12)


# ATS ------------------------------------------------------------------------------


def test_ats_equal_means_supplement():
    for beta in (B1, B2):
        for u in (-2.0, 0.0, 1.3):
            assert ats_parametric(beta, np.zeros(3), QUAD, u, 0, 7) == pytest.approx(-0.5, abs=1e-10)


@pytest.mark.parametrize("theta", [1.0, 2.0, 5.0])
def test_ats_contrast_law(theta):
    th = np.deg2rad(theta)
    dG = np.array([0, np.cos(th), np.sin(th)]) - np.array([0, np.cos(th), -np.sin(th)])
    u = np.linspace(-3, 3, 7)
    np.testing.assert_allclose(ats_parametric(np.zeros(3), dG, QUAD, u, 0, 7), 14 * u * np.sin(th), atol=1e-12)


def test_ats_at_zero_index_ignores_gamma():
    assert ats_parametric(B1, [5, -2, 9], QUAD, 0.0, 0, 7) == ats_parametric(B1, [0, 0, 0], QUAD, 0.0, 0, 7)


def test_degenerate_interval():
    with pytest.raises(DegenerateIntervalError):
        ats_parametric(B1, B1, QUAD, 0.0, 3, 3)
    with pytest.raises(DegenerateIntervalError):
        ats_nonparametric(np.zeros(15), QUAD, BasisSpec.polynomial(4), 0.0, 3, 3)


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.floats(0, 3), st.floats(4, 10))
def test_quadratic_exactness(coef, t1, tm):
    assert ats_parametric(coef, np.zeros(3), QUAD, 0.3, t1, tm) == pytest.approx(
        quadratic_chord_slope(coef, t1, tm), abs=1e-8
    )


INDEX = BasisSpec.cubic_bspline([0.0], (-3.0, 3.0))


def test_ats_nonparametric_unit_slope_and_zero():
    # mu(t, u) = t: coefficient 1 on the time-basis column t for every index basis function
    eta = np.zeros((3, INDEX.dimension))
    eta[1, :] = 1.0
    u = np.linspace(-3, 3, 11)
    np.testing.assert_allclose(ats_nonparametric(eta.ravel(), QUAD, INDEX, u, 0, 7), 1.0, atol=1e-12)
    assert ats_nonparametric(np.zeros(eta.size), QUAD, INDEX, 0.5, 0, 7) == 0.0


def test_ats_nonparametric_matches_direct_evaluation():
    rng = np.random.default_rng(0)
    tspec = BasisSpec.cubic_bspline([3.5], (0.0, 7.0))
    eta = rng.normal(size=tspec.dimension * INDEX.dimension)
    for u in (-2.5, -0.3, 0.0, 1.7):
        a = basis_matrix(INDEX, [u])[0]

        def mu(t):
            g = basis_matrix(tspec, [t])[0]
            return sum(eta[i * a.size + k] * g[i] * a[k] for i in range(g.size) for k in range(a.size))

        expected = (mu(7.0) - mu(0.0)) / 7.0
        assert ats_nonparametric(eta, tspec, INDEX, u, 0, 7) == pytest.approx(expected, abs=1e-12)


# NPATS / PATS criteria --------------------------------------------------------------


def test_npats_objective_properties():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(25, 3))
    e1, e2 = rng.normal(size=15), rng.normal(size=15)
    alpha = np.array([0.3, -0.5, 0.8])
    assert npats_objective(e1, e1, alpha, X, QUAD, INDEX, 0, 7) == 0.0
    val = npats_objective(e1, e2, alpha, X, QUAD, INDEX, 0, 7)
    a = normalize_signature(alpha)
    loop = np.mean([
        (ats_nonparametric(e1, QUAD, INDEX, x @ a, 0, 7) - ats_nonparametric(e2, QUAD, INDEX, x @ a, 0, 7)) ** 2
        for x in X
    ])
    assert val == pytest.approx(loop, abs=1e-12)
    assert npats_objective(e1, e2, alpha, X[rng.permutation(25)], QUAD, INDEX, 0, 7) == pytest.approx(val, abs=1e-12)


@given(st.floats(0.01, 100))
def test_npats_scale_invariance(c):
    rng = np.random.default_rng(2)
    X = rng.normal(size=(20, 2))
    e1, e2 = rng.normal(size=15), rng.normal(size=15)
    a = np.array([0.6, 0.8])
    assert npats_objective(e1, e2, c * a, X, QUAD, INDEX, 0, 7) == pytest.approx(
        npats_objective(e1, e2, a, X, QUAD, INDEX, 0, 7), rel=1e-12
    )


def test_pats_criterion_special_cases():
    mom = CovariateMoments(np.array([0.5, -1.0]), np.array([[1.0, 0.3], [0.3, 2.0]]))
    c1, c2, c3 = pats_constants(B1, B2 + 0.1, [0, 1, 0], [0, 1, 0], QUAD, 0, 7)
    assert c2 == 0 and c3 == 0
    for a in ([1, 0], [0.6, 0.8], [1, -3]):
        assert pats_criterion(B1, B2 + 0.1, [0, 1, 0], [0, 1, 0], mom, a, QUAD, 0, 7) == pytest.approx(c1)
    zero_mean = CovariateMoments(np.zeros(2), mom.Sigma_x)
    g1, g2 = np.array([0, 1, 0.2]), np.array([0, 1, -0.2])
    _, _, c3 = pats_constants(B1, B1, g1, g2, QUAD, 0, 7)
    a = normalize_signature([1, 2])
    assert pats_criterion(B1, B1, g1, g2, zero_mean, a, QUAD, 0, 7) == pytest.approx(c3 * a @ mom.Sigma_x @ a)


def test_pats_criterion_monte_carlo():
    rng = np.random.default_rng(3)
    mu = np.array([-2.0, 1.0])
    S = np.array([[1.0, 0.5], [0.5, 1.0]])
    g1, g2 = np.array([0, 1, 0.3]), np.array([0, 0.8, -0.2])
    b1, b2 = B1 + np.array([0, 0.2, 0]), B2
    alpha = normalize_signature([1.0, 2.0])
    x = rng.multivariate_normal(mu, S, size=200_000)
    u = x @ alpha
    sq = (ats_parametric(b1, g1, QUAD, u, 0, 7) - ats_parametric(b2, g2, QUAD, u, 0, 7)) ** 2
    se = sq.std(ddof=1) / np.sqrt(sq.size)
    val = pats_criterion(b1, b2, g1, g2, CovariateMoments(mu, S), alpha, QUAD, 0, 7)
    assert abs(val - sq.mean()) < 3 * se


def test_pats_and_npats_agree_for_linear_index_basis():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(40, 3)) + [1.0, -0.5, 0.2]
    beta1, beta2, g1, g2 = (rng.normal(size=3) for _ in range(4))
    lin = BasisSpec.polynomial(1)
    eta1 = np.column_stack([beta1, g1]).ravel()
    eta2 = np.column_stack([beta2, g2]).ravel()
    alpha = normalize_signature([0.2, 1.0, -0.4])
    a = npats_objective(eta1, eta2, alpha, X, QUAD, lin, 0, 7)
    b = pats_criterion(beta1, beta2, g1, g2, CovariateMoments.from_sample(X), alpha, QUAD, 0, 7)
    assert a == pytest.approx(b, abs=1e-6)


def test_moments_psd():
    rng = np.random.default_rng(5)
    mom = CovariateMoments.from_sample(rng.normal(size=(10, 4)))
    assert np.min(np.linalg.eigvalsh(mom.Sigma_x)) >= -1e-8


# MLE components ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def linear_data():
    data, alpha = two_group_data(40, D=D_SUPP, seed=6, drop=True)
    fit = fit_signature(data, "fixed", alpha=alpha)
    return data, alpha, fit


def test_mle_components_reconstruct_loglik(linear_data):
    data, _, fit = linear_data
    groups = [data.group_records(k) for k in (1, 2)]
    rng = np.random.default_rng(7)
    for _ in range(3):
        a = rng.normal(size=2)
        const, L1, L2 = mle_components(fit.fits, groups, a, QUAD)
        direct = sum(log_likelihood(f, g, a, QUAD) for f, g in zip(fit.fits, groups))
        assert const + L1 @ a + a @ L2 @ a == pytest.approx(direct, abs=1e-6)


def test_mle_components_l2_negative_semidefinite(linear_data):
    data, alpha, fit = linear_data
    groups = [data.group_records(k) for k in (1, 2)]
    _, _, L2 = mle_components(fit.fits, groups, alpha, QUAD)
    np.testing.assert_allclose(L2, L2.T)
    assert np.max(np.linalg.eigvalsh(L2)) <= 1e-8


def test_mle_components_degenerate_cases(linear_data):
    data, alpha, fit = linear_data
    groups = [data.group_records(k) for k in (1, 2)]
    no_gamma = [GroupFit(f.model_form, np.r_[f.beta, 0, 0, 0], f.D, f.sigma2, 0.0) for f in fit.fits]
    _, L1, L2 = mle_components(no_gamma, groups, alpha, QUAD)
    assert np.all(L1 == 0) and np.all(L2 == 0)
    # outcomes exactly equal to G beta: zero residual
    exact = [
        [SubjectRecord(r.id, r.group, r.x, r.times, basis_matrix(QUAD, r.times) @ f.beta) for r in g]
        for f, g in zip(fit.fits, groups)
    ]
    _, L1, _ = mle_components(fit.fits, exact, alpha, QUAD)
    np.testing.assert_allclose(L1, 0, atol=1e-9)


def test_stationary_point_and_ridge():
    L2 = np.array([[-2.0, 0.3], [0.3, -1.0]])
    L1 = np.array([1.0, -0.5])
    a = _stationary_point(L1, L2)
    np.testing.assert_allclose(L1 + 2 * L2 @ a, 0, atol=1e-12)
    with pytest.warns(RuntimeWarning, match="ridge"):
        out = _stationary_point(np.array([1.0, 0.0]), np.zeros((2, 2)))
    assert np.all(np.isfinite(out))


# estimators -------------------------------------------------------------------------


def test_initial_alpha_noiseless_direction():
    data, alpha = two_group_data(30, alpha=(1.0, 3.0, -2.0), theta=20.0, sigma2=0.0, seed=8)
    np.testing.assert_allclose(initial_alpha(data), alpha, atol=1e-8)


@pytest.mark.parametrize("method", ["pats", "mle", "npats"])
def test_estimators_recover_direction(method):
    data, alpha = two_group_data(100, D=D_SUPP, seed=9)
    fit = fit_signature(data, method)
    sig = fit.signature
    assert abs(np.linalg.norm(sig.alpha) - 1) < 1e-10 and sig.alpha[0] > 0
    assert abs(sig.alpha @ alpha) >= 0.95
    assert sig.method == method


def test_sign_identifiability():
    a, alpha = two_group_data(100, alpha=(1.0, 2.0), D=D_SUPP, seed=10)
    b, _ = two_group_data(100, alpha=(-1.0, -2.0), D=D_SUPP, seed=10)
    sa = fit_signature(a, "mle").signature.alpha
    sb = fit_signature(b, "mle").signature.alpha
    assert sa[0] > 0 and sb[0] > 0
    assert abs(sa @ alpha) >= 0.95 and abs(sb @ alpha) >= 0.95


def test_mle_trace_non_decreasing():
    data, _ = two_group_data(60, D=D_SUPP, seed=11, drop=True)
    trace = np.array(fit_signature(data, "mle", alpha=[1.0, -1.0]).signature.objective_trace)
    assert trace.size >= 2
    assert np.all(np.diff(trace) >= -1e-8 * np.abs(trace[:-1]))


def test_pats_without_interaction_does_not_crash():
    data, _ = two_group_data(40, theta=0.0, seed=12)
    recs = []
    for r in data.records:
        y = r.y - (r.x @ normalize_signature([1, 2])) * (r.times)  # removes the common Gamma = (0,1,0)
        recs.append(SubjectRecord(r.id, r.group, r.x, r.times, y))
    flat = data.replace_records(recs)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sig = fit_signature(flat, "pats", EstimationOptions(n_restarts=0, max_outer=20)).signature
    assert abs(np.linalg.norm(sig.alpha) - 1) < 1e-10
    assert np.all(np.isfinite(sig.objective_trace))


def test_unconverged_run_is_flagged():
    data, _ = two_group_data(40, D=D_SUPP, seed=13)
    sig = fit_signature(data, "pats", EstimationOptions(n_restarts=0, max_outer=1, cos_tol=1.1)).signature
    assert sig.converged is False and sig.iterations == 1


def test_fit_signature_config_errors():
    data, _ = two_group_data(20, seed=14)
    with pytest.raises(ConfigError):
        fit_signature(data, "lasso")
    with pytest.raises(ConfigError):
        fit_signature(data, "fixed")


def test_round_trips():
    sig = Biosignature(np.array([0.6, 0.8]), "pats", 3, True, (1.0, 2.0))
    back = Biosignature.from_dict(sig.to_dict())
    np.testing.assert_array_equal(back.alpha, sig.alpha)
    assert back.objective_trace == sig.objective_trace
    opts = EstimationOptions(max_outer=7, n_restarts=1)
    assert EstimationOptions.from_dict(opts.to_dict()) == opts
    with pytest.raises(ConfigError):
        EstimationOptions.from_dict({"bogus": 1})
