"""Average tangent slopes and estimation of the single-index direction alpha.

Three estimators share one alternating scheme:

* ``npats`` maximizes the mean squared ATS contrast under the tensor-basis
  mixed model (flexible in both time and index);
* ``pats`` does the same under the linear-index model, where the criterion
  has the closed form ``c1 + c2 mu'a + c3 a'(mu mu' + S)a``;
* ``mle`` maximizes the marginal likelihood of the linear-index model by the
  stationary point of its quadratic expansion in alpha.

Between updates of alpha, the per-group variance components are refitted by
maximum likelihood (:func:`trajitr.mixed.fit_group`). During a Nelder–Mead
update the fixed effects are, by default, re-solved by closed-form GLS for
every candidate alpha with the covariances frozen
(``profile_fixed_effects=True``). Holding them fixed instead
(``profile_fixed_effects=False``) makes the linear-index update maximize
``a'(mu mu' + S)a`` for essentially any data, so it is kept only for
comparison.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .basis import BasisSpec, basis_matrix, default_time_spec, index_spec_from_sample
from .data import PaddedGroup, TrialDataset, pad_records
from .errors import ConfigError, DataError, DegenerateIntervalError
from .mixed import GroupFit, GroupGLS, fit_group, subject_covariances
from .optim import NelderMeadOptions, nelder_mead

__all__ = [
    "Biosignature",
    "CovariateMoments",
    "EstimationOptions",
    "SignatureFit",
    "normalize_signature",
    "ats_parametric",
    "ats_nonparametric",
    "npats_objective",
    "pats_constants",
    "pats_criterion",
    "mle_components",
    "initial_alpha",
    "estimate_npats",
    "estimate_pats",
    "estimate_mle",
    "fit_signature",
]

logger = logging.getLogger(__name__)

METHODS = ("npats", "pats", "mle", "fixed")
_DEFAULT_MAX_OUTER = {"npats": 100, "pats": 400, "mle": 50}


@dataclass(frozen=True, eq=False)
class Biosignature:
    alpha: np.ndarray
    method: str
    iterations: int = 0
    converged: bool = True
    objective_trace: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha.tolist(),
            "method": self.method,
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "objective_trace": [float(v) for v in self.objective_trace],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Biosignature":
        return cls(
            alpha=np.asarray(d["alpha"], dtype=float),
            method=d["method"],
            iterations=int(d.get("iterations", 0)),
            converged=bool(d.get("converged", True)),
            objective_trace=tuple(d.get("objective_trace", ())),
        )


@dataclass(frozen=True, eq=False)
class CovariateMoments:
    mu_x: np.ndarray
    Sigma_x: np.ndarray

    @classmethod
    def from_sample(cls, X) -> "CovariateMoments":
        """Empirical mean and (1/N) covariance, so the criterion equals a sample average."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        mu = X.mean(axis=0)
        R = X - mu
        return cls(mu, R.T @ R / X.shape[0])


def normalize_signature(v) -> np.ndarray:
    """Scale to unit norm and make the leading nonzero coordinate positive."""
    v = np.asarray(v, dtype=float).ravel()
    norm = np.linalg.norm(v)
    if not np.isfinite(norm) or norm == 0:
        raise ValueError("cannot normalize a zero (or non-finite) vector")
    v = v / norm
    nz = np.flatnonzero(v)
    if v[nz[0]] < 0:
        v = -v
    return v


def _slope_vector(time_spec: BasisSpec, t1: float, tm: float) -> np.ndarray:
    if not tm > t1:
        raise DegenerateIntervalError(f"need tm > t1, got t1={t1}, tm={tm}")
    g = basis_matrix(time_spec, [t1, tm])
    return (g[1] - g[0]) / (tm - t1)


def ats_parametric(beta, gamma, time_spec: BasisSpec, u, t1: float, tm: float):
    """Average tangent slope of ``g(t)^T (beta + u Gamma)`` over ``[t1, tm]``.

    ``u`` may be a scalar or an array.
    """
    dg = _slope_vector(time_spec, t1, tm)
    return dg @ np.asarray(beta, dtype=float) + np.asarray(u, dtype=float) * (dg @ np.asarray(gamma, dtype=float))


def ats_nonparametric(eta, time_spec: BasisSpec, index_spec: BasisSpec, u, t1: float, tm: float):
    """``eta^T [(g(tm) - g(t1)) ⊗ a(u)] / (tm - t1)``, vectorized over ``u``."""
    dg = _slope_vector(time_spec, t1, tm)
    eta = np.asarray(eta, dtype=float)
    d1, d2 = time_spec.dimension, index_spec.dimension
    weights = eta.reshape(d1, d2).T @ dg
    scalar = np.ndim(u) == 0
    out = basis_matrix(index_spec, np.atleast_1d(u)) @ weights
    return float(out[0]) if scalar else out


def npats_objective(eta1, eta2, alpha, X, time_spec, index_spec, t1, tm) -> float:
    """Mean squared ATS contrast over the empirical distribution of ``alpha^T x``."""
    alpha = normalize_signature(alpha)
    u = np.atleast_2d(X) @ alpha
    diff = np.asarray(eta1, dtype=float) - np.asarray(eta2, dtype=float)
    contrast = ats_nonparametric(diff, time_spec, index_spec, u, t1, tm)
    return float(np.mean(contrast**2))


def pats_constants(beta1, beta2, gamma1, gamma2, time_spec, t1, tm) -> tuple[float, float, float]:
    dg = _slope_vector(time_spec, t1, tm)
    db = dg @ (np.asarray(beta1, dtype=float) - np.asarray(beta2, dtype=float))
    dG = dg @ (np.asarray(gamma1, dtype=float) - np.asarray(gamma2, dtype=float))
    return float(db * db), float(2.0 * db * dG), float(dG * dG)


def pats_criterion(beta1, beta2, gamma1, gamma2, moments: CovariateMoments, alpha, time_spec, t1, tm) -> float:
    """``c1 + c2 mu^T a + c3 a^T (mu mu^T + Sigma) a`` at the normalized ``alpha``."""
    alpha = normalize_signature(alpha)
    c1, c2, c3 = pats_constants(beta1, beta2, gamma1, gamma2, time_spec, t1, tm)
    m = float(moments.mu_x @ alpha)
    second = m * m + float(alpha @ moments.Sigma_x @ alpha)
    return c1 + c2 * m + c3 * second


def mle_components(
    fits: Sequence[GroupFit],
    groups: Sequence[Sequence | PaddedGroup],
    alpha,
    time_spec: BasisSpec,
    random_spec: BasisSpec | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Quadratic expansion ``loglik(alpha) = a + L1 alpha + alpha^T L2 alpha``.

    ``beta``, ``Gamma`` and the covariances are held at ``fits``; ``groups``
    lists each group's records (or padded view) in the same order. The
    covariate density is not included. ``L2`` is symmetric negative
    semi-definite.
    """
    random_spec = random_spec or BasisSpec.polynomial(2)
    alpha = np.asarray(alpha, dtype=float)
    p = alpha.size
    a, L1, L2 = 0.0, np.zeros(p), np.zeros((p, p))
    for fit, group in zip(fits, groups):
        pad = group if isinstance(group, PaddedGroup) else pad_records(list(group))
        G = pad.basis_rows(lambda t: basis_matrix(time_spec, t))
        Psi = subject_covariances(pad, fit, random_spec)
        Pinv = np.linalg.inv(Psi)
        logdet = np.linalg.slogdet(Psi)[1]
        r0 = np.where(pad.mask, pad.y - G @ fit.beta, 0.0)
        gG = G @ fit.gamma
        w = np.einsum("nij,nj->ni", Pinv, gG)
        s = np.einsum("ni,ni->n", w, r0)
        h = np.einsum("ni,ni->n", w, gG)
        quad0 = np.einsum("ni,nij,nj->n", r0, Pinv, r0)
        m = pad.mask.sum(axis=1)
        a += float(np.sum(-0.5 * m * np.log(2 * np.pi) - 0.5 * logdet - 0.5 * quad0))
        L1 += s @ pad.x
        L2 -= 0.5 * (pad.x * h[:, None]).T @ pad.x
    return a, L1, 0.5 * (L2 + L2.T)


@dataclass(frozen=True)
class EstimationOptions:
    """Knobs for the alternating estimators.

    ``None`` for ``time_basis``/``max_outer``/``n_restarts`` selects the
    method default: cubic B-spline time basis for NPATS and quadratic
    otherwise; 100/400/50 outer iterations for NPATS/PATS/MLE; four extra
    random starts for NPATS and PATS, none for MLE.
    """

    time_basis: str | None = None
    index_basis: str = "cubic_bspline"
    random_degree: int = 2
    max_outer: int | None = None
    cos_tol: float = 0.99
    n_restarts: int | None = None
    seed: int = 0
    profile_fixed_effects: bool = True
    pooled_index: bool = True
    nelder_mead: NelderMeadOptions = field(default_factory=NelderMeadOptions)
    max_halvings: int = 10

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "nelder_mead"}
        d["nelder_mead"] = {
            "max_evals": self.nelder_mead.max_evals,
            "simplex_scale": self.nelder_mead.simplex_scale,
            "tolerance": self.nelder_mead.tolerance,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "EstimationOptions":
        d = dict(d or {})
        nm = d.pop("nelder_mead", None)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown estimation options: {sorted(unknown)}")
        if nm is not None:
            d["nelder_mead"] = NelderMeadOptions(**nm)
        return cls(**d)


@dataclass(frozen=True, eq=False)
class SignatureFit:
    """An estimated direction together with the group models fitted at it."""

    signature: Biosignature
    fits: tuple[GroupFit, GroupFit]
    time_spec: BasisSpec
    index_spec: BasisSpec | None
    random_spec: BasisSpec
    model_form: str
    t1: float
    tm: float


class _Problem:
    """Training data and basis choices shared by one estimation run."""

    def __init__(self, data: TrialDataset, method: str, options: EstimationOptions):
        groups = data.groups
        if set(np.unique(groups)) != {1, 2}:
            raise DataError("estimation needs subjects in both groups 1 and 2")
        if data.p < 2:
            raise DataError("the single index needs at least two covariates")
        self.method = method
        self.options = options
        self.t1, self.tm = data.endpoints()
        if not self.tm > self.t1:
            raise DegenerateIntervalError("all observations share one time point")
        self.pads = tuple(pad_records(data.group_records(k)) for k in (1, 2))
        self.X = data.X
        self.group_of = groups
        self.p = data.p
        tkind = options.time_basis or ("cubic_bspline" if method == "npats" else "polynomial")
        all_times = np.concatenate([r.times for r in data.records])
        self.time_spec = default_time_spec(all_times, tkind)
        self.random_spec = BasisSpec.polynomial(options.random_degree)
        self.model_form = "tensor" if method == "npats" else "linear_index"
        self.index_kind = options.index_basis
        self.dg = _slope_vector(self.time_spec, self.t1, self.tm)
        self.moments = CovariateMoments.from_sample(self.X)
        self.group_moments = tuple(CovariateMoments.from_sample(p.x) for p in self.pads)

    def index_spec(self, alpha) -> BasisSpec | None:
        if self.model_form != "tensor":
            return None
        return index_spec_from_sample(self.X @ alpha, self.index_kind)

    def fit(self, alpha, warm=(None, None)) -> tuple[GroupFit, GroupFit]:
        spec = self.index_spec(alpha)
        return tuple(
            fit_group(
                pad, alpha, self.time_spec, spec, self.random_spec, self.model_form, init=w
            )
            for pad, w in zip(self.pads, warm)
        )

    def _u_samples(self, alpha):
        if self.options.pooled_index:
            return (self.X @ alpha,)
        return tuple(p.x @ alpha for p in self.pads)

    # criteria given coefficients --------------------------------------------------
    def npats_value(self, coefs, alpha, spec) -> float:
        diff = coefs[0] - coefs[1]
        vals = [
            np.mean(ats_nonparametric(diff, self.time_spec, spec, u, self.t1, self.tm) ** 2)
            for u in self._u_samples(alpha)
        ]
        return float(np.mean(vals))

    def pats_value(self, coefs, alpha) -> float:
        d = coefs[0].size // 2
        moments = (self.moments,) if self.options.pooled_index else self.group_moments
        vals = [
            pats_criterion(coefs[0][:d], coefs[1][:d], coefs[0][d:], coefs[1][d:], mom, alpha,
                           self.time_spec, self.t1, self.tm)
            for mom in moments
        ]
        return float(np.mean(vals))

    def criterion(self, fits, alpha) -> float:
        coefs = tuple(f.coef for f in fits)
        if self.method == "npats":
            return self.npats_value(coefs, alpha, self.index_spec(alpha))
        return self.pats_value(coefs, alpha)

    def update_objective(self, fits, alpha_now):
        """Objective of the alpha-update step, a function of an unnormalized vector."""
        if self.options.profile_fixed_effects:
            solvers = tuple(GroupGLS(pad, f, self.time_spec, self.random_spec) for pad, f in zip(self.pads, fits))
        fixed = tuple(f.coef for f in fits)
        fixed_spec = self.index_spec(alpha_now)

        def objective(v):
            try:
                alpha = normalize_signature(v)
            except ValueError:
                return -np.inf
            if self.method == "npats":
                if self.options.profile_fixed_effects:
                    spec = self.index_spec(alpha)
                    coefs = tuple(s.solve_alpha(alpha, spec) for s in solvers)
                else:
                    spec, coefs = fixed_spec, fixed
                return self.npats_value(coefs, alpha, spec)
            coefs = tuple(s.solve_alpha(alpha) for s in solvers) if self.options.profile_fixed_effects else fixed
            return self.pats_value(coefs, alpha)

        return objective


def _cos(a, b) -> float:
    return float(abs(np.dot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b)))


def initial_alpha(data: TrialDataset) -> np.ndarray:
    """Leading principal direction of the per-group regressions of subject slopes on x.

    Each subject's outcomes are fitted by OLS on a polynomial in time (degree
    up to 2), giving a chord slope over the study interval; the slopes are
    regressed on ``[1, x]`` within each group and the centered coefficient
    vectors are reduced to their first principal direction.
    """
    t1, tm = data.endpoints()
    coefs = []
    for k in (1, 2):
        rows, slopes = [], []
        for r in data.group_records(k):
            if r.m < 2:
                continue
            deg = min(2, r.m - 1)
            c = np.polynomial.polynomial.polyfit(r.times, r.y, deg)
            fitted = np.polynomial.polynomial.polyval([t1, tm], c)
            slopes.append((fitted[1] - fitted[0]) / (tm - t1))
            rows.append(np.r_[1.0, r.x])
        if len(rows) <= data.p + 1:
            continue
        b, *_ = np.linalg.lstsq(np.asarray(rows), np.asarray(slopes), rcond=None)
        coefs.append(b[1:])
    if not coefs:
        return normalize_signature(np.ones(data.p))
    C = np.asarray(coefs)
    if C.shape[0] > 1:
        C = C - C.mean(axis=0)
    _, s, vt = np.linalg.svd(C, full_matrices=False)
    if s[0] <= 1e-12:
        return normalize_signature(np.ones(data.p))
    return normalize_signature(vt[0])


def _starts(problem: _Problem, data: TrialDataset, n_restarts: int, init) -> list[np.ndarray]:
    first = normalize_signature(init) if init is not None else initial_alpha(data)
    rng = np.random.default_rng(problem.options.seed)
    return [first] + [normalize_signature(rng.standard_normal(problem.p)) for _ in range(n_restarts)]


def _alternate(problem: _Problem, alpha0: np.ndarray):
    """Refit group models / Nelder–Mead update of alpha until successive directions align."""
    opts = problem.options
    max_outer = opts.max_outer or _DEFAULT_MAX_OUTER[problem.method]
    alpha = normalize_signature(alpha0)
    fits = problem.fit(alpha)
    trace: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_outer + 1):
        res = nelder_mead(problem.update_objective(fits, alpha), alpha, opts.nelder_mead)
        new = normalize_signature(res.x)
        trace.append(res.value)
        cos = _cos(new, alpha)
        alpha = new
        fits = problem.fit(alpha, warm=fits)
        if cos >= opts.cos_tol:
            converged = True
            break
    return alpha, fits, it, converged, trace


def _estimate_ats(data: TrialDataset, method: str, options: EstimationOptions, init=None) -> SignatureFit:
    problem = _Problem(data, method, options)
    n_restarts = 4 if options.n_restarts is None else options.n_restarts
    best = None
    for start in _starts(problem, data, n_restarts, init):
        alpha, fits, it, converged, trace = _alternate(problem, start)
        value = problem.criterion(fits, alpha)
        if best is None or value > best[0]:
            best = (value, alpha, fits, it, converged, trace)
    _, alpha, fits, it, converged, trace = best
    sig = Biosignature(alpha, method, it, converged, tuple(trace))
    return SignatureFit(
        sig, fits, problem.time_spec, problem.index_spec(alpha), problem.random_spec,
        problem.model_form, problem.t1, problem.tm,
    )


def _stationary_point(L1: np.ndarray, L2: np.ndarray) -> np.ndarray:
    """Maximizer ``-L2^{-1} L1^T / 2`` of ``L1 a + a^T L2 a``, ridge-regularized if needed."""
    try:
        cond = np.linalg.cond(L2)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > 1e12:
        lam = 1e-8 * abs(np.trace(L2)) or 1e-8
        warnings.warn(f"L2 is singular; solving with ridge {lam:.3g}", RuntimeWarning, stacklevel=3)
        L2 = L2 - lam * np.eye(L2.shape[0])
    return -0.5 * np.linalg.solve(L2, L1)


def _estimate_mle(data: TrialDataset, options: EstimationOptions, init=None) -> SignatureFit:
    problem = _Problem(data, "mle", options)
    max_outer = options.max_outer or _DEFAULT_MAX_OUTER["mle"]
    alpha = normalize_signature(init) if init is not None else initial_alpha(data)
    fits = problem.fit(alpha)
    ll = sum(f.loglik for f in fits)
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, max_outer + 1):
        _, L1, L2 = mle_components(fits, problem.pads, alpha, problem.time_spec, problem.random_spec)
        star = _stationary_point(L1, L2)
        if not np.all(np.isfinite(star)) or np.linalg.norm(star) < 1e-300:
            converged = True
            break
        target = normalize_signature(star)
        if target @ alpha < 0:
            target = -target
        accepted = None
        for j in range(options.max_halvings + 1):
            step = 0.5**j
            cand = normalize_signature(alpha + step * (target - alpha))
            cand_fits = problem.fit(cand, warm=fits)
            cand_ll = sum(f.loglik for f in cand_fits)
            if cand_ll >= ll - 1e-10 * max(1.0, abs(ll)):
                accepted = (cand, cand_fits, cand_ll)
                break
        if accepted is None:
            # no ascent along the segment: alpha is (numerically) stationary
            converged = True
            break
        cand, cand_fits, cand_ll = accepted
        cos = _cos(cand, alpha)
        alpha, fits, ll = cand, cand_fits, max(cand_ll, ll)
        trace.append(cand_ll)
        if cos >= options.cos_tol:
            converged = True
            break
    sig = Biosignature(alpha, "mle", it, converged, tuple(trace))
    return SignatureFit(
        sig, fits, problem.time_spec, None, problem.random_spec, "linear_index", problem.t1, problem.tm
    )


def fit_signature(
    data: TrialDataset,
    method: str,
    options: EstimationOptions | None = None,
    alpha=None,
) -> SignatureFit:
    """Estimate alpha with ``method`` and return it with the final group fits.

    ``method="fixed"`` skips estimation and fits the linear-index model at the
    supplied ``alpha`` (e.g. the generating direction, as a benchmark).
    ``alpha`` is otherwise used as the first starting value.
    """
    options = options or EstimationOptions()
    method = method.lower()
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")
    if method == "fixed":
        if alpha is None:
            raise ConfigError("method 'fixed' needs alpha")
        problem = _Problem(data, "pats", options)
        a = normalize_signature(alpha)
        fits = problem.fit(a)
        sig = Biosignature(a, "fixed", 0, True, ())
        return SignatureFit(sig, fits, problem.time_spec, None, problem.random_spec, "linear_index",
                            problem.t1, problem.tm)
    if method == "mle":
        return _estimate_mle(data, options, alpha)
    return _estimate_ats(data, method, options, alpha)


def estimate_npats(data: TrialDataset, options: EstimationOptions | None = None) -> Biosignature:
    return fit_signature(data, "npats", options).signature


def estimate_pats(data: TrialDataset, options: EstimationOptions | None = None) -> Biosignature:
    return fit_signature(data, "pats", options).signature


def estimate_mle(data: TrialDataset, options: EstimationOptions | None = None) -> Biosignature:
    return fit_signature(data, "mle", options).signature
