"""Per-group Gaussian linear mixed models for a fixed index direction.

The model for one subject is ``y = X beta + Z b + e`` with ``b ~ N(0, D)`` and
``e ~ N(0, sigma2 I)``. Variance components are estimated by maximum
likelihood with the fixed effects and ``sigma2`` profiled out: writing
``D = sigma2 * L L^T`` the marginal covariance is ``sigma2 * H`` with
``H = Z L L^T Z^T + I``, and

    H^{-1} = I - Z L M^{-1} L^T Z^T,   M = I_q + L^T Z^T Z L,   |H| = |M|.

All per-subject work therefore reduces to q-by-q inverses of ``M`` built from
precomputed cross-products.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, optimize

from .basis import BasisSpec, basis_matrix
from .data import PaddedGroup, SubjectRecord, pad_records
from .errors import (
    ConvergenceError,
    DataError,
    RankDeficiencyError,
    UnderIdentifiedError,
)

__all__ = [
    "GroupFit",
    "GroupGLS",
    "marginal_covariance",
    "gls_fixed_effects",
    "fixed_design",
    "fit_group",
    "log_likelihood",
    "subject_covariances",
    "subject_precisions",
]

logger = logging.getLogger(__name__)

MODEL_FORMS = ("tensor", "linear_index")
SIGMA2_FLOOR = 1e-8
LOG2PI = np.log(2.0 * np.pi)


def marginal_covariance(Z, D, sigma2: float) -> np.ndarray:
    """Return ``Z D Z^T + sigma2 I``."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    D = np.atleast_2d(np.asarray(D, dtype=float))
    if D.shape != (Z.shape[1], Z.shape[1]):
        raise ValueError(f"D has shape {D.shape}, expected {(Z.shape[1],) * 2}")
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    V = Z @ D @ Z.T
    V = 0.5 * (V + V.T)
    V[np.diag_indices_from(V)] += sigma2
    return V


def _solve_normal(A: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    try:
        factor = linalg.cho_factor(A, lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise RankDeficiencyError(
            f"normal-equations matrix of the {what} design is singular "
            f"(shape {A.shape}, rank {np.linalg.matrix_rank(A)})"
        ) from None
    diag = np.abs(np.diag(factor[0]))
    if diag.min() <= 1e-10 * max(diag.max(), 1.0):
        raise RankDeficiencyError(
            f"normal-equations matrix of the {what} design is numerically singular"
        )
    return linalg.cho_solve(factor, b, check_finite=False)


def gls_fixed_effects(X_blocks, y_blocks, V_blocks) -> np.ndarray:
    """Block-diagonal GLS: ``(sum X^T V^-1 X)^-1 sum X^T V^-1 y``."""
    if not (len(X_blocks) == len(y_blocks) == len(V_blocks)) or not X_blocks:
        raise ValueError("X, y and V blocks must be non-empty and of equal count")
    P = np.atleast_2d(X_blocks[0]).shape[1]
    A = np.zeros((P, P))
    b = np.zeros(P)
    for X, y, V in zip(X_blocks, y_blocks, V_blocks):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        V = np.atleast_2d(np.asarray(V, dtype=float))
        if X.shape[0] != y.size or V.shape != (y.size, y.size) or X.shape[1] != P:
            raise ValueError("non-conformable GLS block")
        c = linalg.cho_factor(V, lower=True)
        A += X.T @ linalg.cho_solve(c, X)
        b += X.T @ linalg.cho_solve(c, y)
    return _solve_normal(0.5 * (A + A.T), b, "GLS")


@dataclass(frozen=True, eq=False)
class GroupFit:
    """Fitted mixed model for one treatment group.

    ``coef`` is ``eta`` for the tensor form and ``[beta, Gamma]`` for the
    linear-index form.
    """

    model_form: str
    coef: np.ndarray
    D: np.ndarray
    sigma2: float
    loglik: float
    converged: bool = True
    n_iter: int = 0
    theta: np.ndarray = field(default=None, repr=False)

    @property
    def eta(self) -> np.ndarray:
        return self.coef

    @property
    def beta(self) -> np.ndarray:
        self._require_linear()
        return self.coef[: self.coef.size // 2]

    @property
    def gamma(self) -> np.ndarray:
        self._require_linear()
        return self.coef[self.coef.size // 2 :]

    def _require_linear(self):
        if self.model_form != "linear_index":
            raise AttributeError("beta/gamma exist only for the linear_index model form")

    def to_dict(self) -> dict:
        return {
            "model_form": self.model_form,
            "coef": self.coef.tolist(),
            "D": self.D.tolist(),
            "sigma2": float(self.sigma2),
            "loglik": float(self.loglik),
            "converged": bool(self.converged),
            "n_iter": int(self.n_iter),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroupFit":
        return cls(
            model_form=d["model_form"],
            coef=np.asarray(d["coef"], dtype=float),
            D=np.asarray(d["D"], dtype=float),
            sigma2=float(d["sigma2"]),
            loglik=float(d["loglik"]),
            converged=bool(d.get("converged", True)),
            n_iter=int(d.get("n_iter", 0)),
        )


def _as_padded(records) -> PaddedGroup:
    if isinstance(records, PaddedGroup):
        return records
    return pad_records(list(records))


def fixed_design(
    pad: PaddedGroup,
    alpha,
    time_spec: BasisSpec,
    index_spec: BasisSpec | None,
    model_form: str,
) -> tuple[np.ndarray, np.ndarray]:
    """Padded fixed-effect design ``(n, m_max, P)`` and time rows ``(n, m_max, d1)``."""
    if model_form not in MODEL_FORMS:
        raise ValueError(f"unknown model form {model_form!r}")
    G = pad.basis_rows(lambda t: basis_matrix(time_spec, t))
    u = pad.x @ np.asarray(alpha, dtype=float)
    if model_form == "linear_index":
        X = np.concatenate([G, u[:, None, None] * G], axis=2)
    else:
        a = basis_matrix(index_spec, u)
        n, m, d1 = G.shape
        X = (G[:, :, :, None] * a[:, None, None, :]).reshape(n, m, d1 * a.shape[1])
    return X, G


def _n_lower(q: int) -> int:
    return q * (q + 1) // 2


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return np.where(y > 30, y, np.log(np.expm1(np.minimum(y, 30))))


def _theta_to_factor(theta: np.ndarray, q: int) -> np.ndarray:
    L = np.zeros((q, q))
    L[np.diag_indices(q)] = _softplus(theta[:q])
    L[np.tril_indices(q, -1)] = theta[q:]
    return L


def _factor_to_theta(L: np.ndarray) -> np.ndarray:
    q = L.shape[0]
    diag = np.maximum(np.abs(np.diag(L)), 1e-12)
    return np.r_[_softplus_inv(diag), L[np.tril_indices(q, -1)]]


def _initial_theta(pad: PaddedGroup, Z: np.ndarray) -> np.ndarray:
    """Start from sigma2 = pooled per-subject OLS residual variance and D = 0.1 I."""
    q = Z.shape[2]
    rss, dof = 0.0, 0
    for i in range(pad.n):
        obs = pad.mask[i]
        if obs.sum() <= q:
            continue
        Zi, yi = Z[i, obs], pad.y[i, obs]
        coef, *_ = np.linalg.lstsq(Zi, yi, rcond=None)
        rss += float(np.sum((yi - Zi @ coef) ** 2))
        dof += int(obs.sum()) - np.linalg.matrix_rank(Zi)
    if dof > 0 and rss > 0:
        s2 = rss / dof
    else:
        s2 = float(np.var(pad.y[pad.mask])) or 1.0
    s2 = max(s2, SIGMA2_FLOOR)
    return _factor_to_theta(np.sqrt(0.1 / s2) * np.eye(q))


class _ProfiledDeviance:
    """Profiled ML log-likelihood (and gradient) in the relative covariance factor.

    ``Z`` is expected to be column-scaled by the caller; the factor refers to
    that scaled design.
    """

    def __init__(self, X: np.ndarray, Z: np.ndarray, y: np.ndarray, mask: np.ndarray, what: str):
        self.q = Z.shape[2]
        self.P = X.shape[2]
        self.N = int(mask.sum())
        self.what = what
        self.S_XX = np.einsum("nmi,nmj->ij", X, X)
        self.S_Xy = np.einsum("nmi,nm->i", X, y)
        self.S_yy = float(np.sum(y * y))
        self.ZX = np.einsum("nmi,nmj->nij", Z, X)
        self.Zy = np.einsum("nmi,nm->ni", Z, y)
        self.ZZ = np.einsum("nmi,nmj->nij", Z, Z)
        self._eye = np.eye(self.q)
        self._tril = np.tril_indices(self.q, -1)

    def _solve(self, theta):
        L = _theta_to_factor(theta, self.q)
        M = L.T @ self.ZZ @ L + self._eye
        Minv = np.linalg.inv(M)
        logdet = np.linalg.slogdet(M)[1].sum()
        LZX = L.T @ self.ZX
        LZy = np.einsum("ij,ni->nj", L, self.Zy)
        MLZX = Minv @ LZX
        XHX = self.S_XX - np.einsum("nqi,nqj->ij", LZX, MLZX)
        XHy = self.S_Xy - np.einsum("nqi,nq->i", MLZX, LZy)
        yHy = self.S_yy - np.einsum("nq,nqr,nr->", LZy, Minv, LZy)
        coef = _solve_normal(0.5 * (XHX + XHX.T), XHy, self.what)
        quad = max(float(yHy - coef @ XHy), 0.0)
        sigma2 = max(quad / self.N, SIGMA2_FLOOR)
        ll = -0.5 * self.N * (LOG2PI + np.log(sigma2)) - 0.5 * logdet - 0.5 * quad / sigma2
        return ll, coef, sigma2, L, Minv

    def evaluate(self, theta):
        """Return (loglik, coef, sigma2, L)."""
        ll, coef, sigma2, L, _ = self._solve(theta)
        return ll, coef, sigma2, L

    def value_and_grad(self, theta):
        """Negative log-likelihood and its gradient, for minimization."""
        try:
            ll, coef, sigma2, L, Minv = self._solve(theta)
        except (np.linalg.LinAlgError, RankDeficiencyError):
            return np.inf, np.zeros_like(theta)
        if not np.isfinite(ll):
            return np.inf, np.zeros_like(theta)
        # Z^T H^-1 = Z^T - ZZ L M^-1 L^T Z^T, applied to residuals and to Z
        Zr = self.Zy - self.ZX @ coef
        ZZL = self.ZZ @ L
        K = ZZL @ Minv
        v = Zr - np.einsum("nij,nj->ni", K, np.einsum("ji,nj->ni", L, Zr))
        C = self.ZZ - K @ ZZL.transpose(0, 2, 1)
        gL = (np.einsum("ni,nj->ij", v, v) / sigma2 - C.sum(axis=0)) @ L
        grad = np.r_[np.diag(gL) * _sigmoid(theta[: self.q]), gL[self._tril]]
        return -ll, -grad

    def objective(self, theta):
        try:
            ll = self.evaluate(theta)[0]
        except (np.linalg.LinAlgError, RankDeficiencyError):
            return np.inf
        return -ll if np.isfinite(ll) else np.inf


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _column_scales(Z: np.ndarray, mask: np.ndarray) -> np.ndarray:
    s = np.sqrt(np.sum(Z**2, axis=(0, 1)) / max(int(mask.sum()), 1))
    return np.where(s > 0, s, 1.0)


def fit_group(
    records: Sequence[SubjectRecord] | PaddedGroup,
    alpha,
    time_spec: BasisSpec,
    index_spec: BasisSpec | None = None,
    random_spec: BasisSpec | None = None,
    model_form: str = "linear_index",
    init: GroupFit | np.ndarray | None = None,
    max_iter: int = 500,
    tol: float = 1e-8,
) -> GroupFit:
    """Maximum-likelihood fit of one group's mixed model at a fixed ``alpha``.

    Only observed (time, outcome) pairs enter the likelihood. ``init`` may be a
    previous :class:`GroupFit` (warm start) or raw optimizer parameters.

    Raises
    ------
    UnderIdentifiedError
        Fewer observations than parameters, or too few subjects with repeated
        measurements to identify ``D``.
    RankDeficiencyError
        The fixed-effect design is singular.
    ConvergenceError
        The optimizer exhausted ``max_iter``; ``err.best`` holds the best fit.
    """
    random_spec = random_spec or BasisSpec.polynomial(2)
    if model_form == "tensor" and index_spec is None:
        raise ValueError("tensor model form requires an index basis")
    pad = _as_padded(records)
    X, _ = fixed_design(pad, alpha, time_spec, index_spec, model_form)
    Z = pad.basis_rows(lambda t: basis_matrix(random_spec, t))
    scales = _column_scales(Z, pad.mask)
    Z = Z / scales
    q = Z.shape[2]
    n_params = X.shape[2] + _n_lower(q) + 1
    repeated = int(np.sum(pad.mask.sum(axis=1) >= 2))
    if pad.n_obs < n_params:
        raise UnderIdentifiedError(
            f"{pad.n_obs} observations for {n_params} parameters ({model_form} model)"
        )
    if repeated < q + 1:
        raise UnderIdentifiedError(
            f"only {repeated} subjects with >= 2 visits; need at least {q + 1}"
        )

    prof = _ProfiledDeviance(X, Z, pad.y, pad.mask, model_form)
    prof.evaluate(np.zeros(_n_lower(q)))  # surfaces rank deficiency before optimizing

    if isinstance(init, GroupFit) and init.theta is not None and init.theta.size == _n_lower(q):
        theta0 = np.array(init.theta, dtype=float)
    elif isinstance(init, np.ndarray) and init.size == _n_lower(q):
        theta0 = np.array(init, dtype=float)
    else:
        theta0 = _initial_theta(pad, Z)
    f0 = prof.objective(theta0)
    if not np.isfinite(f0):
        theta0 = _initial_theta(pad, Z)
        f0 = prof.objective(theta0)

    res = optimize.minimize(
        prof.value_and_grad,
        theta0,
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter, "ftol": tol, "gtol": 1e-6},
    )
    best_theta, best_f, n_iter = res.x, res.fun, int(res.nit)
    converged = bool(res.success) or res.status == 2
    hit_limit = res.status == 1
    if not res.success:
        polish = optimize.minimize(
            prof.objective,
            best_theta,
            method="Nelder-Mead",
            options={"maxfev": 200 * theta0.size, "xatol": 1e-6, "fatol": tol * max(1.0, abs(best_f))},
        )
        n_iter += int(polish.nit)
        if polish.fun < best_f:
            best_theta, best_f = polish.x, polish.fun
        converged = converged or bool(polish.success)
        hit_limit = hit_limit and not polish.success
    if not (best_f <= f0):
        best_theta, best_f = theta0, f0

    ll, coef, sigma2, L = prof.evaluate(best_theta)
    D = sigma2 * (L @ L.T) / np.outer(scales, scales)
    fit = GroupFit(
        model_form=model_form,
        coef=coef,
        D=0.5 * (D + D.T),
        sigma2=float(sigma2),
        loglik=float(ll),
        converged=converged,
        n_iter=n_iter,
        theta=np.asarray(best_theta, dtype=float),
    )
    if hit_limit:
        raise ConvergenceError(
            f"variance components did not converge within {max_iter} iterations", best=fit
        )
    return fit


def subject_covariances(pad: PaddedGroup, fit: GroupFit, random_spec: BasisSpec) -> np.ndarray:
    """Padded marginal covariances ``Psi_i``, shape ``(n, m_max, m_max)``.

    Padding slots get a unit diagonal and no coupling; their design rows are
    zero, so they contribute nothing to quadratic forms or determinants.
    """
    Z = pad.basis_rows(lambda t: basis_matrix(random_spec, t))
    Psi = Z @ fit.D @ Z.transpose(0, 2, 1)
    Psi = 0.5 * (Psi + Psi.transpose(0, 2, 1))
    m = pad.mask.shape[1]
    Psi[:, np.arange(m), np.arange(m)] += np.where(pad.mask, fit.sigma2, 1.0)
    return Psi


def subject_precisions(pad: PaddedGroup, fit: GroupFit, random_spec: BasisSpec) -> np.ndarray:
    """Padded inverse marginal covariances ``Psi_i^{-1}``."""
    return np.linalg.inv(subject_covariances(pad, fit, random_spec))


def log_likelihood(
    fit: GroupFit,
    records: Sequence[SubjectRecord] | PaddedGroup,
    alpha,
    time_spec: BasisSpec,
    index_spec: BasisSpec | None = None,
    random_spec: BasisSpec | None = None,
) -> float:
    """Gaussian marginal log-likelihood of ``records`` under ``fit`` at ``alpha``.

    The covariate density is not included.
    """
    random_spec = random_spec or BasisSpec.polynomial(2)
    pad = _as_padded(records)
    X, _ = fixed_design(pad, alpha, time_spec, index_spec, fit.model_form)
    if X.shape[2] != fit.coef.size:
        raise DataError("fit coefficients do not match the design")
    Z = pad.basis_rows(lambda t: basis_matrix(random_spec, t))
    total = 0.0
    for i in range(pad.n):
        obs = pad.mask[i]
        if not obs.any():
            continue
        Psi = marginal_covariance(Z[i, obs], fit.D, fit.sigma2)
        r = pad.y[i, obs] - X[i, obs] @ fit.coef
        c = linalg.cho_factor(Psi, lower=True)
        logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
        total += -0.5 * obs.sum() * LOG2PI - 0.5 * logdet - 0.5 * r @ linalg.cho_solve(c, r)
    return float(total)


class GroupGLS:
    """Closed-form GLS re-solves of one group's fixed effects for new index values.

    Covariances are frozen at a fitted model; only the index direction moves.
    With per-subject ``A_i = G_i^T Psi_i^-1 G_i`` and ``c_i = G_i^T Psi_i^-1 y_i``:

    * tensor form: ``X_i^T Psi^-1 X_i = A_i ⊗ a_i a_i^T`` and ``X_i^T Psi^-1 y = c_i ⊗ a_i``;
    * linear-index form uses ``a_i = (1, u_i)`` with block layout ``[beta, Gamma]``,
      i.e. ``a_i a_i^T ⊗ A_i``.
    """

    def __init__(self, pad: PaddedGroup, fit: GroupFit, time_spec: BasisSpec, random_spec: BasisSpec):
        G = pad.basis_rows(lambda t: basis_matrix(time_spec, t))
        Pinv = subject_precisions(pad, fit, random_spec)
        PG = Pinv @ G
        self.A = np.einsum("nmi,nmj->nij", G, PG)
        self.A = 0.5 * (self.A + self.A.transpose(0, 2, 1))
        self.c = np.einsum("nmi,nm->ni", PG, pad.y)
        self.x = pad.x
        self.model_form = fit.model_form
        self.d1 = G.shape[2]

    def solve(self, index_rows: np.ndarray) -> np.ndarray:
        """Coefficients given per-subject index basis rows ``(n, d2)``."""
        a = np.asarray(index_rows, dtype=float)
        n, d2 = a.shape
        d1 = self.d1
        aa = a[:, :, None] * a[:, None, :]
        # (d1*d1, n) @ (n, d2*d2) then reorder to the Kronecker layout
        S = (self.A.reshape(n, d1 * d1).T @ aa.reshape(n, d2 * d2)).reshape(d1, d1, d2, d2)
        r = self.c.T @ a  # (d1, d2)
        if self.model_form == "tensor":
            lhs = S.transpose(0, 2, 1, 3).reshape(d1 * d2, d1 * d2)
            rhs = r.reshape(-1)
        else:
            lhs = S.transpose(2, 0, 3, 1).reshape(d1 * d2, d1 * d2)
            rhs = r.T.reshape(-1)
        return _solve_normal(0.5 * (lhs + lhs.T), rhs, self.model_form)

    def solve_alpha(self, alpha, index_spec: BasisSpec | None = None) -> np.ndarray:
        u = self.x @ np.asarray(alpha, dtype=float)
        if self.model_form == "linear_index":
            rows = np.column_stack([np.ones_like(u), u])
        else:
            rows = basis_matrix(index_spec, u)
        return self.solve(rows)


