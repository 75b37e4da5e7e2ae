"""Treatment rules built from fitted trajectory models, and their evaluation.

A rule assigns each subject to the group whose average tangent slope at
``u = alpha^T x`` is preferred (larger by default). Evaluation follows the
usual empirical-value recipe: average an outcome over subjects whose
randomized assignment happens to agree with the rule.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .basis import BasisSpec
from .data import TrialDataset
from .errors import ConfigError, DataError, StratificationError, UndefinedValueError
from .mixed import GroupFit
from .signature import (
    Biosignature,
    EstimationOptions,
    SignatureFit,
    _slope_vector,
    ats_nonparametric,
    fit_signature,
)

__all__ = [
    "FittedITR",
    "EvalReport",
    "CVResult",
    "fit_itr",
    "itr_from_fit",
    "decide",
    "decide_many",
    "empirical_value",
    "ipwe",
    "pcd",
    "uniform_policy_value",
    "oriented_outcomes",
    "evaluate",
    "stratified_folds",
    "cross_validate",
]

PREFERENCES = ("larger_ats", "smaller_ats")


def _check_prefer(prefer: str) -> str:
    aliases = {"larger": "larger_ats", "smaller": "smaller_ats"}
    prefer = aliases.get(prefer, prefer)
    if prefer not in PREFERENCES:
        raise ConfigError(f"prefer must be one of {PREFERENCES}, got {prefer!r}")
    return prefer


@dataclass(frozen=True, eq=False)
class FittedITR:
    signature: Biosignature
    group_fits: tuple[GroupFit, GroupFit]
    time_spec: BasisSpec
    index_spec: BasisSpec | None
    t1: float
    tm: float
    prefer: str = "larger_ats"
    random_spec: BasisSpec = field(default_factory=lambda: BasisSpec.polynomial(2))

    def __post_init__(self):
        if not self.t1 < self.tm:
            raise DataError(f"rule needs t1 < tm, got {self.t1}, {self.tm}")
        if len(self.group_fits) != 2:
            raise DataError("a rule needs exactly two group fits")
        forms = {f.model_form for f in self.group_fits}
        if len(forms) != 1:
            raise DataError("group fits use different model forms")
        if forms == {"tensor"} and self.index_spec is None:
            raise DataError("tensor-form fits need an index basis")
        object.__setattr__(self, "prefer", _check_prefer(self.prefer))
        object.__setattr__(self, "group_fits", tuple(self.group_fits))

    @property
    def model_form(self) -> str:
        return self.group_fits[0].model_form

    @property
    def alpha(self) -> np.ndarray:
        return self.signature.alpha

    def ats(self, u) -> np.ndarray:
        """ATS of both groups at index values ``u``; shape ``(len(u), 2)``."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if self.model_form == "tensor":
            cols = [
                ats_nonparametric(f.eta, self.time_spec, self.index_spec, u, self.t1, self.tm)
                for f in self.group_fits
            ]
        else:
            dg = _slope_vector(self.time_spec, self.t1, self.tm)
            cols = [dg @ f.beta + u * (dg @ f.gamma) for f in self.group_fits]
        return np.column_stack(cols)

    def to_dict(self) -> dict:
        return {
            "signature": self.signature.to_dict(),
            "group_fits": [f.to_dict() for f in self.group_fits],
            "time_spec": self.time_spec.to_dict(),
            "index_spec": None if self.index_spec is None else self.index_spec.to_dict(),
            "random_spec": self.random_spec.to_dict(),
            "t1": self.t1,
            "tm": self.tm,
            "prefer": self.prefer,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedITR":
        return cls(
            signature=Biosignature.from_dict(d["signature"]),
            group_fits=tuple(GroupFit.from_dict(f) for f in d["group_fits"]),
            time_spec=BasisSpec.from_dict(d["time_spec"]),
            index_spec=None if d.get("index_spec") is None else BasisSpec.from_dict(d["index_spec"]),
            t1=float(d["t1"]),
            tm=float(d["tm"]),
            prefer=d.get("prefer", "larger_ats"),
            random_spec=BasisSpec.from_dict(d["random_spec"]) if "random_spec" in d else BasisSpec.polynomial(2),
        )


def itr_from_fit(fit: SignatureFit, prefer: str = "larger_ats") -> FittedITR:
    return FittedITR(
        fit.signature, fit.fits, fit.time_spec, fit.index_spec, fit.t1, fit.tm, prefer, fit.random_spec
    )


def fit_itr(
    data: TrialDataset,
    method: str,
    options: EstimationOptions | None = None,
    prefer: str = "larger_ats",
    alpha=None,
) -> FittedITR:
    return itr_from_fit(fit_signature(data, method, options, alpha), prefer)


def decide_many(itr: FittedITR, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != itr.alpha.size:
        raise DataError(f"covariates have {X.shape[1]} columns, rule expects {itr.alpha.size}")
    ats = itr.ats(X @ itr.alpha)
    diff = ats[:, 1] - ats[:, 0]
    if itr.prefer == "smaller_ats":
        diff = -diff
    return np.where(diff > 0, 2, 1)


def decide(itr: FittedITR, x) -> int:
    """Group (1 or 2) with the preferred ATS at ``alpha^T x``; exact ties go to 1."""
    x = np.asarray(x, dtype=float).ravel()
    return int(decide_many(itr, x[None, :])[0])


def _agreement(decisions, assignments) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(decisions).ravel()
    a = np.asarray(assignments).ravel()
    if d.shape != a.shape:
        raise DataError(f"{d.size} decisions but {a.size} assignments")
    return d, a


def empirical_value(decisions, assignments, outcomes) -> float:
    """Mean outcome over subjects whose assignment agrees with the decision."""
    d, a = _agreement(decisions, assignments)
    u = np.asarray(outcomes, dtype=float).ravel()
    if u.shape != d.shape:
        raise DataError(f"{d.size} decisions but {u.size} outcomes")
    agree = d == a
    if not agree.any():
        raise UndefinedValueError("no subject's assignment agrees with the rule")
    return float(np.sum(u * agree) / np.sum(agree))


def ipwe(decisions, assignments, change_scores) -> float:
    """Same estimator as :func:`empirical_value`, with change scores as outcome."""
    return empirical_value(decisions, assignments, change_scores)


def pcd(decisions, oracle) -> float:
    d, o = _agreement(decisions, oracle)
    if d.size == 0:
        raise UndefinedValueError("no decisions to compare")
    return float(np.mean(d == o))


def uniform_policy_value(group: int, assignments, outcomes) -> float:
    if group not in (1, 2):
        raise ConfigError(f"group must be 1 or 2, got {group}")
    a = np.asarray(assignments).ravel()
    return empirical_value(np.full(a.shape, group), a, outcomes)


def oriented_outcomes(change_scores, prefer: str = "larger_ats") -> np.ndarray:
    """Change scores signed so that larger is better under ``prefer``."""
    cs = np.asarray(change_scores, dtype=float)
    return cs if _check_prefer(prefer) == "larger_ats" else -cs


@dataclass(frozen=True)
class EvalReport:
    value: float
    pcd: float | None
    ipwe: float
    n_assigned: tuple[int, int]
    outcome: str = "noiseless"
    n_truncated: int = 0

    def __post_init__(self):
        if self.pcd is not None and not 0.0 <= self.pcd <= 1.0:
            raise ValueError("pcd must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "pcd": self.pcd,
            "ipwe": self.ipwe,
            "n_assigned": list(self.n_assigned),
            "outcome": self.outcome,
            "n_truncated": self.n_truncated,
        }


def _observed_outcomes(test: TrialDataset, prefer: str) -> tuple[np.ndarray, int]:
    cs, truncated = test.observed_change_scores()
    if np.isnan(cs).any():
        raise DataError("some test subjects have no observations")
    return oriented_outcomes(cs, prefer), int(truncated.sum())


def _noiseless_outcomes(test: TrialDataset, prefer: str) -> np.ndarray:
    pot = test.potential_change_scores()
    assigned = pot[np.arange(test.n), test.groups - 1]
    return oriented_outcomes(assigned, prefer)


def evaluate(itr: FittedITR, test: TrialDataset, outcome: str = "noiseless") -> EvalReport:
    """Value, PCD and IPWE of ``itr`` on ``test``.

    ``outcome="noiseless"`` (needs potential trajectories) scores the value
    with the noiseless change score of each subject's assigned arm;
    ``"observed"`` uses the measured change score. IPWE always uses observed
    change scores. PCD is reported only when potential trajectories exist.
    """
    if outcome not in ("noiseless", "observed"):
        raise ConfigError(f"outcome must be 'noiseless' or 'observed', got {outcome!r}")
    decisions = decide_many(itr, test.X)
    groups = test.groups
    observed, n_trunc = _observed_outcomes(test, itr.prefer)
    ipwe_value = ipwe(decisions, groups, observed)
    oracle_pcd = None
    if test.potential is not None:
        from .simulate import oracle_decisions

        prefer = "larger" if itr.prefer == "larger_ats" else "smaller"
        oracle_pcd = pcd(decisions, oracle_decisions(test, prefer))
    if outcome == "noiseless":
        value = empirical_value(decisions, groups, _noiseless_outcomes(test, itr.prefer))
    else:
        value = ipwe_value
    n_assigned = (int(np.sum(decisions == 1)), int(np.sum(decisions == 2)))
    return EvalReport(value, oracle_pcd, ipwe_value, n_assigned, outcome, n_trunc)


# cross-validation -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CVResult:
    """Fold-level IPWEs, shape ``(repeats, folds)``; NaN marks an undefined fold.

    ``uniform`` holds the same table for the all-group-1 and all-group-2 rules.
    """

    method: str
    ipwe: np.ndarray
    uniform: dict[int, np.ndarray]
    alphas: np.ndarray
    converged: np.ndarray

    def summary(self, values=None) -> dict:
        v = self.ipwe if values is None else values
        v = v[np.isfinite(v)]
        if v.size == 0:
            return {"mean": None, "median": None, "sd": None, "n": 0}
        return {
            "mean": float(v.mean()),
            "median": float(np.median(v)),
            "sd": float(v.std(ddof=1)) if v.size > 1 else 0.0,
            "n": int(v.size),
        }

    @property
    def mean(self) -> float:
        return self.summary()["mean"]

    @property
    def median(self) -> float:
        return self.summary()["median"]

    @property
    def sd(self) -> float:
        return self.summary()["sd"]

    def to_dict(self) -> dict:
        def table(a):
            return [[None if not np.isfinite(v) else float(v) for v in row] for row in a]

        return {
            "method": self.method,
            "ipwe": table(self.ipwe),
            "summary": self.summary(),
            "uniform": {
                f"all_group_{k}": {"ipwe": table(v), "summary": self.summary(v)}
                for k, v in sorted(self.uniform.items())
            },
            "alphas": self.alphas.tolist(),
            "converged": self.converged.tolist(),
        }


def stratified_folds(groups, folds: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle within each group and deal subjects to folds round-robin.

    Every fold receives members of both groups, or :class:`StratificationError`.
    """
    groups = np.asarray(groups)
    if folds < 2:
        raise ConfigError("need at least 2 folds")
    if folds > groups.size:
        raise ConfigError(f"{folds} folds for {groups.size} subjects")
    assignment = np.empty(groups.size, dtype=int)
    offset = 0
    for k in (1, 2):
        idx = rng.permutation(np.flatnonzero(groups == k))
        assignment[idx] = (offset + np.arange(idx.size)) % folds
        offset += idx.size
    out = [np.flatnonzero(assignment == f) for f in range(folds)]
    for f, idx in enumerate(out):
        present = set(groups[idx].tolist())
        if present != {1, 2}:
            raise StratificationError(f"fold {f} lacks group {sorted({1, 2} - present)}")
    return out


def _cv_job(args):
    data, method, options, prefer, train_idx, test_idx, seed = args
    opts = replace(options, seed=seed)
    itr = fit_itr(data.subset(train_idx), method, opts, prefer)
    test = data.subset(test_idx)
    cs, _ = test.observed_change_scores()
    u = oriented_outcomes(cs, prefer)
    d = decide_many(itr, test.X)
    g = test.groups
    try:
        value = ipwe(d, g, u)
    except UndefinedValueError:
        value = np.nan
    uniform = tuple(uniform_policy_value(k, g, u) for k in (1, 2))
    return value, uniform, itr.alpha, itr.signature.converged


def cross_validate(
    data: TrialDataset,
    method: str,
    folds: int = 10,
    repeats: int = 1,
    seed: int = 0,
    options: EstimationOptions | None = None,
    prefer: str = "larger_ats",
    outcome: str = "change_score",
    workers: int = 1,
) -> CVResult:
    """Repeated stratified k-fold estimate of the IPWE distribution.

    Split ``r`` is drawn from the stream ``(seed, r)`` and the estimator in
    fold ``f`` of split ``r`` is seeded from ``(seed, r, f)``, so results do not
    depend on ``workers``.
    """
    if outcome != "change_score":
        raise ConfigError("only the change-score outcome is supported")
    if repeats < 1:
        raise ConfigError("repeats must be positive")
    prefer = _check_prefer(prefer)
    options = options or EstimationOptions()
    groups = data.groups
    jobs = []
    for r in range(repeats):
        rng = np.random.default_rng(np.random.SeedSequence([seed, r]))
        split = stratified_folds(groups, folds, rng)
        for f, test_idx in enumerate(split):
            train_idx = np.setdiff1d(np.arange(data.n), test_idx)
            job_seed = int(np.random.SeedSequence([seed, r, f]).generate_state(1)[0])
            jobs.append((data, method, options, prefer, train_idx, test_idx, job_seed))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cv_job, jobs))
    else:
        results = [_cv_job(j) for j in jobs]
    shape = (repeats, folds)
    values = np.array([r[0] for r in results], dtype=float).reshape(shape)
    uniform = {k: np.array([r[1][k - 1] for r in results]).reshape(shape) for k in (1, 2)}
    alphas = np.array([r[2] for r in results]).reshape(shape + (data.p,))
    converged = np.array([r[3] for r in results]).reshape(shape)
    return CVResult(method, values, uniform, alphas, converged)
