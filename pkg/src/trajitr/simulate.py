"""Simulated two-arm longitudinal trials with known optimal decisions.

Each subject gets potential trajectories under both arms (fixed effects plus
arm-specific random effects, no measurement error); the observed arm is
randomized 1:1 and measured with noise, and missingness is applied last.
The oracle decision is the arm with the larger noiseless change score.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import SubjectRecord, TrialDataset
from .errors import ConfigError
from .signature import normalize_signature

__all__ = [
    "BETA_1",
    "BETA_2",
    "D_1",
    "D_2",
    "MissingnessSpec",
    "SimScenario",
    "covariate_mean",
    "covariate_cov",
    "sample_covariates",
    "true_alpha",
    "gamma_pair",
    "nonquadratic_mean",
    "simulate",
    "simulate_quadratic",
    "simulate_nonquadratic",
    "apply_mcar",
    "apply_dropout",
    "apply_missingness",
    "oracle_decisions",
]

BETA_1 = np.array([20.0, 3.0, -0.5])
BETA_2 = np.array([20.0, 2.3, -0.4])
D_1 = np.array([[0.5, -0.1, -0.01], [-0.1, 0.5, -0.01], [-0.01, -0.01, 0.01]])
D_2 = np.array([[0.5, -0.12, -0.01], [-0.12, 0.5, -0.01], [-0.01, -0.01, 0.01]])
DEFAULT_TIMES = tuple(float(t) for t in range(8))
DROPOUT_PAPER = (0.5, 0.3, 0.1, 0.05, 0.05)

# stream labels; each stochastic stage draws from its own substream
_STREAMS = ("covariates", "assignment", "random_effects", "noise", "missingness")


@dataclass(frozen=True)
class MissingnessSpec:
    kind: str = "none"
    rate: float = 0.0
    proportions: tuple[float, ...] = DROPOUT_PAPER

    def __post_init__(self):
        if self.kind not in ("none", "mcar", "dropout"):
            raise ConfigError(f"unknown missingness kind {self.kind!r}")
        if self.kind == "mcar" and not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"MCAR rate must lie in [0, 1), got {self.rate}")
        if self.kind == "dropout":
            props = np.asarray(self.proportions, dtype=float)
            if props.size != 5 or np.any(props < 0) or abs(props.sum() - 1.0) > 1e-12:
                raise ConfigError("dropout needs 5 nonnegative proportions summing to 1")

    @classmethod
    def none(cls) -> "MissingnessSpec":
        return cls("none")

    @classmethod
    def mcar(cls, rate: float = 0.4) -> "MissingnessSpec":
        return cls("mcar", rate=float(rate))

    @classmethod
    def dropout(cls, proportions=DROPOUT_PAPER) -> "MissingnessSpec":
        return cls("dropout", proportions=tuple(float(p) for p in proportions))

    @property
    def label(self) -> str:
        return self.kind

    def to_dict(self) -> dict:
        if self.kind == "mcar":
            return {"kind": "mcar", "rate": self.rate}
        if self.kind == "dropout":
            return {"kind": "dropout", "proportions": list(self.proportions)}
        return {"kind": "none"}

    @classmethod
    def from_dict(cls, d: dict | str | None) -> "MissingnessSpec":
        if d is None:
            return cls.none()
        if isinstance(d, str):
            d = {"kind": d}
        kind = d.get("kind", "none")
        if kind == "mcar":
            return cls.mcar(d.get("rate", 0.4))
        if kind == "dropout":
            return cls.dropout(d.get("proportions", DROPOUT_PAPER))
        return cls(kind)


@dataclass(frozen=True)
class SimScenario:
    """Simulation settings.

    ``sigma2`` is the measurement-error variance; ``shared_random_effects``
    draws one standard-normal vector per subject and colors it with each
    arm's covariance instead of drawing independently per arm.
    """

    kind: str = "quadratic"
    p: int = 2
    n_per_group: int = 100
    theta_degrees: float = 5.0
    times: tuple[float, ...] = DEFAULT_TIMES
    seed: int = 0
    missingness: MissingnessSpec = field(default_factory=MissingnessSpec)
    sigma2: float = 1.0
    shared_random_effects: bool = False

    def __post_init__(self):
        if self.kind not in ("quadratic", "nonquadratic"):
            raise ConfigError(f"unknown scenario kind {self.kind!r}")
        if self.p < 2 or self.p % 2:
            raise ConfigError(f"p must be an even integer >= 2, got {self.p}")
        if self.n_per_group < 1:
            raise ConfigError("n_per_group must be positive")
        if self.theta_degrees < 0:
            raise ConfigError("theta must be nonnegative")
        if self.sigma2 < 0:
            raise ConfigError("sigma2 must be nonnegative")
        times = np.asarray(self.times, dtype=float)
        if times.size < 2 or np.any(np.diff(times) <= 0):
            raise ConfigError("times must be strictly increasing with at least two points")

    def with_(self, **changes) -> "SimScenario":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "p": self.p,
            "n_per_group": self.n_per_group,
            "theta_degrees": self.theta_degrees,
            "times": list(self.times),
            "seed": self.seed,
            "missingness": self.missingness.to_dict(),
            "sigma2": self.sigma2,
            "shared_random_effects": self.shared_random_effects,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimScenario":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scenario fields: {sorted(unknown)}")
        if "missingness" in d:
            d["missingness"] = MissingnessSpec.from_dict(d["missingness"])
        if "times" in d:
            d["times"] = tuple(float(t) for t in d["times"])
        return cls(**d)


def _streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(int(seed)).spawn(len(_STREAMS))
    return {name: np.random.Generator(np.random.Philox(ss)) for name, ss in zip(_STREAMS, children)}


def _as_rng(stream) -> np.random.Generator:
    if isinstance(stream, np.random.Generator):
        return stream
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(stream))))


def covariate_mean(p: int) -> np.ndarray:
    """``(-p, -(p-1), ..., -(p/2+1), p/2, ..., 2, 1)``: orthogonal to ``(1, ..., p)``."""
    if p < 2 or p % 2:
        raise ConfigError(f"covariate mean pattern needs an even p >= 2, got {p}")
    mu = p + 1.0 - np.arange(1, p + 1)
    mu[: p // 2] *= -1
    return mu


def covariate_cov(p: int) -> np.ndarray:
    idx = np.arange(p)
    return 0.5 ** np.abs(idx[:, None] - idx[None, :])


def sample_covariates(n: int, p: int, stream) -> np.ndarray:
    rng = _as_rng(stream)
    mu = covariate_mean(p)
    chol = np.linalg.cholesky(covariate_cov(p))
    return mu + rng.standard_normal((n, p)) @ chol.T


def true_alpha(p: int) -> np.ndarray:
    if p < 2:
        raise ConfigError("p must be at least 2")
    return normalize_signature(np.arange(1, p + 1, dtype=float))


def gamma_pair(theta_degrees: float) -> tuple[np.ndarray, np.ndarray]:
    if theta_degrees < 0:
        raise ConfigError("theta must be nonnegative")
    th = np.deg2rad(theta_degrees)
    return np.array([0.0, np.cos(th), np.sin(th)]), np.array([0.0, np.cos(th), -np.sin(th)])


def nonquadratic_mean(t, u, arm: int) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    u = np.asarray(u, dtype=float)
    base = 10 * np.cos(np.pi * t / 5)
    if arm == 1:
        return base - np.sin(np.pi * t / 2) + np.sin(np.pi * t * u / 10)
    return base + np.sin(np.pi * t / 14) - np.sin(np.pi * t * u / 10)


def _random_effects(n: int, covs, shared: bool, rng: np.random.Generator) -> np.ndarray:
    """Random effects ``(n, 2, q)``; independent across arms unless ``shared``."""
    q = covs[0].shape[0]
    chols = [np.linalg.cholesky(D) for D in covs]
    if shared:
        z = rng.standard_normal((n, q))
        return np.stack([z @ c.T for c in chols], axis=1)
    z = rng.standard_normal((n, 2, q))
    return np.stack([z[:, k] @ chols[k].T for k in range(2)], axis=1)


def _assemble(scenario: SimScenario, x, potential, streams, meta) -> TrialDataset:
    n = x.shape[0]
    times = np.asarray(scenario.times, dtype=float)
    arms = np.repeat([1, 2], scenario.n_per_group)
    arms = streams["assignment"].permutation(arms)
    noise = np.sqrt(scenario.sigma2) * streams["noise"].standard_normal((n, times.size))
    observed = potential[np.arange(n), arms - 1] + noise
    width = len(str(n))
    records = tuple(
        SubjectRecord(f"S{i:0{width}d}", int(arms[i]), x[i], times, observed[i]) for i in range(n)
    )
    ds = TrialDataset(records, schedule=times, potential=potential, meta=meta)
    return apply_missingness(ds, scenario.missingness, streams["missingness"])


def simulate_quadratic(scenario: SimScenario) -> TrialDataset:
    if scenario.kind != "quadratic":
        raise ConfigError("simulate_quadratic needs kind='quadratic'")
    streams = _streams(scenario.seed)
    n = 2 * scenario.n_per_group
    x = sample_covariates(n, scenario.p, streams["covariates"])
    alpha = true_alpha(scenario.p)
    u = x @ alpha
    gammas = gamma_pair(scenario.theta_degrees)
    betas = (BETA_1, BETA_2)
    b = _random_effects(n, (D_1, D_2), scenario.shared_random_effects, streams["random_effects"])
    times = np.asarray(scenario.times, dtype=float)
    Zt = times[:, None] ** np.arange(3)
    coef = np.stack([betas[k] + u[:, None] * gammas[k] + b[:, k] for k in range(2)], axis=1)
    potential = coef @ Zt.T  # (n, 2, m)
    meta = {"alpha_true": alpha, "scenario": scenario.to_dict()}
    return _assemble(scenario, x, potential, streams, meta)


def simulate_nonquadratic(scenario: SimScenario) -> TrialDataset:
    if scenario.kind != "nonquadratic":
        raise ConfigError("simulate_nonquadratic needs kind='nonquadratic'")
    streams = _streams(scenario.seed)
    n = 2 * scenario.n_per_group
    x = sample_covariates(n, scenario.p, streams["covariates"])
    alpha = true_alpha(scenario.p)
    u = x @ alpha
    b = _random_effects(n, (D_1, D_1), scenario.shared_random_effects, streams["random_effects"])
    times = np.asarray(scenario.times, dtype=float)
    Zt = times[:, None] ** np.arange(3)
    fixed = np.stack(
        [nonquadratic_mean(times[None, :], u[:, None], arm) for arm in (1, 2)], axis=1
    )
    potential = fixed + b @ Zt.T
    meta = {"alpha_true": alpha, "scenario": scenario.to_dict()}
    return _assemble(scenario, x, potential, streams, meta)


def simulate(scenario: SimScenario) -> TrialDataset:
    if scenario.kind == "quadratic":
        return simulate_quadratic(scenario)
    return simulate_nonquadratic(scenario)


def apply_mcar(dataset: TrialDataset, rate: float, stream) -> TrialDataset:
    """Delete each non-baseline visit independently with probability ``rate``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"MCAR rate must lie in [0, 1), got {rate}")
    rng = _as_rng(stream)
    out = []
    for r in dataset.records:
        keep = rng.random(r.m) >= rate
        if r.m:
            keep[0] = True
        out.append(SubjectRecord(r.id, r.group, r.x, r.times[keep], r.y[keep]))
    return dataset.replace_records(out)


def _dropout_counts(n: int, props: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    raw = n * props
    if np.allclose(raw, np.round(raw), atol=1e-9):
        return np.round(raw).astype(int)
    return rng.multinomial(n, props)


def apply_dropout(dataset: TrialDataset, proportions, stream) -> TrialDataset:
    """Within each group, remove the last 0, 1, 2, 3 or 4 visits per subject.

    Pattern counts are exact quotas when ``n_group * proportion`` is integral
    and multinomial draws otherwise; subjects are assigned to patterns at random.
    """
    props = np.asarray(proportions, dtype=float)
    if props.size != 5 or abs(props.sum() - 1.0) > 1e-12 or np.any(props < 0):
        raise ConfigError("dropout needs 5 nonnegative proportions summing to 1")
    rng = _as_rng(stream)
    n_drop = np.zeros(dataset.n, dtype=int)
    groups = dataset.groups
    for k in (1, 2):
        idx = np.flatnonzero(groups == k)
        if idx.size == 0:
            continue
        counts = _dropout_counts(idx.size, props, rng)
        pattern = np.repeat(np.arange(5), counts)
        n_drop[rng.permutation(idx)] = pattern
    out = []
    for r, d in zip(dataset.records, n_drop):
        keep = max(r.m - int(d), min(r.m, 1))
        out.append(SubjectRecord(r.id, r.group, r.x, r.times[:keep], r.y[:keep]))
    return dataset.replace_records(out)


def apply_missingness(dataset: TrialDataset, spec: MissingnessSpec, stream) -> TrialDataset:
    if spec.kind == "mcar":
        return apply_mcar(dataset, spec.rate, stream)
    if spec.kind == "dropout":
        return apply_dropout(dataset, spec.proportions, stream)
    return dataset


def oracle_decisions(dataset: TrialDataset, prefer: str = "larger") -> np.ndarray:
    """Arm with the preferred noiseless change score; ties go to arm 1."""
    cs = dataset.potential_change_scores()
    diff = cs[:, 1] - cs[:, 0]
    if prefer == "smaller":
        diff = -diff
    return np.where(diff > 0, 2, 1)
