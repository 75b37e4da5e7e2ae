"""Trial data containers.

Missing visits are never stored as sentinels: a subject simply carries the
(time, outcome) pairs that were observed. Numerical code works on a padded
view (:class:`PaddedGroup`) where unobserved slots have zero design rows and
a unit diagonal in the covariance, so they drop out of every likelihood term.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .errors import DataError

__all__ = ["SubjectRecord", "TrialDataset", "PaddedGroup", "pad_records"]


@dataclass(frozen=True, eq=False)
class SubjectRecord:
    id: Hashable
    group: int
    x: np.ndarray
    times: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).ravel()
        t = np.asarray(self.times, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        if t.shape != y.shape:
            raise DataError(f"subject {self.id}: {t.size} times but {y.size} outcomes")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise DataError(f"subject {self.id}: times must be strictly increasing")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise DataError(f"subject {self.id}: non-finite values")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "group", int(self.group))

    @property
    def m(self) -> int:
        return self.times.size

    def __eq__(self, other):
        if not isinstance(other, SubjectRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.group == other.group
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.y, other.y)
        )


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """A randomized two-arm longitudinal trial.

    ``potential`` (optional, simulation only) holds the noiseless potential
    trajectories with shape ``(n, 2, len(schedule))``: fixed plus random
    effects under each arm, evaluated on ``schedule``.
    """

    records: tuple[SubjectRecord, ...]
    schedule: np.ndarray | None = None
    potential: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        records = tuple(self.records)
        if not records:
            raise DataError("dataset has no subjects")
        p = {r.x.size for r in records}
        if len(p) != 1:
            raise DataError("all subjects must have the same number of covariates")
        object.__setattr__(self, "records", records)
        if self.schedule is not None:
            object.__setattr__(self, "schedule", np.asarray(self.schedule, dtype=float))
        if self.potential is not None:
            pot = np.asarray(self.potential, dtype=float)
            if pot.shape[0] != len(records) or pot.shape[1] != 2:
                raise DataError("potential trajectories must have shape (n, 2, m)")
            object.__setattr__(self, "potential", pot)

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, TrialDataset):
            return NotImplemented
        if self.records != other.records:
            return False
        for a, b in ((self.schedule, other.schedule), (self.potential, other.potential)):
            if (a is None) != (b is None) or (a is not None and not np.array_equal(a, b)):
                return False
        return True

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def p(self) -> int:
        return self.records[0].x.size

    @property
    def groups(self) -> np.ndarray:
        return np.array([r.group for r in self.records], dtype=int)

    @property
    def X(self) -> np.ndarray:
        return np.vstack([r.x for r in self.records])

    @property
    def ids(self) -> list:
        return [r.id for r in self.records]

    def endpoints(self) -> tuple[float, float]:
        """First and last scheduled time (t1, tm)."""
        if self.schedule is not None:
            return float(self.schedule[0]), float(self.schedule[-1])
        lo = min(float(r.times[0]) for r in self.records if r.m)
        hi = max(float(r.times[-1]) for r in self.records if r.m)
        return lo, hi

    def subset(self, index: Sequence[int]) -> "TrialDataset":
        index = np.asarray(index, dtype=int)
        pot = None if self.potential is None else self.potential[index]
        return TrialDataset(
            tuple(self.records[i] for i in index), self.schedule, pot, dict(self.meta)
        )

    def replace_records(self, records: Sequence[SubjectRecord]) -> "TrialDataset":
        return TrialDataset(tuple(records), self.schedule, self.potential, dict(self.meta))

    def group_records(self, k: int) -> list[SubjectRecord]:
        return [r for r in self.records if r.group == k]

    def observed_change_scores(self) -> tuple[np.ndarray, np.ndarray]:
        """Last observed minus first observed outcome per subject.

        Returns the scores and a boolean flag marking subjects whose last
        observed visit is earlier than the final scheduled time.
        """
        _, tm = self.endpoints()
        cs = np.empty(self.n)
        truncated = np.zeros(self.n, dtype=bool)
        for i, r in enumerate(self.records):
            if r.m == 0:
                cs[i] = np.nan
                truncated[i] = True
                continue
            cs[i] = r.y[-1] - r.y[0]
            truncated[i] = r.times[-1] < tm
        return cs, truncated

    def potential_change_scores(self) -> np.ndarray:
        """Noiseless per-arm change scores, shape ``(n, 2)``."""
        if self.potential is None:
            raise DataError("dataset carries no potential trajectories")
        return self.potential[:, :, -1] - self.potential[:, :, 0]


@dataclass(frozen=True)
class PaddedGroup:
    """Subjects of one group stacked into fixed-width arrays.

    ``mask[i, j]`` marks observed slots; padding slots have ``times == 0``
    and ``y == 0`` and must be neutralized by the caller.
    """

    times: np.ndarray  # (n, m_max)
    y: np.ndarray  # (n, m_max)
    mask: np.ndarray  # (n, m_max) bool
    x: np.ndarray  # (n, p)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_obs(self) -> int:
        return int(self.mask.sum())

    def basis_rows(self, rows_fn) -> np.ndarray:
        """Evaluate ``rows_fn(times) -> (k, d)`` on observed slots; zeros elsewhere."""
        flat = self.times[self.mask]
        vals = rows_fn(flat)
        out = np.zeros(self.mask.shape + (vals.shape[1],))
        out[self.mask] = vals
        return out


def pad_records(records: Sequence[SubjectRecord]) -> PaddedGroup:
    if not records:
        raise DataError("no subjects to pad")
    m_max = max(max(r.m for r in records), 1)
    n = len(records)
    times = np.zeros((n, m_max))
    y = np.zeros((n, m_max))
    mask = np.zeros((n, m_max), dtype=bool)
    for i, r in enumerate(records):
        times[i, : r.m] = r.times
        y[i, : r.m] = r.y
        mask[i, : r.m] = True
    x = np.vstack([r.x for r in records])
    return PaddedGroup(times, y, mask, x)
