"""Long-format CSV reading and writing.

Outcomes: ``subject_id, group, time, outcome`` with one row per observed
visit; an absent row is a missing visit. Covariates: ``subject_id, x1..xp``.
Simulated datasets may also carry a potential-trajectory file
``subject_id, arm, time, value`` holding the noiseless curves under both arms.
Floats are written with ``repr`` so a write/read cycle is exact.
"""

from __future__ import annotations

import csv
import re
from collections import defaultdict
from pathlib import Path

import numpy as np

from .data import SubjectRecord, TrialDataset
from .errors import DataError

__all__ = ["ingest_long_csv", "write_long_csv", "read_potential_csv"]

OUTCOME_COLUMNS = ("subject_id", "group", "time", "outcome")
POTENTIAL_COLUMNS = ("subject_id", "arm", "time", "value")


def _reader(path: Path):
    fh = open(path, newline="", encoding="utf-8")
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        fh.close()
        raise DataError(f"{path}: file is empty (a header row is required)") from None
    return fh, [h.strip() for h in header], reader


def _number(text: str, path: Path, line: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"{path}:{line}: non-numeric {column} {text!r}") from None
    if not np.isfinite(value):
        raise DataError(f"{path}:{line}: non-finite {column} {text!r}")
    return value


def _read_covariates(path: Path) -> tuple[list[str], dict[str, np.ndarray]]:
    fh, header, reader = _reader(path)
    with fh:
        if not header or header[0] != "subject_id":
            raise DataError(f"{path}:1: first column must be 'subject_id'")
        xcols = header[1:]
        expected = [f"x{j}" for j in range(1, len(xcols) + 1)]
        if not xcols or xcols != expected:
            raise DataError(f"{path}:1: covariate columns must be x1..xp, got {xcols}")
        order, cov = [], {}
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            sid = row[0].strip()
            if sid in cov:
                raise DataError(f"{path}:{line}: duplicate subject {sid!r}")
            cov[sid] = np.array([_number(v, path, line, c) for v, c in zip(row[1:], xcols)])
            order.append(sid)
    if not order:
        raise DataError(f"{path}: no subjects")
    return order, cov


def _read_rows(path: Path, columns, known: dict) -> tuple[dict, dict]:
    """Rows keyed by subject: ``{sid: {time: value}}`` plus the per-subject label."""
    fh, header, reader = _reader(path)
    with fh:
        if tuple(header) != tuple(columns):
            raise DataError(f"{path}:1: header must be {','.join(columns)}, got {','.join(header)}")
        label_col = columns[1]
        values: dict[str, dict[float, float]] = defaultdict(dict)
        labels: dict[str, tuple[int, int]] = {}
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(columns):
                raise DataError(f"{path}:{line}: expected {len(columns)} fields, got {len(row)}")
            sid = row[0].strip()
            if sid not in known:
                raise DataError(f"{path}:{line}: unknown subject {sid!r} (not in covariates)")
            label_text = row[1].strip()
            if not re.fullmatch(r"[+-]?\d+(\.0*)?", label_text):
                raise DataError(f"{path}:{line}: non-numeric {label_col} {label_text!r}")
            label = int(float(label_text))
            if label not in (1, 2):
                raise DataError(f"{path}:{line}: {label_col} must be 1 or 2, got {label}")
            t = _number(row[2], path, line, "time")
            v = _number(row[3], path, line, columns[3])
            key = (sid, label) if label_col == "arm" else sid
            if label_col == "group":
                prev = labels.get(sid)
                if prev is not None and prev[0] != label:
                    raise DataError(
                        f"{path}:{line}: subject {sid!r} has group {label} but group {prev[0]} on line {prev[1]}"
                    )
                labels.setdefault(sid, (label, line))
            slot = values[key]
            if t in slot:
                raise DataError(f"{path}:{line}: duplicate row for subject {sid!r} at time {row[2].strip()}")
            slot[t] = v
    return values, labels


def read_potential_csv(path, order: list[str]) -> tuple[np.ndarray, np.ndarray]:
    """Potential trajectories ``(n, 2, m)`` and their common time grid."""
    path = Path(path)
    values, _ = _read_rows(path, POTENTIAL_COLUMNS, dict.fromkeys(order))
    grid = sorted({t for slot in values.values() for t in slot})
    pot = np.empty((len(order), 2, len(grid)))
    for i, sid in enumerate(order):
        for k in (1, 2):
            slot = values.get((sid, k), {})
            if sorted(slot) != grid:
                raise DataError(f"{path}: subject {sid!r} arm {k} does not cover the full time grid")
            pot[i, k - 1] = [slot[t] for t in grid]
    return pot, np.asarray(grid)


def ingest_long_csv(outcomes_path, covariates_path, potential_path=None) -> TrialDataset:
    """Join the outcome rows with the covariate table on ``subject_id``.

    Subjects keep the order of the covariate file. The schedule is the time
    grid of the potential file when given, otherwise the sorted union of
    observed times.
    """
    outcomes_path, covariates_path = Path(outcomes_path), Path(covariates_path)
    order, cov = _read_covariates(covariates_path)
    values, labels = _read_rows(outcomes_path, OUTCOME_COLUMNS, cov)
    records = []
    for sid in order:
        if sid not in labels:
            raise DataError(f"{outcomes_path}: subject {sid!r} has no outcome rows")
        slot = values[sid]
        times = np.array(sorted(slot))
        y = np.array([slot[t] for t in times])
        records.append(SubjectRecord(sid, labels[sid][0], cov[sid], times, y))
    if potential_path is not None:
        potential, schedule = read_potential_csv(potential_path, order)
    else:
        potential = None
        schedule = np.array(sorted({t for r in records for t in r.times.tolist()}))
    return TrialDataset(tuple(records), schedule=schedule, potential=potential)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_long_csv(dataset: TrialDataset, outcomes_path, covariates_path, potential_path=None) -> None:
    """Write ``dataset`` in the long layout read by :func:`ingest_long_csv`."""
    with open(outcomes_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OUTCOME_COLUMNS)
        for r in dataset.records:
            for t, y in zip(r.times, r.y):
                w.writerow([r.id, r.group, _fmt(t), _fmt(y)])
    with open(covariates_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id"] + [f"x{j}" for j in range(1, dataset.p + 1)])
        for r in dataset.records:
            w.writerow([r.id] + [_fmt(v) for v in r.x])
    if potential_path is not None:
        if dataset.potential is None or dataset.schedule is None:
            raise DataError("dataset carries no potential trajectories to write")
        with open(potential_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(POTENTIAL_COLUMNS)
            for r, pot in zip(dataset.records, dataset.potential):
                for k in (1, 2):
                    for t, v in zip(dataset.schedule, pot[k - 1]):
                        w.writerow([r.id, k, _fmt(t), _fmt(v)])
