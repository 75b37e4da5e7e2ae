"""Time/index basis evaluation and the tensor-product fixed-effect design.

Two basis families are supported: monomials ``(1, s, s**2, ...)`` and clamped
cubic B-splines on a bounded interval. The tensor design used by the
trajectory model stacks, for every visit ``j``, the row
``kron(g(t_j), a(u))`` so that column ``i * d2 + k`` multiplies
``g_i(t) * a_k(u)``. Every module in the package relies on that ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import BSpline

from .errors import ConfigError, DomainError, EmptyInputError

__all__ = [
    "BasisSpec",
    "evaluate_basis",
    "basis_matrix",
    "time_design",
    "tensor_design",
    "index_spec_from_sample",
    "default_time_spec",
]

_SPLINE_DEGREE = 3


@dataclass(frozen=True)
class BasisSpec:
    """Declarative description of a one-dimensional basis.

    Use the :meth:`polynomial` and :meth:`cubic_bspline` constructors rather
    than the raw initializer.
    """

    kind: str
    degree: int = 2
    interior_knots: tuple[float, ...] = field(default=())
    boundary: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind == "polynomial":
            if int(self.degree) != self.degree or self.degree < 0:
                raise ConfigError(f"polynomial degree must be a nonnegative integer, got {self.degree}")
        elif self.kind == "cubic_bspline":
            if self.boundary is None or len(self.boundary) != 2:
                raise ConfigError("cubic_bspline needs a (lower, upper) boundary")
            lo, hi = self.boundary
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ConfigError(f"invalid boundary {self.boundary}")
            knots = np.asarray(self.interior_knots, dtype=float)
            if knots.size and (np.any(np.diff(knots) <= 0) or knots[0] <= lo or knots[-1] >= hi):
                raise ConfigError(
                    "interior knots must be strictly increasing and strictly inside the boundary"
                )
        else:
            raise ConfigError(f"unknown basis kind {self.kind!r}")

    @classmethod
    def polynomial(cls, degree: int = 2) -> "BasisSpec":
        return cls(kind="polynomial", degree=int(degree))

    @classmethod
    def cubic_bspline(cls, interior_knots: Sequence[float], boundary: Sequence[float]) -> "BasisSpec":
        lo, hi = boundary
        return cls(
            kind="cubic_bspline",
            degree=_SPLINE_DEGREE,
            interior_knots=tuple(float(k) for k in interior_knots),
            boundary=(float(lo), float(hi)),
        )

    @property
    def dimension(self) -> int:
        if self.kind == "polynomial":
            return self.degree + 1
        return len(self.interior_knots) + _SPLINE_DEGREE + 1

    @property
    def knot_vector(self) -> np.ndarray:
        """Full clamped knot vector (B-spline specs only)."""
        lo, hi = self.boundary
        return np.r_[[lo] * (_SPLINE_DEGREE + 1), self.interior_knots, [hi] * (_SPLINE_DEGREE + 1)]

    def to_dict(self) -> dict:
        if self.kind == "polynomial":
            return {"kind": "polynomial", "degree": self.degree}
        return {
            "kind": "cubic_bspline",
            "interior_knots": list(self.interior_knots),
            "boundary": list(self.boundary),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        if d["kind"] == "polynomial":
            return cls.polynomial(d.get("degree", 2))
        if d["kind"] == "cubic_bspline":
            return cls.cubic_bspline(d.get("interior_knots", ()), d["boundary"])
        raise ConfigError(f"unknown basis kind {d['kind']!r}")


def basis_matrix(spec: BasisSpec, values) -> np.ndarray:
    """Evaluate the basis at every entry of ``values``; returns ``(len(values), dimension)``.

    B-spline arguments outside the boundary are clamped to it.
    """
    s = np.atleast_1d(np.asarray(values, dtype=float))
    if s.ndim != 1:
        raise DomainError("basis arguments must be a flat sequence")
    if not np.all(np.isfinite(s)):
        raise DomainError("basis arguments must be finite")
    if spec.kind == "polynomial":
        return s[:, None] ** np.arange(spec.degree + 1)
    lo, hi = spec.boundary
    s = np.clip(s, lo, hi)
    return BSpline.design_matrix(s, spec.knot_vector, _SPLINE_DEGREE).toarray()


def evaluate_basis(spec: BasisSpec, s: float) -> np.ndarray:
    """Basis vector ``[b_1(s), ..., b_d(s)]`` at a single point."""
    s = np.asarray(s, dtype=float)
    if s.ndim != 0:
        raise DomainError("evaluate_basis takes a scalar; use basis_matrix for arrays")
    return basis_matrix(spec, [float(s)])[0]


def time_design(spec: BasisSpec, times) -> np.ndarray:
    """Matrix with rows ``g(t_j)``, shape ``(m, d1)``."""
    times = np.asarray(times, dtype=float).ravel()
    if times.size == 0:
        raise EmptyInputError("time_design needs at least one time point")
    return basis_matrix(spec, times)


def tensor_design(G: np.ndarray, a_u: np.ndarray) -> np.ndarray:
    """Row-wise Kronecker product ``G ⊗ a_uᵀ``.

    Column ``i * d2 + k`` equals ``G[:, i] * a_u[k]``.
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    a_u = np.asarray(a_u, dtype=float).ravel()
    if not np.all(np.isfinite(a_u)):
        raise DomainError("index basis values must be finite")
    m, d1 = G.shape
    return (G[:, :, None] * a_u[None, None, :]).reshape(m, d1 * a_u.size)


def index_spec_from_sample(u, kind: str = "cubic_bspline") -> BasisSpec:
    """Index basis adapted to an observed sample of index values.

    B-splines use the sample range as boundary and one interior knot at the
    sample median. ``kind="linear"`` returns the basis ``(1, u)``.
    """
    if kind == "linear":
        return BasisSpec.polynomial(1)
    if kind != "cubic_bspline":
        raise ConfigError(f"unknown index basis kind {kind!r}")
    u = np.asarray(u, dtype=float)
    lo, hi = float(u.min()), float(u.max())
    if hi - lo < 1e-8:
        lo, hi = lo - 0.5, hi + 0.5
    knot = float(np.median(u))
    if not lo < knot < hi:
        knot = 0.5 * (lo + hi)
    return BasisSpec.cubic_bspline([knot], (lo, hi))


def default_time_spec(times, kind: str = "polynomial") -> BasisSpec:
    """Quadratic time basis, or a cubic B-spline with one knot at the range midpoint."""
    if kind == "polynomial":
        return BasisSpec.polynomial(2)
    times = np.asarray(times, dtype=float)
    lo, hi = float(times.min()), float(times.max())
    return BasisSpec.cubic_bspline([0.5 * (lo + hi)], (lo, hi))
