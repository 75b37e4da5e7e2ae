"""Derivative-free maximization with the Nelder–Mead simplex."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import optimize

__all__ = ["NelderMeadOptions", "NelderMeadResult", "nelder_mead"]


@dataclass(frozen=True)
class NelderMeadOptions:
    max_evals: int = 4000
    simplex_scale: float = 0.25
    tolerance: float = 1e-7


@dataclass(frozen=True)
class NelderMeadResult:
    x: np.ndarray
    value: float
    n_evals: int
    converged: bool


def nelder_mead(
    objective: Callable[[np.ndarray], float],
    init,
    options: NelderMeadOptions | None = None,
) -> NelderMeadResult:
    """Maximize ``objective`` over unconstrained R^p starting at ``init``.

    Standard coefficients are used (reflection 1, expansion 2, contraction
    0.5, shrink 0.5). The initial simplex offsets each coordinate of ``init``
    by ``simplex_scale`` (times its magnitude when nonzero). If the
    evaluation budget runs out the best vertex is returned with
    ``converged=False``.
    """
    options = options or NelderMeadOptions()
    x0 = np.asarray(init, dtype=float).ravel()
    f0 = objective(x0)
    if not np.isfinite(f0):
        raise ValueError("objective is not finite at the initial point")
    p = x0.size
    simplex = np.tile(x0, (p + 1, 1))
    for i in range(p):
        step = options.simplex_scale * (abs(x0[i]) if x0[i] != 0 else 1.0)
        simplex[i + 1, i] += step

    def neg(v):
        val = objective(v)
        return -val if np.isfinite(val) else np.inf

    res = optimize.minimize(
        neg,
        x0,
        method="Nelder-Mead",
        options={
            "initial_simplex": simplex,
            "maxfev": options.max_evals,
            "maxiter": options.max_evals,
            "xatol": options.tolerance,
            "fatol": options.tolerance * max(1.0, abs(f0)),
            "adaptive": False,
        },
    )
    x, value = res.x, -res.fun
    if not value > f0:
        x, value = x0, f0
    return NelderMeadResult(x=np.asarray(x), value=float(value), n_evals=int(res.nfev), converged=bool(res.success))
