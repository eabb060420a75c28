"""Effective matrices: Abar from the multiscale corrector, A0 by reiteration, A_tau.

    Abar  = <A + A grad_hat X>                    (depends on the scale ratios and tau)
    A0    = homogenize y_n, then y_{n-1}, ...     (exact tau = 0 cell correctors)
    A_tau = <A1 + A1 grad psi_tau>,  -div A1 grad psi + tau^2 psi = div A1

A1 is the single-scale matrix left after homogenizing all blocks but the first.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .cell_solver import solve_cell_array
from .config import SolverConfig
from .corrector import CorrectorSet, TruncationPlan, build_corrector, hat_matrix, one_scale_corrector
from .errors import ConsistencyError, ValidationError
from .torus_field import (
    AnalyticCoefficient,
    GridSpec,
    ScaleVector,
    TorusField,
    div_block,
    ellipticity_margins,
    grad_block,
    hat_grad,
)

__all__ = [
    "EffectiveReport",
    "effective_matrix",
    "reiterated_matrix",
    "interim_matrix",
    "tau_matrix",
    "gap_report",
    "random_ellipticity",
    "gap_shrinks",
    "supercell_matrix",
]


def _margins(M: np.ndarray) -> tuple[float, float]:
    M = np.asarray(M, dtype=float)
    sym = 0.5 * (M + M.T)
    return float(np.linalg.eigvalsh(sym).min()), float(np.linalg.norm(M, 2))


def random_ellipticity(M, lam: float, samples: int = 1000, seed: int = 0, tol: float = 1e-10) -> tuple[bool, float]:
    """Check xi.M xi >= lam |xi|^2 on random unit vectors; returns (ok, smallest quotient)."""
    M = np.asarray(M, dtype=float)
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal((samples, M.shape[0]))
    xi /= np.linalg.norm(xi, axis=1, keepdims=True)
    q = np.einsum("si,ij,sj->s", xi, M, xi)
    worst = float(q.min())
    return bool(worst >= lam - tol), worst


def effective_matrix(A: TorusField, X, scales: ScaleVector, check: bool = True) -> np.ndarray:
    """Abar = <A + A grad_hat X>; ``X`` is a CorrectorSet or the (d, d, *grid) corrector array."""
    g = A.grid
    xv = X.X.values if isinstance(X, CorrectorSet) else (X.values if isinstance(X, TorusField) else np.asarray(X))
    if xv.shape != (g.d,) + g.shape:
        raise ValidationError(f"corrector shape {xv.shape} does not match ({g.d}, *{g.shape})")
    gx = hat_grad(xv, g, scales.deltas)  # [k, j]
    flux = A.values + np.einsum("ik...,kj...->ij...", A.values, gx)
    Abar = flux.reshape(g.d, g.d, -1).mean(axis=2)
    if check:
        lo, _ = ellipticity_margins(A.values)
        lo_bar, _ = _margins(Abar)
        if not np.all(np.isfinite(Abar)) or lo_bar < lo - 1e-8 * max(1.0, abs(lo)):
            raise ConsistencyError(f"effective matrix is not elliptic: min eig {lo_bar:.6g} < {lo:.6g}")
    return Abar


def interim_matrix(A: TorusField, keep: int, solver: SolverConfig = SolverConfig()):
    """Homogenize the innermost blocks one at a time until ``keep`` blocks remain."""
    cur = A
    for _ in range(A.grid.n - keep):
        cur = hat_matrix(cur, one_scale_corrector(cur, solver))
    return cur


def reiterated_matrix(A: TorusField, grid=None, solver: SolverConfig = SolverConfig()) -> np.ndarray:
    """Classical reiterated matrix A0; ``grid`` defaults to ``A.grid``."""
    if grid is not None and grid != A.grid:
        raise ValidationError("grid does not match the coefficient field")
    return np.asarray(interim_matrix(A, 0, solver))


def tau_matrix(A1: TorusField, tau: float, solver: SolverConfig = SolverConfig()) -> np.ndarray:
    """A_tau for a single-scale matrix field A1."""
    g = A1.grid
    if g.n != 1:
        raise ValidationError("tau_matrix needs a single remaining scale")
    if tau < 0:
        raise ValidationError("tau must be >= 0")
    psi, _ = solve_cell_array(A1.values, div_block(A1.values, g, 0), g.d, tau, solver)
    gp = grad_block(psi, g, 0)
    flux = A1.values + np.einsum("ik...,kj...->ij...", A1.values, gp)
    return flux.reshape(g.d, g.d, -1).mean(axis=2)


def _ratio_sum(scales: ScaleVector) -> float:
    d = scales.deltas
    return float(sum(d[i + 1] / d[i] for i in range(len(d) - 1)))


@dataclass
class EffectiveReport:
    Abar: np.ndarray
    A0: np.ndarray
    Atau: np.ndarray
    gap_bar_0: float  # componentwise max
    gap_bar_0_sum: float  # sum of absolute entries
    gap_tau_0: float
    predicted_bound: float
    margins: dict
    lam: float
    parameters: dict
    shrink_flag: bool | None = None
    extra: dict = field(default_factory=dict)

    @property
    def elliptic(self) -> bool:
        return all(m[0] >= self.lam - 1e-8 for m in self.margins.values())

    def to_dict(self) -> dict:
        return {
            "Abar": np.asarray(self.Abar).tolist(),
            "A0": np.asarray(self.A0).tolist(),
            "Atau": np.asarray(self.Atau).tolist(),
            "gap_bar_0": self.gap_bar_0,
            "gap_bar_0_sum": self.gap_bar_0_sum,
            "gap_tau_0": self.gap_tau_0,
            "predicted_bound": self.predicted_bound,
            "margins": {k: list(v) for k, v in self.margins.items()},
            "lam": self.lam,
            "parameters": self.parameters,
            "shrink_flag": self.shrink_flag,
            "extra": self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def gap_shrinks(coarse: EffectiveReport, fine: EffectiveReport, factor: float = 2.0) -> bool | None:
    """Paired comparison: when max(tau^2, ratios) drops by ``factor`` the gap must drop too.

    Returns None when the pair is not comparable (the control did not shrink enough).
    """
    a = max(coarse.parameters["tau"] ** 2, coarse.parameters["max_ratio"])
    b = max(fine.parameters["tau"] ** 2, fine.parameters["max_ratio"])
    if b * factor > a:
        return None
    return bool(fine.gap_bar_0 < coarse.gap_bar_0)


def gap_report(A: TorusField, scales: ScaleVector, plan: TruncationPlan | None = None,
               solver: SolverConfig = SolverConfig(), corrector: CorrectorSet | None = None,
               previous: EffectiveReport | None = None, allow_violated: bool = False) -> EffectiveReport:
    """All three matrices and their gaps for one scale vector."""
    cs = corrector if corrector is not None else build_corrector(A, scales, plan, solver,
                                                                allow_violated=allow_violated)
    plan = cs.plan
    Abar = effective_matrix(A, cs, scales)
    A0 = reiterated_matrix(A, solver=solver)
    A1 = interim_matrix(A, 1, solver)
    Atau = tau_matrix(A1, plan.tau, solver)
    lam, _ = ellipticity_margins(A.values)
    ratios = [scales.deltas[i + 1] / scales.deltas[i] for i in range(scales.n - 1)]
    rep = EffectiveReport(
        Abar=Abar, A0=A0, Atau=Atau,
        gap_bar_0=float(np.abs(A0 - Abar).max()),
        gap_bar_0_sum=float(np.abs(A0 - Abar).sum()),
        gap_tau_0=float(np.abs(A0 - Atau).max()),
        predicted_bound=plan.tau**2 + _ratio_sum(scales),
        margins={"Abar": _margins(Abar), "A0": _margins(A0), "Atau": _margins(Atau)},
        lam=float(lam),
        parameters={"epsilons": list(scales.epsilons), "tau": plan.tau, "ks": list(plan.ks),
                    "max_ratio": max(ratios) if ratios else 0.0},
    )
    if previous is not None:
        rep.shrink_flag = gap_shrinks(previous, rep)
    return rep


def supercell_matrix(coef: AnalyticCoefficient, q: int, points_per_period: int = 64, tau: float = 0.0,
                     solver: SolverConfig = SolverConfig()) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-scale homogenization of b(y) = A(y, q y) on the unit torus (rational ratio 1/q).

    Returns (matrix, corrector with a leading direction axis, 1-D sample points
    along each axis).  Only two-scale coefficients are accepted.
    """
    if coef.n != 2:
        raise ValidationError("the supercell oracle needs a two-scale coefficient")
    q = int(q)
    if q < 1:
        raise ValidationError("q must be a positive integer")
    R = points_per_period * q
    g = GridSpec(coef.d, 1, (R,))
    y = np.arange(R) / R
    mesh = np.meshgrid(*([y] * coef.d), indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    b = coef.evaluate([pts, q * pts]).reshape((coef.d, coef.d) + g.shape)
    chi, _ = solve_cell_array(b, div_block(b, g, 0), g.d, tau, solver)
    flux = b + np.einsum("ik...,kj...->ij...", b, grad_block(chi, g, 0))
    return flux.reshape(g.d, g.d, -1).mean(axis=2), chi, y
