"""Multiscale correctors by recursive two-scale expansion in the finest block.

The lifted corrector equation on T^{d x n},

    -div_hat(A grad_hat X) + tau^2 X = div_hat(A e_j),

is solved by expanding X = sum_k delta_n^k Y_k in the finest ratio.  Each
order needs one cell solve in y_n (operator L_yy = -div_n A grad_n) and one
solve of the same kind of equation on n-1 blocks with the homogenized
matrix A_hat; the latter recurses down to a single nondegenerate cell solve.

Splitting Y_k = Y_k^o + Y_k^r into a zero-mean part and a part independent
of y_n keeps every L_yy solve solvable; the y_n-independent parts come from
the averaged (solvability) equations.

Blocks handled by a call are the trailing "active" blocks; any leading
blocks are frozen parameters, which is how the grouping pipeline homogenizes
an inner group of scales pointwise in the outer variables.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cell_solver import DivFormOperator, SolveDiagnostics, krylov_solve
from .config import Config, SeparationConfig, SolverConfig
from .errors import ConsistencyError, SeparationError, ValidationError
from .torus_field import (
    GridSpec,
    ScaleVector,
    TorusField,
    apply_matrix,
    block_mean,
    div_block,
    ellipticity_margins,
    expand_last,
    grad_block,
    hat_div,
    hat_grad,
    write_tnsr,
)

__all__ = [
    "TruncationPlan",
    "CorrectorSet",
    "choose_parameters",
    "one_scale_corrector",
    "hat_matrix",
    "build_corrector",
    "lifted_expansion",
    "corrector_certificates",
]

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TruncationPlan:
    """Truncation orders k_j per gap, tau, and the separation bookkeeping.

    ``checks[g]`` holds (lhs, rhs) of eps_j <= c_j eps_{j-1}/(1 + log(eps_1/eps_{j-1}))
    for gap g (between scales g+1 and g+2, 1-based).
    """

    ks: tuple[int, ...]
    tau: float
    separated: tuple[bool, ...]
    checks: tuple[tuple[float, float], ...] = ()
    ell0: int = 0
    constants: dict = field(default_factory=dict)

    @property
    def all_separated(self) -> bool:
        return all(self.separated)

    def with_tau(self, tau: float) -> "TruncationPlan":
        return TruncationPlan(self.ks, float(tau), self.separated, self.checks, self.ell0, dict(self.constants))

    def with_ks(self, ks: Sequence[int]) -> "TruncationPlan":
        return TruncationPlan(tuple(int(k) for k in ks), self.tau, self.separated, self.checks, self.ell0,
                              dict(self.constants))

    def to_dict(self) -> dict:
        return {"ks": list(self.ks), "tau": self.tau, "separated": list(self.separated),
                "checks": [list(c) for c in self.checks], "ell0": self.ell0, "constants": self.constants}


def separation_check(eps: Sequence[float], j: int, c: float, anchor: float | None = None) -> tuple[float, float]:
    """(eps_j, c eps_{j-1} / (1 + log(anchor/eps_{j-1}))) with 0-based j >= 1.

    ``anchor`` defaults to eps_1.
    """
    anchor = eps[0] if anchor is None else anchor
    return eps[j], c * eps[j - 1] / (1.0 + math.log(anchor / eps[j - 1]))


def choose_parameters(scales: ScaleVector, config: Config | SeparationConfig | None = None) -> TruncationPlan:
    """Truncation orders, tau and separation flags for a scale vector."""
    sep = config.separation if isinstance(config, Config) else (config or SeparationConfig())
    eps = scales.epsilons
    ks, flags, checks = [], [], []
    for j in range(1, len(eps)):
        lhs, rhs = separation_check(eps, j, sep.c_for(j - 1))
        checks.append((lhs, rhs))
        flags.append(lhs <= rhs)
        ratio = eps[j - 1] / eps[j]
        ks.append(int(max(1, min(sep.k_cap, math.floor(sep.gamma * ratio)))))
    if len(eps) > 1:
        tau = math.sqrt(math.exp(-sep.c_tau * min(scales.ratios)))
    else:
        tau = 0.0
    constants = {"c_gap": [sep.c_for(g) for g in range(len(eps) - 1)], "c_tau": sep.c_tau,
                 "gamma": sep.gamma, "k_cap": sep.k_cap}
    return TruncationPlan(tuple(ks), tau, tuple(flags), tuple(checks), sep.ell0, constants)


# --------------------------------------------------------------------------
# recursive engine (arrays)
# --------------------------------------------------------------------------


@dataclass
class _Level:
    """Output of one recursion level; arrays carry a leading column axis m."""

    Y: np.ndarray
    Y0: np.ndarray | None = None
    Yo: list = field(default_factory=list)
    Yt: list = field(default_factory=list)
    Yr: list = field(default_factory=list)
    k: int = 0
    mean_defects: list = field(default_factory=list)
    inner_residuals: list = field(default_factory=list)


class _Engine:
    """Holds the grid, scales and per-level caches (chi, A_hat, operators)."""

    def __init__(self, grid: GridSpec, deltas: Sequence[float], tau: float, ks: Sequence[int], n_param: int,
                 solver: SolverConfig):
        self.grid = grid
        self.deltas = tuple(deltas)  # one per active block, deltas[0] == 1
        self.tau = float(tau)
        self.ks = tuple(ks)
        self.n_param = n_param
        self.solver = solver
        self.cache: dict[int, tuple] = {}
        self.diags: list[SolveDiagnostics] = []
        self.n_active = grid.n - n_param
        if len(self.deltas) != self.n_active:
            raise ValidationError("need one scale ratio per active block")
        if len(self.ks) < self.n_active - 1:
            raise ValidationError("need one truncation order per scale gap")

    # helpers bound to a level L (number of active blocks)
    def gridL(self, L):
        return self.grid.leading(self.n_param + L)

    def outer_blocks(self, L):
        return range(self.n_param, self.n_param + L - 1)

    def hgrad(self, u, L):
        """grad_hat over the active blocks except the innermost of level L."""
        g = self.gridL(L)
        w = {self.n_param + i: self.deltas[i] for i in range(L - 1)}
        ws = [w.get(i, 1.0) for i in range(g.n)]
        return hat_grad(u, g, ws, self.outer_blocks(L))

    def hdiv(self, v, L):
        g = self.gridL(L)
        w = {self.n_param + i: self.deltas[i] for i in range(L - 1)}
        ws = [w.get(i, 1.0) for i in range(g.n)]
        return hat_div(v, g, ws, self.outer_blocks(L))

    def hgrad_red(self, u, L):
        """grad_hat over the active blocks of level L-1 for arrays on the reduced grid."""
        g = self.gridL(L - 1)
        ws = [1.0] * self.n_param + list(self.deltas[: L - 1])
        return hat_grad(u, g, ws, self.outer_blocks(L))

    def _solve(self, op, rhs):
        y, diag = krylov_solve(op, rhs, self.solver)
        self.diags.append(diag)
        return y

    def level_data(self, L, A):
        """(inner operator, chi, A_hat) for level L; computed once."""
        if L in self.cache:
            return self.cache[L]
        g = self.gridL(L)
        b = g.n - 1
        op = DivFormOperator(A, g.block_shape(b), np.eye(g.d), 0.0, self.solver.dealias)
        chi = self._solve(op, div_block(A, g, b))  # chi[j] for F = A e_j
        grad_chi = grad_block(chi, g, b)  # [k, j]
        Ahat = block_mean(A + np.einsum("ik...,kj...->ij...", A, grad_chi), g, b)
        self.cache[L] = (op, chi, Ahat)
        return self.cache[L]

    def solve(self, L: int, A: np.ndarray, F: np.ndarray) -> _Level:
        """-div_hat(A grad_hat Y) + tau^2 Y = div_hat F on the first L active blocks.

        ``A`` has shape (d, d, *gridL) and ``F`` (d, m, *gridL).
        """
        g = self.gridL(L)
        if L == 1:
            b = g.n - 1
            key = ("base", id(A))
            if key not in self.cache:
                self.cache[key] = DivFormOperator(A, g.block_shape(b), np.eye(g.d), self.tau, self.solver.dealias)
            op = self.cache[key]
            Y = self._solve(op, div_block(F, g, b))
            return _Level(Y=Y)

        d = g.d
        b = g.n - 1
        dn = self.deltas[L - 1]
        k = max(1, int(self.ks[L - 2]))
        tau2 = self.tau**2
        op, chi, Ahat = self.level_data(L, A)

        def chi_dot(v_red):
            return np.einsum("j...,jm...->m...", chi, expand_last(v_red, d))

        def full(u_red):
            return np.broadcast_to(expand_last(u_red, d), u_red.shape + g.block_shape(b))

        Ft = self._solve(op, div_block(F, g, b))
        Fhat = block_mean(F + apply_matrix(A, grad_block(Ft, g, b)), g, b)
        lev0 = self.solve(L - 1, Ahat, Fhat)
        Y0 = lev0.Y
        out = _Level(Y=None, Y0=Y0, k=k)
        out.inner_residuals.append(self._reduced_residual(L, Ahat, Fhat, Y0))
        Yo = [Ft + chi_dot(self.hgrad_red(Y0, L))]
        Yr: list = []
        Yt: list = []
        full_prev = full(Y0)  # Y_{m-1} on the full grid
        for m in range(1, k):
            yo = Yo[-1]
            rhs = (self.hdiv(apply_matrix(A, grad_block(yo, g, b)), L)
                   + div_block(apply_matrix(A, self.hgrad(yo, L)), g, b)
                   + self.hdiv(apply_matrix(A, self.hgrad(full_prev, L)), L)
                   - tau2 * full_prev)
            if m == 1:
                rhs = rhs + self.hdiv(F, L)
            defect = block_mean(rhs, g, b)
            out.mean_defects.append(float(np.abs(defect).max()))
            rhs = rhs - expand_last(defect, d)
            yt = self._solve(op, rhs)
            Gm = block_mean(apply_matrix(A, grad_block(yt, g, b)) + apply_matrix(A, self.hgrad(yo, L)), g, b)
            lev = self.solve(L - 1, Ahat, Gm)
            yr = lev.Y
            out.inner_residuals.append(self._reduced_residual(L, Ahat, Gm, yr))
            Yt.append(yt)
            Yr.append(yr)
            full_prev = yo + expand_last(yr, d)
            Yo.append(yt + chi_dot(self.hgrad_red(yr, L)))
        # N_k = sum_{j<k} dn^j Y_j + dn^k Y_k^o
        N = np.array(full(Y0), dtype=float)
        for j in range(1, k):
            N = N + dn**j * (Yo[j - 1] + expand_last(Yr[j - 1], d))
        N = N + dn**k * Yo[k - 1]
        out.Y, out.Yo, out.Yr, out.Yt = N, Yo, Yr, Yt
        return out

    def _reduced_residual(self, L, Ahat, F, Y):
        """Max residual of the (L-1)-block equation solved approximately for Y."""
        if L - 1 == 1:
            return 0.0  # single nondegenerate cell solve, residual is the solver's
        r = self.lifted_residual(L - 1, Ahat, F, Y)
        return float(np.abs(r).max())

    def lifted_residual(self, L, A, F, Y):
        """-div_hat(A grad_hat Y) + tau^2 Y - div_hat F on the first L active blocks."""
        g = self.gridL(L)
        ws = [1.0] * self.n_param + list(self.deltas[:L])
        blocks = range(self.n_param, g.n)
        flux = apply_matrix(A, hat_grad(Y, g, ws, blocks)) + F
        return -hat_div(flux, g, ws, blocks) + self.tau**2 * Y

    def truncation_error(self, A, F, lev: _Level) -> np.ndarray:
        """The E_k expression evaluated from the top-level pieces."""
        L = self.n_active
        g = self.gridL(L)
        b = g.n - 1
        d = g.d
        k = lev.k
        dn = self.deltas[L - 1]
        tau2 = self.tau**2
        yo = lev.Yo[k - 1]
        if k == 1:
            prev = expand_last(lev.Y0, d)
        else:
            prev = lev.Yo[k - 2] + expand_last(lev.Yr[k - 2], d)
        prev = np.broadcast_to(prev, yo.shape)
        first = (-self.hdiv(apply_matrix(A, grad_block(yo, g, b)), L)
                 - div_block(apply_matrix(A, self.hgrad(yo, L)), g, b)
                 - self.hdiv(apply_matrix(A, self.hgrad(prev, L)), L)
                 + tau2 * prev)
        if k == 1:
            first = first - self.hdiv(F, L)
        second = -self.hdiv(apply_matrix(A, self.hgrad(yo, L)), L) + tau2 * yo
        return dn ** (k - 1) * first + dn**k * second


def lifted_expansion(A: np.ndarray, F: np.ndarray, grid: GridSpec, deltas: Sequence[float], tau: float,
                     ks: Sequence[int], n_param: int = 0, solver: SolverConfig = SolverConfig()):
    """Run the recursive construction on arrays; returns (level, engine)."""
    eng = _Engine(grid, deltas, tau, ks, n_param, solver)
    lev = eng.solve(eng.n_active, A, F)
    return lev, eng


# --------------------------------------------------------------------------
# public API
# --------------------------------------------------------------------------


def one_scale_corrector(A: TorusField, solver: SolverConfig = SolverConfig()) -> TorusField:
    """chi_j solving -div_n(A grad_n chi_j) = div_n(A e_j) in the innermost block.

    Returns a field with a leading direction axis; outer blocks are parameters.
    """
    g = A.grid
    b = g.n - 1
    op = DivFormOperator(A.values, g.block_shape(b), np.eye(g.d), 0.0, solver.dealias)
    chi, _ = krylov_solve(op, div_block(A.values, g, b), solver)
    return TorusField(g, chi)


def hat_matrix(A: TorusField, chi: TorusField, check: bool = True):
    """A_hat = <A + A grad_n chi>_{y_n}; a field on the remaining blocks (ndarray if none)."""
    g = A.grid
    b = g.n - 1
    grad_chi = grad_block(chi.values, g, b)
    vals = block_mean(A.values + np.einsum("ik...,kj...->ij...", A.values, grad_chi), g, b)
    if check:
        lo, hi = ellipticity_margins(A.values)
        lo_h, hi_h = ellipticity_margins(vals)
        tol = 1e-8 * max(1.0, hi)
        if lo_h < lo - tol or hi_h > hi / max(lo, 1e-300) * hi + tol:
            raise ConsistencyError(
                f"homogenized matrix lost ellipticity: min eig {lo_h:.6g} < {lo:.6g}"
            )
    if g.n == 1:
        return vals
    return TorusField(g.leading(g.n - 1), vals)


@dataclass(eq=False)
class CorrectorSet:
    """Pieces of the multiscale corrector for all d directions.

    Arrays keep the direction index first.  ``X`` is the truncated sum N_k.
    """

    grid: GridSpec
    scales: ScaleVector
    plan: TruncationPlan
    X: TorusField
    Y0: TorusField | None
    Yo: list
    Yr: list
    Ytilde: list
    chi: TorusField | None
    Ahat: TorusField | np.ndarray | None
    residual: float
    truncation_residual: float
    residual_mismatch: float
    mean_defects: list
    inner_residuals: list
    diagnostics: list = field(default_factory=list, repr=False)

    @property
    def k(self) -> int:
        return len(self.Yo)

    def sup_norm(self) -> float:
        return self.X.sup_norm()

    def manifest(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "scales": self.scales.to_dict(),
            "plan": self.plan.to_dict(),
            "k": self.k,
            "sup_norm": self.sup_norm(),
            "residual": self.residual,
            "truncation_residual": self.truncation_residual,
            "residual_mismatch": self.residual_mismatch,
            "mean_defects": self.mean_defects,
            "inner_residuals": self.inner_residuals,
            "max_solver_iterations": max((dg.max_iterations for dg in self.diagnostics), default=0),
        }

    def save(self, directory: str | os.PathLike) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        files = {"X": "X.tnsr"}
        write_tnsr(out / "X.tnsr", self.X)
        if self.Y0 is not None:
            write_tnsr(out / "Y0.tnsr", self.Y0)
            files["Y0"] = "Y0.tnsr"
        if self.chi is not None:
            write_tnsr(out / "chi.tnsr", self.chi)
            files["chi"] = "chi.tnsr"
        for i, y in enumerate(self.Yo, start=1):
            write_tnsr(out / f"Yo_{i}.tnsr", y)
            files[f"Yo_{i}"] = f"Yo_{i}.tnsr"
        for i, y in enumerate(self.Yr, start=1):
            write_tnsr(out / f"Yr_{i}.tnsr", y)
            files[f"Yr_{i}"] = f"Yr_{i}.tnsr"
        manifest = self.manifest()
        manifest["files"] = files
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
        return out


def build_corrector(A: TorusField, scales: ScaleVector, plan: TruncationPlan | None = None,
                    solver: SolverConfig = SolverConfig(), F: np.ndarray | None = None,
                    allow_violated: bool = False) -> CorrectorSet:
    """Truncated multiscale corrector N_k for every direction e_j.

    ``plan.tau`` is the regularization used (``scales.tau`` is ignored when a
    plan is given).  ``F`` overrides the right-hand side field (shape
    (d, m, *grid)); by default F = A so column j is A e_j.
    """
    g = A.grid
    if scales.n != g.n:
        raise ValidationError(f"scale vector has n={scales.n}, grid has n={g.n}")
    if g.n > 3:
        raise ValidationError("at most three scales are supported")
    if plan is None:
        plan = choose_parameters(scales).with_tau(scales.tau) if scales.tau > 0 else choose_parameters(scales)
    if not plan.all_separated and not allow_violated:
        bad = [i + 2 for i, ok in enumerate(plan.separated) if not ok]
        detail = ", ".join(f"gap {j}: {plan.checks[j - 2][0]:.4g} > {plan.checks[j - 2][1]:.4g}" for j in bad)
        raise SeparationError(f"scales are not separated ({detail}); group them with the pipeline instead")
    Fv = A.values if F is None else np.asarray(F, dtype=float)
    lev, eng = lifted_expansion(A.values, Fv, g, scales.deltas, plan.tau, plan.ks, 0, solver)
    tau_scales = scales.with_tau(plan.tau)
    direct = eng.lifted_residual(g.n, A.values, Fv, lev.Y)
    residual = float(np.abs(direct).max())
    if g.n > 1:
        Ek = eng.truncation_error(A.values, Fv, lev)
        trunc = float(np.abs(Ek).max())
        mismatch = float(np.abs(direct - Ek).max())
        op, chi, Ahat = eng.cache[g.n]
        red = g.leading(g.n - 1)
        return CorrectorSet(
            grid=g, scales=tau_scales, plan=plan, X=TorusField(g, lev.Y),
            Y0=TorusField(red, lev.Y0), Yo=[TorusField(g, y) for y in lev.Yo],
            Yr=[TorusField(red, y) for y in lev.Yr], Ytilde=[TorusField(g, y) for y in lev.Yt],
            chi=TorusField(g, chi), Ahat=TorusField(red, Ahat), residual=residual,
            truncation_residual=trunc, residual_mismatch=mismatch, mean_defects=lev.mean_defects,
            inner_residuals=lev.inner_residuals, diagnostics=eng.diags,
        )
    return CorrectorSet(
        grid=g, scales=tau_scales, plan=plan, X=TorusField(g, lev.Y), Y0=None, Yo=[], Yr=[], Ytilde=[],
        chi=None, Ahat=None, residual=residual, truncation_residual=residual, residual_mismatch=0.0,
        mean_defects=[], inner_residuals=[], diagnostics=eng.diags,
    )


def corrector_certificates(cs: CorrectorSet, A: TorusField, scales: ScaleVector | None = None,
                           reference_sup: float | None = None, max_ratio: float = 1.05) -> dict:
    """sup|X|, the energy ||grad_hat X|| + tau ||X||, and the final residual.

    With ``reference_sup`` (sup|X| at the coarsest tau of a sweep) the report
    flags a sup norm exceeding ``max_ratio`` times the reference.
    """
    scales = cs.scales if scales is None else scales
    g = cs.grid
    gx = hat_grad(cs.X.values, g, scales.deltas)
    grad_l2 = float(np.sqrt((gx**2).sum(axis=(0, 1)).mean()))
    x_l2 = float(np.sqrt((cs.X.values**2).sum(axis=0).mean()))
    tau = cs.plan.tau
    report = {
        "sup_norm": cs.sup_norm(),
        "energy": grad_l2 + tau * x_l2,
        "grad_l2": grad_l2,
        "x_l2": x_l2,
        "residual": cs.residual,
        "truncation_residual": cs.truncation_residual,
        "tau": tau,
        "uniform": True,
    }
    if reference_sup is not None:
        report["uniform"] = bool(cs.sup_norm() <= max_ratio * reference_sup)
    return report
