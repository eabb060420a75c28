"""Homogenization driver for arbitrary scale vectors.

Scales are grouped from the finest one outward.  The innermost group that
is separated under the doubled-constant scheme is homogenized
simultaneously, pointwise in the frozen outer blocks; the resulting
coefficient on the outer blocks is processed the same way until a constant
matrix remains.  A group of one scale is a plain reiteration step.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .config import Config, SeparationConfig
from .corrector import build_corrector, choose_parameters, hat_matrix, lifted_expansion, one_scale_corrector
from .effective import effective_matrix
from .errors import ResolutionError, ValidationError
from .torus_field import AnalyticCoefficient, GridSpec, ScaleVector, TorusField, build_field, hat_grad

__all__ = [
    "GapCheck",
    "ScaleGrouping",
    "PipelineReport",
    "group_scales",
    "homogenize",
    "toy_averaging",
    "sin_modes",
    "spectral_tail",
    "run_experiment",
    "EXPERIMENTS",
]

log = logging.getLogger(__name__)

NEAR_THRESHOLD = 1.25
TAIL_LIMIT = 1e-6


def _sep(config) -> SeparationConfig:
    if isinstance(config, Config):
        return config.separation
    if isinstance(config, SeparationConfig):
        return config
    if config is None:
        return SeparationConfig()
    raise ValidationError(f"unsupported config type {type(config).__name__}")


# --------------------------------------------------------------------------
# grouping
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GapCheck:
    """eps_j <= 2^{m-n} c_j eps_{j-1} / (1 + log(eps_{n-m+1}/eps_{j-1})) for one j (1-based)."""

    j: int
    lhs: float
    rhs: float

    @property
    def ok(self) -> bool:
        return self.lhs <= self.rhs

    @property
    def near_threshold(self) -> bool:
        return self.rhs > 0 and 1.0 / NEAR_THRESHOLD < self.lhs / self.rhs < NEAR_THRESHOLD


@dataclass(frozen=True)
class ScaleGrouping:
    epsilons: tuple[float, ...]
    m: int  # size of the innermost simultaneous group
    groups: tuple[tuple[int, ...], ...]  # 1-based scale indices, outermost group first
    break_gap: int | None  # scales break_gap and break_gap + 1 (1-based) are split
    branch: int | None  # 1: eps_{n-m+1} > 2^{m+1-n} c eps_{n-m}; 2: the witness inequality
    witness: int | None  # p of the second branch (or n-m+1 for the first)
    checks: tuple[GapCheck, ...]  # the accepted group's checks
    rejected: tuple[GapCheck, ...]  # checks of the first larger group that failed
    breakpoint: tuple[float, float] | None  # (eps_{n-m+1}/eps_{n-m}, C_0 exp(-c eps_{p-1}/eps_p))
    warnings: tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return len(self.epsilons)

    def near_threshold(self) -> list[int]:
        return [c.j for c in self.checks + self.rejected if c.near_threshold]

    def to_dict(self) -> dict:
        return {
            "epsilons": list(self.epsilons),
            "m": self.m,
            "groups": [list(g) for g in self.groups],
            "break_gap": self.break_gap,
            "branch": self.branch,
            "witness": self.witness,
            "checks": [{"j": c.j, "lhs": c.lhs, "rhs": c.rhs, "ok": c.ok} for c in self.checks],
            "rejected": [{"j": c.j, "lhs": c.lhs, "rhs": c.rhs, "ok": c.ok} for c in self.rejected],
            "breakpoint": None if self.breakpoint is None else list(self.breakpoint),
            "near_threshold": self.near_threshold(),
            "warnings": list(self.warnings),
        }


def _group_checks(eps: Sequence[float], m: int, sep: SeparationConfig) -> list[GapCheck]:
    n = len(eps)
    anchor = eps[n - m]  # eps_{n-m+1}
    out = []
    for j in range(n - m + 2, n + 1):  # 1-based
        e_j, e_prev = eps[j - 1], eps[j - 2]
        rhs = 2.0 ** (m - n) * sep.c_for(j - 2) * e_prev / (1.0 + math.log(anchor / e_prev))
        out.append(GapCheck(j, e_j, rhs))
    return out


def group_scales(scales: ScaleVector | Sequence[float], config=None) -> ScaleGrouping:
    """Largest m such that the m finest scales pass the doubled-constant checks."""
    eps = tuple(scales.epsilons if isinstance(scales, ScaleVector) else ScaleVector(tuple(scales)).epsilons)
    n = len(eps)
    if n < 2:
        raise ValidationError("grouping needs at least two scales")
    sep = _sep(config)
    m, checks, rejected = 1, [], []
    for cand in range(2, n + 1):
        cks = _group_checks(eps, cand, sep)
        if all(c.ok for c in cks):
            m, checks = cand, cks
        else:
            rejected = cks
            break
    warnings = []
    if m == 1:
        warnings.append("no pair of scales is separated; pure reiteration, the convergence rate is trivial")
        groups = tuple((i,) for i in range(1, n + 1))
        return ScaleGrouping(eps, 1, groups, n - 1, 1, n, (), tuple(rejected), None, tuple(warnings))
    groups = tuple((i,) for i in range(1, n - m + 1)) + (tuple(range(n - m + 1, n + 1)),)
    if m == n:
        return ScaleGrouping(eps, m, groups, None, None, None, tuple(checks), (), None, ())
    # which alternative holds at the break between scales n-m and n-m+1
    top, below = eps[n - m], eps[n - m - 1]
    branch, witness, bp = None, None, None
    if top > 2.0 ** (m + 1 - n) * sep.c_for(n - m - 1) * below:
        branch, witness = 1, n - m + 1
        warnings.append(f"scales {n - m} and {n - m + 1} are not separated; the rate at this break is trivial")
    else:
        for p in range(n - m + 2, n + 1):
            rhs = 2.0 ** (m - n) * sep.c_for(p - 2) * eps[p - 2] / (1.0 + math.log(below / top))
            if eps[p - 1] > rhs:
                branch, witness = 2, p
                c = 2.0 ** (m - n) * sep.c_for(p - 2)
                bp = (top / below, sep.c_break * math.exp(-c * eps[p - 2] / eps[p - 1]))
                break
        if branch is None:
            warnings.append("neither break alternative holds; check the separation constants")
    return ScaleGrouping(eps, m, groups, n - m, branch, witness, tuple(checks), tuple(rejected), bp, tuple(warnings))


# --------------------------------------------------------------------------
# homogenization driver
# --------------------------------------------------------------------------


def spectral_tail(f: TorusField) -> float:
    """Fraction of the fluctuation energy in the top two frequency shells of any axis.

    A sampled field cannot show energy beyond Nyquist; energy piling up next
    to it is the visible symptom.
    """
    g = f.grid
    vals = f.values.reshape((-1,) + g.shape)
    spec = np.abs(np.fft.fftn(vals, axes=tuple(range(1, vals.ndim)), norm="forward")) ** 2
    mean_idx = (slice(None),) + (0,) * g.ndim
    total = spec.sum() - spec[mean_idx].sum()
    if total <= 1e-30 * max(1.0, float(spec.sum())):
        return 0.0
    mask = np.zeros(g.shape, dtype=bool)
    for ax, r in enumerate(g.shape):
        k = np.abs(np.fft.fftfreq(r, 1.0 / r))
        sh = [1] * g.ndim
        sh[ax] = r
        mask |= (k >= r // 2 - 1).reshape(sh)
    return float(spec[:, mask].sum() / total)


def _is_constant(f: TorusField) -> bool:
    v = f.values.reshape(f.values.shape[:2] + (-1,))
    return bool(np.ptp(v, axis=2).max() <= 1e-14 * max(1.0, np.abs(v).max()))


@dataclass
class Stage:
    kind: str  # "constant", "simultaneous", "reiterated", "single"
    scales: tuple[int, ...]  # 1-based indices of the scales consumed
    remaining: int  # blocks left after the stage
    summary: dict

    def to_dict(self) -> dict:
        return {"kind": self.kind, "scales": list(self.scales), "remaining": self.remaining, **self.summary}


@dataclass
class PipelineReport:
    Abar: np.ndarray
    stages: list
    groupings: list
    budget: dict
    config: dict
    measured: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def stage_kinds(self) -> list[str]:
        return [s.kind for s in self.stages]

    def to_dict(self) -> dict:
        return {
            "Abar": np.asarray(self.Abar).tolist(),
            "stages": [s.to_dict() for s in self.stages],
            "groupings": [g.to_dict() for g in self.groupings],
            "budget": self.budget,
            "config": self.config,
            "measured": self.measured,
            "warnings": self.warnings,
        }

    def save(self, directory: str | os.PathLike) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "pipeline_report.json"
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


def error_budget(scales: ScaleVector, c: float) -> dict:
    eps = scales.epsilons
    terms = [math.exp(-c * eps[i] / eps[i + 1]) for i in range(len(eps) - 1)]
    return {"eps1": eps[0], "exp_terms": terms, "c": c, "total": eps[0] + (max(terms) if terms else 0.0)}


def _field_summary(M) -> dict:
    if isinstance(M, TorusField):
        v = M.values.reshape(M.values.shape[:2] + (-1,))
        return {"matrix_min": v.min(axis=2).tolist(), "matrix_max": v.max(axis=2).tolist(),
                "matrix_mean": v.mean(axis=2).tolist(), "spectral_tail": spectral_tail(M)}
    return {"matrix": np.asarray(M).tolist()}


def _parametric_effective(F: TorusField, sub: ScaleVector, n_param: int, config: Config) -> TorusField:
    """Homogenize the trailing blocks of F simultaneously, pointwise in the leading ones."""
    g = F.grid
    plan = choose_parameters(sub, config)
    deltas = sub.deltas
    lev, _ = lifted_expansion(F.values, F.values, g, deltas, plan.tau, plan.ks, n_param, config.solver)
    ws = [1.0] * n_param + list(deltas)
    gx = hat_grad(lev.Y, g, ws, range(n_param, g.n))
    flux = F.values + np.einsum("ik...,kj...->ij...", F.values, gx)
    red = g.leading(n_param)
    vals = flux.reshape(flux.shape[:2] + red.shape + (-1,)).mean(axis=-1)
    return TorusField(red, vals)


def homogenize(A, scales: ScaleVector | Sequence[float], config: Config | None = None,
               grid: GridSpec | None = None) -> PipelineReport:
    """Group, homogenize stage by stage, and return the final matrix with its budget.

    ``A`` is an AnalyticCoefficient (sampled on ``grid`` or the configured
    resolution) or a TorusField already on the lifted grid.
    """
    config = config or Config()
    scales = scales if isinstance(scales, ScaleVector) else ScaleVector(tuple(scales))
    if isinstance(A, AnalyticCoefficient):
        grid = grid or GridSpec(A.d, A.n, config.grid.resolution(A.d, A.n), config.grid.memory_budget_bytes)
        field_ = build_field(A, grid)
    elif isinstance(A, TorusField):
        field_ = A
    else:
        raise ValidationError("A must be an AnalyticCoefficient or a TorusField")
    if field_.grid.n != scales.n:
        raise ValidationError(f"coefficient has {field_.grid.n} blocks, scale vector has {scales.n}")
    if scales.n > 3:
        raise ValidationError("at most three scales are supported")
    sep = config.separation
    budget = error_budget(scales, sep.c_rate)
    stages: list[Stage] = []
    groupings: list[ScaleGrouping] = []
    warnings: list[str] = []

    if _is_constant(field_):
        M = field_.values.reshape(field_.values.shape[:2] + (-1,))[:, :, 0].copy()
        stages.append(Stage("constant", tuple(range(1, scales.n + 1)), 0, _field_summary(M)))
        budget = {**budget, "total": scales.epsilons[0], "exp_terms": []}
        return PipelineReport(M, stages, groupings, budget, config.to_dict())

    cur = field_
    eps = list(scales.epsilons)
    while True:
        n = cur.grid.n
        if n == 1:
            M = np.asarray(hat_matrix(cur, one_scale_corrector(cur, config.solver)))
            kind = "reiterated" if stages else "single"
            stages.append(Stage(kind, (1,), 0, _field_summary(M)))
            break
        grouping = group_scales(eps, sep)
        groupings.append(grouping)
        warnings.extend(grouping.warnings)
        m = grouping.m
        if m == 1:
            nxt = hat_matrix(cur, one_scale_corrector(cur, config.solver))
            consumed = (n,)
            kind = "reiterated"
        elif m == n:
            sv = ScaleVector(tuple(eps))
            cs = build_corrector(cur, sv, choose_parameters(sv, config), config.solver)
            M = effective_matrix(cur, cs, sv)
            summary = _field_summary(M)
            summary.update({"ks": list(cs.plan.ks), "tau": cs.plan.tau, "residual": cs.residual})
            stages.append(Stage("simultaneous", tuple(range(1, n + 1)), 0, summary))
            break
        else:
            n_param = n - m
            nxt = _parametric_effective(cur, ScaleVector(tuple(eps[n_param:])), n_param, config)
            consumed = tuple(range(n_param + 1, n + 1))
            kind = "simultaneous"
        tail = spectral_tail(nxt)
        summary = _field_summary(nxt)
        stages.append(Stage(kind, consumed, nxt.grid.n, summary))
        if tail > TAIL_LIMIT:
            raise ResolutionError(
                f"homogenized coefficient is under-resolved on the outer grid (tail energy {tail:.2e} > {TAIL_LIMIT:g})"
            )
        cur = nxt
        eps = eps[: nxt.grid.n]
    return PipelineReport(M, stages, groupings, budget, config.to_dict(), warnings=warnings)


# --------------------------------------------------------------------------
# toy averaging
# --------------------------------------------------------------------------


def _modes(spec) -> dict:
    if isinstance(spec, Mapping):
        return {int(k): complex(v) for k, v in spec.items()}
    return {int(k): complex(v) for k, v in spec}


def _exp_integral(phi: np.ndarray) -> np.ndarray:
    """int_0^1 exp(2 pi i phi x) dx; the phase of the endpoint uses phi mod 1."""
    phi = np.asarray(phi, dtype=float)
    out = np.ones(phi.shape, dtype=complex)
    nz = phi != 0
    frac = np.mod(phi[nz], 1.0)
    out[nz] = (np.exp(2j * np.pi * frac) - 1.0) / (2j * np.pi * phi[nz])
    return out


def toy_averaging(f_modes, g_modes, eps: float, beta: float) -> float:
    """rho = |int_0^1 f(x/(beta eps)) g(x/eps) dx - mean(f) mean(g)|.

    ``f_modes`` and ``g_modes`` map integer frequencies k to the complex
    coefficient of exp(2 pi i k t).  Every product term is integrated in
    closed form.
    """
    if beta <= 1:
        raise ValidationError("beta must exceed 1")
    if eps <= 0:
        raise ValidationError("eps must be positive")
    fm, gm = _modes(f_modes), _modes(g_modes)
    kf = np.array(list(fm), dtype=float)
    kg = np.array(list(gm), dtype=float)
    cf = np.array(list(fm.values()))
    cg = np.array(list(gm.values()))
    phi = kf[:, None] / (beta * eps) + kg[None, :] / eps
    total = (cf[:, None] * cg[None, :] * _exp_integral(phi)).sum()
    return float(abs(total - fm.get(0, 0.0) * gm.get(0, 0.0)))


def sin_modes(k: int = 1, amplitude: float = 1.0) -> dict:
    """Coefficients of amplitude * sin(2 pi k t)."""
    return {k: -0.5j * amplitude, -k: 0.5j * amplitude}


def run_experiment(name: str, config: Config | None = None, out: str | os.PathLike | None = None):
    from .experiments import run_experiment as _run

    return _run(name, config, out)


EXPERIMENTS = (
    "rate_1d",
    "rate_2d",
    "counterexample_nonseparated",
    "counterexample_exponential",
    "toy_averaging",
    "lipschitz_probe",
)
