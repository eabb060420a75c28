"""Configuration records with calibrated defaults.

Every tunable constant of the construction lives here so that a run can be
reproduced from the JSON dump embedded in its report.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence


@dataclass(frozen=True)
class SolverConfig:
    """Krylov settings for the one-scale cell solves."""

    tol: float = 1e-10
    maxiter: int = 2000
    dealias: bool = True
    # residuals below this absolute level count as converged (right-hand
    # sides that are pure round-off never reach a relative tolerance)
    atol: float = 1e-13


@dataclass(frozen=True)
class SeparationConfig:
    """Calibration constants for scale separation, truncation and tau.

    c_gap is either one number used for every gap or a sequence indexed by
    gap (entry 0 is the gap between scales 1 and 2).
    """

    c_gap: float | tuple[float, ...] = 0.1
    c_tau: float = 0.5
    gamma: float = 0.5
    k_cap: int = 12
    flux_sep_inv: float = 0.5
    ell0: int = 0
    # rate constant c in the budget eps_1 + max exp(-c eps_i/eps_{i+1})
    c_rate: float = 0.5
    # C_0 in eps_{n-m+1}/eps_{n-m} <= C_0 exp(-c eps_{p-1}/eps_p) at a break
    c_break: float = 2.718281828459045

    def c_for(self, gap: int) -> float:
        """Constant for the gap between scales gap+1 and gap+2 (0-based)."""
        if isinstance(self.c_gap, (int, float)):
            return float(self.c_gap)
        values = tuple(self.c_gap)
        return float(values[min(gap, len(values) - 1)])


@dataclass(frozen=True)
class GridConfig:
    res_d1: int = 64
    res_d2: int = 32
    outer_res_n3_d2: int = 16
    memory_budget_bytes: int = 2**31

    def resolution(self, d: int, n: int) -> tuple[int, ...]:
        if d == 1:
            return (self.res_d1,) * n
        if n >= 3:
            return (self.outer_res_n3_d2,) * (n - 1) + (self.res_d2,)
        return (self.res_d2,) * n


@dataclass(frozen=True)
class Config:
    solver: SolverConfig = field(default_factory=SolverConfig)
    separation: SeparationConfig = field(default_factory=SeparationConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    experiment: Mapping[str, Any] = field(default_factory=dict)

    def replace(self, **sections) -> "Config":
        return dataclasses.replace(self, **sections)

    def with_separation(self, **kw) -> "Config":
        return dataclasses.replace(self, separation=dataclasses.replace(self.separation, **kw))

    def with_solver(self, **kw) -> "Config":
        return dataclasses.replace(self, solver=dataclasses.replace(self.solver, **kw))

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["experiment"] = dict(self.experiment)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | None) -> "Config":
        data = dict(data or {})
        unknown = set(data) - {"solver", "separation", "grid", "experiment"}
        if unknown:
            from .errors import ValidationError

            raise ValidationError(f"unknown config sections: {sorted(unknown)}")
        sep = dict(data.get("separation", {}))
        if isinstance(sep.get("c_gap"), Sequence):
            sep["c_gap"] = tuple(float(c) for c in sep["c_gap"])
        return cls(
            solver=SolverConfig(**data.get("solver", {})),
            separation=SeparationConfig(**sep),
            grid=GridConfig(**data.get("grid", {})),
            experiment=dict(data.get("experiment", {})),
        )

    @classmethod
    def load(cls, path: str | os.PathLike | None) -> "Config":
        if path is None:
            return cls()
        return cls.from_dict(json.loads(Path(path).read_text()))


def thread_count() -> int:
    """Parallelism cap taken from HOMOSCALE_THREADS (default: all cores)."""
    raw = os.environ.get("HOMOSCALE_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1
