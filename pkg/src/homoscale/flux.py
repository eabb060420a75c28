"""Flux correctors: U with -Lap_hat U + tau^2 U = G and the antisymmetric Phi.

G = Abar - A - A grad_hat X is the oscillating part of the flux.  U is built
like the corrector, by expanding in the finest ratio, except that every
order only needs a constant-coefficient Laplace solve in y_n:

    -Lap_hat_{n-1} U_0 + tau^2 U_0 = <G>_{y_n}        (recursion on n-1 blocks)
    U_1 = 0
    -Lap_n U_2 = G - <G>_{y_n}
    -Lap_n U_{k+2} = 2 grad_hat_{n-1}.grad_n U_{k+1} + Lap_hat_{n-1} U_k - tau^2 U_k

and V_k = U_0 + sum_{j=2}^{k} delta_n^j U_j.  Then

    Phi_lij = d_l U_ij - d_i U_lj,
    A + A grad X - Abar = div Phi + grad(div U) - tau^2 U    (exact when U is).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corrector import CorrectorSet, TruncationPlan
from .errors import SeparationError, ValidationError
from .torus_field import (
    GridSpec,
    ScaleVector,
    TorusField,
    block_mean,
    expand_last,
    grad_block,
    hat_div,
    hat_grad,
    solve_block_laplacian,
    write_tnsr,
)

__all__ = ["FluxSet", "FluxResidual", "flux_source", "build_flux", "flux_identity_residual", "phi_from_u"]


@dataclass(eq=False)
class FluxSet:
    grid: GridSpec
    scales: ScaleVector
    U: TorusField  # (d, d, *grid) truncated sum V_k
    U0: TorusField | None
    Uk: list  # U_2 .. U_k on the full grid (U_1 = 0 is implicit)
    Phi: TorusField  # (d, d, d, *grid), Phi[l, i, j]
    k: int
    truncation_residual: float  # max |G_k|
    equation_residual: float  # max |-Lap_hat V + tau^2 V - G|
    mean_G: float
    h2_certificate: dict = field(default_factory=dict)

    def manifest(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "scales": self.scales.to_dict(),
            "k": self.k,
            "truncation_residual": self.truncation_residual,
            "equation_residual": self.equation_residual,
            "mean_G": self.mean_G,
            "h2_certificate": self.h2_certificate,
        }

    def save(self, directory: str | os.PathLike) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        files = {"U": "U.tnsr", "Phi": "Phi.tnsr"}
        write_tnsr(out / "U.tnsr", self.U)
        write_tnsr(out / "Phi.tnsr", self.Phi)
        if self.U0 is not None:
            write_tnsr(out / "U0.tnsr", self.U0)
            files["U0"] = "U0.tnsr"
        for j, u in enumerate(self.Uk, start=2):
            write_tnsr(out / f"U_{j}.tnsr", u)
            files[f"U_{j}"] = f"U_{j}.tnsr"
        man = self.manifest()
        man["files"] = files
        (out / "manifest.json").write_text(json.dumps(man, indent=2))
        return out


def _x_values(X) -> np.ndarray:
    if isinstance(X, CorrectorSet):
        return X.X.values
    if isinstance(X, TorusField):
        return X.values
    return np.asarray(X, dtype=float)


def flux_source(A: TorusField, X, Abar, scales: ScaleVector) -> np.ndarray:
    """G_ij = Abar_ij - A_ij - sum_k A_ik (grad_hat X_j)_k."""
    g = A.grid
    gx = hat_grad(_x_values(X), g, scales.deltas)  # [k, j]
    abar = np.asarray(Abar, dtype=float).reshape((g.d, g.d) + (1,) * g.ndim)
    return abar - A.values - np.einsum("ik...,kj...->ij...", A.values, gx)


def _lap_hat(u, grid, deltas, blocks):
    return hat_div(hat_grad(u, grid, deltas, blocks), grid, deltas, blocks)


def _flux_recursion(G: np.ndarray, grid: GridSpec, deltas: Sequence[float], tau: float, ks: Sequence[int]):
    """Returns (V, U0, [U_2..U_k], G_k residual array or None)."""
    tau2 = tau * tau
    n = grid.n
    if n == 1:
        return solve_block_laplacian(G, grid, 0, tau2), None, [], None
    b = n - 1
    d = grid.d
    dn = deltas[b]
    outer = range(b)
    red = grid.leading(b)
    Gbar = block_mean(G, grid, b)
    U0, _, _, _ = _flux_recursion(Gbar, red, deltas[:b], tau, ks[: b - 1])
    k = max(2, int(ks[b - 1]))
    U = [None, np.zeros(G.shape), solve_block_laplacian(G - expand_last(Gbar, d), grid, b)]
    for j in range(1, k - 1):
        rhs = (2.0 * hat_div(grad_block(U[j + 1], grid, b), grid, deltas, outer)
               + _lap_hat(U[j], grid, deltas, outer) - tau2 * U[j])
        U.append(solve_block_laplacian(rhs, grid, b))
    V = np.broadcast_to(expand_last(U0, d), G.shape).copy()
    for j in range(2, k + 1):
        V += dn**j * U[j]
    Uk, Ukm1 = U[k], U[k - 1]
    Gk = (dn**k * (-_lap_hat(Uk, grid, deltas, outer) + tau2 * Uk)
          + dn ** (k - 1) * (-2.0 * hat_div(grad_block(Uk, grid, b), grid, deltas, outer)
                             - _lap_hat(Ukm1, grid, deltas, outer) + tau2 * Ukm1))
    return V, U0, U[2:], Gk


def phi_from_u(U: np.ndarray, grid: GridSpec, deltas: Sequence[float]) -> np.ndarray:
    """Phi[l, i, j] = (grad_hat)_l U_ij - (grad_hat)_i U_lj; antisymmetric in (l, i) bit for bit."""
    gu = hat_grad(U, grid, deltas)
    return gu - np.swapaxes(gu, 0, 1)


def build_flux(A: TorusField, X, Abar, scales: ScaleVector, plan: TruncationPlan | None = None,
               flux_sep_inv: float = 0.5, mean_tol: float = 1e-8) -> FluxSet:
    """Flux corrector for the corrector X and effective matrix Abar.

    tau and the truncation orders come from ``plan`` (default: the plan
    stored with a CorrectorSet).  The scales need only the weak separation
    eps_{j+1} <= flux_sep_inv * eps_j.
    """
    g = A.grid
    if plan is None:
        if not isinstance(X, CorrectorSet):
            raise ValidationError("a plan is required when X is not a CorrectorSet")
        plan = X.plan
    eps = scales.epsilons
    for j in range(1, len(eps)):
        if eps[j] > flux_sep_inv * eps[j - 1]:
            raise SeparationError(
                f"flux construction needs eps_{j + 1} <= {flux_sep_inv} eps_{j}; got {eps[j]:.4g} vs {eps[j - 1]:.4g}"
            )
    G = flux_source(A, X, Abar, scales)
    mean_G = float(np.abs(G.mean(axis=tuple(range(2, G.ndim)))).max())
    if mean_G > mean_tol:
        raise ValidationError(f"<G> = {mean_G:.3e} exceeds {mean_tol:.1e}; Abar is inconsistent with X")
    # the leftover round-off mean would be amplified by 1/tau^2 in U
    G = G - G.mean(axis=tuple(range(2, G.ndim)), keepdims=True)
    tau = plan.tau
    V, U0, Uk, Gk = _flux_recursion(G, g, scales.deltas, tau, plan.ks)
    eq = -_lap_hat(V, g, scales.deltas, range(g.n)) + tau * tau * V - G
    Phi = phi_from_u(V, g, scales.deltas)
    h2 = _h2_certificate(V, G, g, scales.deltas, tau)
    return FluxSet(
        grid=g, scales=scales.with_tau(tau), U=TorusField(g, V),
        U0=None if U0 is None else TorusField(g.leading(g.n - 1), U0),
        Uk=[TorusField(g, u) for u in Uk], Phi=TorusField(g, Phi), k=max(2, plan.ks[-1]) if g.n > 1 else 0,
        truncation_residual=0.0 if Gk is None else float(np.abs(Gk).max()),
        equation_residual=float(np.abs(eq).max()), mean_G=mean_G, h2_certificate=h2,
    )


def _h2_certificate(U, G, grid, deltas, tau) -> dict:
    """||grad_hat^2 U|| + tau ||grad_hat U|| + tau^2 ||U|| against ||G|| (L2 norms)."""
    gu = hat_grad(U, grid, deltas)
    ggu = hat_grad(gu, grid, deltas)

    def l2(v, rank):
        return float(np.sqrt((v**2).reshape((-1,) + grid.shape).sum(axis=0).mean()))

    lhs = l2(ggu, 4) + tau * l2(gu, 3) + tau * tau * l2(U, 2)
    g2 = l2(G, 2)
    return {"lhs": lhs, "G_l2": g2, "constant": lhs / g2 if g2 > 0 else 0.0}


@dataclass(frozen=True)
class FluxResidual:
    """sup norms of the identity residual and its two contributors."""

    residual: float  # max_ij sup |A + A grad X - Abar - div Phi|
    grad_div_u: float  # sup |grad(div U)|
    tau2_u: float  # tau^2 sup |U|
    decomposition_gap: float  # sup |residual - (grad div U - tau^2 U)|
    residual_tensor_norm: float  # sup of the component-sum norm

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def flux_identity_residual(A: TorusField, X, Abar, flux: FluxSet, scales: ScaleVector) -> FluxResidual:
    """Evaluate A + A grad_hat X - Abar - div_hat Phi on the lifted grid."""
    g = A.grid
    dl = scales.deltas
    G = flux_source(A, X, Abar, scales)
    div_phi = hat_div(flux.Phi.values, g, dl)  # contracts l
    lhs = -G - div_phi
    U = flux.U.values
    div_u = hat_div(U, g, dl)  # (div U)_j = sum_i d_i U_ij
    grad_div = hat_grad(div_u, g, dl)  # [i, j]
    tau2 = flux.scales.tau**2
    other = grad_div - tau2 * U
    return FluxResidual(
        residual=float(np.abs(lhs).max()),
        grad_div_u=float(np.abs(grad_div).max()),
        tau2_u=float(tau2 * np.abs(U).max()),
        decomposition_gap=float(np.abs(lhs - other).max()),
        residual_tensor_norm=float(np.abs(lhs).reshape((-1,) + g.shape).sum(axis=0).max()),
    )
