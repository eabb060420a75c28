"""Nondegenerate cell problems on the innermost block, solved parametrically.

The equation is

    -div_n (A grad_n Y) + tau^2 Y = div_n F + G      on T^d (innermost block),

with every outer grid node an independent problem.  Derivatives are applied
in Fourier space and A pointwise in sample space, optionally on a 3/2-padded
grid.  Batched preconditioned conjugate gradients (per-node step lengths) do
the solve; the preconditioner inverts the constant-coefficient operator built
from the node average of A.  A transpose-free BiCGSTAB takes over when A is
not symmetric.

The same operator machinery also solves the full lifted problem
-div_hat (A grad_hat X) + tau^2 X = ... on T^{d x n}; that direct solve is
used as an independent reference for the recursive construction.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.fft as sfft

from .config import SolverConfig, thread_count
from .errors import SolverError, ValidationError
from .torus_field import GridSpec, ScaleVector, TorusField, div_block, grad_block

__all__ = [
    "CellProblem",
    "SolveDiagnostics",
    "DivFormOperator",
    "krylov_solve",
    "solve_cell_array",
    "solve_inner",
    "residual_inner",
    "solve_lifted",
    "lifted_residual",
]

log = logging.getLogger(__name__)
TWO_PI = 2.0 * np.pi


# --------------------------------------------------------------------------
# spectral layout helpers (rfftn over the operator axes)
# --------------------------------------------------------------------------


TAU2_FLOOR = 1e-14


def _axis_freqs(r: int, real_axis: bool) -> np.ndarray:
    if real_axis:
        k = np.arange(r // 2 + 1, dtype=float)
        if r % 2 == 0:
            k[-1] = 0.0
        return k
    k = np.fft.fftfreq(r, 1.0 / r)
    if r % 2 == 0:
        k[r // 2] = 0.0
    return k


def _copy_blocks(shape_small: Sequence[int], shape_big: Sequence[int]):
    """Slice pairs mapping the modes |k| < r/2 between two rfftn layouts.

    Both shapes are physical sizes of the operator axes; the last axis is the
    half-spectrum axis.  Yields (small_slices, big_slices).
    """
    per_axis = []
    nax = len(shape_small)
    for j, (r, m) in enumerate(zip(shape_small, shape_big)):
        h = r // 2
        if j == nax - 1:
            per_axis.append([(slice(0, h), slice(0, h))])
        else:
            per_axis.append([(slice(0, h), slice(0, h)),
                             (slice(r - h + 1, r), slice(m - h + 1, m))])
    for combo in itertools.product(*per_axis):
        yield tuple(c[0] for c in combo), tuple(c[1] for c in combo)


def _spec_shape(shape: Sequence[int]) -> tuple[int, ...]:
    return tuple(shape[:-1]) + (shape[-1] // 2 + 1,)


# --------------------------------------------------------------------------
# operator
# --------------------------------------------------------------------------


class DivFormOperator:
    """u -> -div_w (A grad_w u) + tau^2 u acting on the trailing ``len(shape)`` axes.

    Gradient component c has Fourier symbol 2 pi i sum_a W[c, a] k_a, where a
    runs over the operator axes.  For an innermost-block solve W is the
    identity; for the lifted operator W holds the inverse scale ratios.

    ``a`` has shape (d, d, *batch, *shape) where batch axes broadcast against
    the batch axes of the iterates.
    """

    def __init__(self, a: np.ndarray, shape: Sequence[int], weights: np.ndarray, tau: float,
                 dealias: bool = False):
        self.shape = tuple(int(s) for s in shape)
        self.nax = len(self.shape)
        self.axes = tuple(range(-self.nax, 0))
        self.weights = np.asarray(weights, dtype=float)
        self.d = self.weights.shape[0]
        self.tau2 = float(tau) ** 2
        self.workers = thread_count()
        sshape = _spec_shape(self.shape)
        freqs = []
        for j, r in enumerate(self.shape):
            k = _axis_freqs(r, j == self.nax - 1)
            view = [1] * self.nax
            view[j] = -1
            freqs.append(k.reshape(view))
        self.kc = [sum(self.weights[c, j] * freqs[j] for j in range(self.nax)) for c in range(self.d)]
        self.kc = [np.broadcast_to(k, sshape) for k in self.kc]
        # modes at a Nyquist index are dropped: padding them for dealiasing breaks symmetry
        nyq = np.zeros(sshape, dtype=bool)
        for j, r in enumerate(self.shape):
            if r % 2 == 0:
                idx = [slice(None)] * self.nax
                idx[j] = r // 2
                nyq[tuple(idx)] = True
        self.nyquist = nyq
        self.null = np.all([k == 0 for k in self.kc], axis=0) | nyq

        # matrices that are symmetric up to solver noise (e.g. homogenized ones) are symmetrized
        self.symmetric = bool(np.allclose(a, np.swapaxes(a, 0, 1), rtol=0, atol=1e-10 * np.abs(a).max()))
        if self.symmetric:
            a = 0.5 * (a + np.swapaxes(a, 0, 1))
        self.dealias = dealias
        if dealias:
            self.big = tuple(2 * ((3 * r + 3) // 4) for r in self.shape)
            self.a = self._resample(a, self.shape, self.big)
        else:
            self.big = self.shape
            self.a = a
        abar = a.mean(axis=tuple(range(a.ndim - self.nax, a.ndim)))
        abar = 0.5 * (abar + np.swapaxes(abar, 0, 1))
        # a tau^2 below round-off of the smallest nonzero symbol only amplifies noise in the mean
        kmin = min((float(np.abs(k[k != 0]).min()) for k in self.kc if np.any(k != 0)), default=1.0)
        if 0 < self.tau2 < TAU2_FLOOR * float(np.abs(abar).max()) * (TWO_PI * kmin) ** 2:
            self.tau2 = 0.0
        sym = np.zeros(abar.shape[2:] + sshape)
        for c in range(self.d):
            for e in range(self.d):
                sym = sym + (TWO_PI**2) * abar[c, e][(...,) + (None,) * self.nax] * (self.kc[c] * self.kc[e])
        sym = sym + self.tau2
        with np.errstate(divide="ignore"):
            self.pinv = np.where((sym > 0) & ~nyq, 1.0 / np.where(sym > 0, sym, 1.0), 0.0)

    def _fwd(self, u):
        return sfft.rfftn(u, axes=self.axes, norm="forward", workers=self.workers)

    def _inv(self, uh, shape):
        return sfft.irfftn(uh, s=shape, axes=self.axes, norm="forward", workers=self.workers)

    def _resample(self, a, small, big):
        ah = self._fwd(a)
        out = np.zeros(ah.shape[: ah.ndim - self.nax] + _spec_shape(big), dtype=complex)
        lead = (slice(None),) * (ah.ndim - self.nax)
        for s_sl, b_sl in _copy_blocks(small, big):
            out[lead + b_sl] = ah[lead + s_sl]
        return self._inv(out, big)

    def _pad(self, uh):
        if not self.dealias:
            return uh
        out = np.zeros(uh.shape[: uh.ndim - self.nax] + _spec_shape(self.big), dtype=complex)
        lead = (slice(None),) * (uh.ndim - self.nax)
        for s_sl, b_sl in _copy_blocks(self.shape, self.big):
            out[lead + b_sl] = uh[lead + s_sl]
        return out

    def _truncate(self, uh):
        if not self.dealias:
            return uh
        out = np.zeros(uh.shape[: uh.ndim - self.nax] + _spec_shape(self.shape), dtype=complex)
        lead = (slice(None),) * (uh.ndim - self.nax)
        for s_sl, b_sl in _copy_blocks(self.shape, self.big):
            out[lead + s_sl] = uh[lead + b_sl]
        return out

    def flux(self, u):
        """A grad u sampled on the operator grid, shape (d, *u.shape)."""
        uh = self._fwd(u)
        g = np.stack([self._inv(self._pad(TWO_PI * 1j * k * uh), self.big) for k in self.kc])
        return np.einsum("ij...,j...->i...", self.a, g)

    def divergence(self, fl):
        """-div of a flux sampled on the operator grid, back on the base grid."""
        out = 0
        for c in range(self.d):
            out = out - TWO_PI * 1j * self.kc[c] * self._truncate(self._fwd(fl[c]))
        out = np.where(self.nyquist, 0, out)
        return self._inv(out, self.shape)

    def __call__(self, u):
        return self.divergence(self.flux(u)) + self.tau2 * u

    def precondition(self, r):
        return self._inv(self._fwd(r) * self.pinv, self.shape)

    def project(self, u):
        """Remove Nyquist modes and, for tau = 0, the null-space modes."""
        uh = self._fwd(u)
        uh = np.where(self.null if self.tau2 == 0 else self.nyquist, 0, uh)
        return self._inv(uh, self.shape)

    def null_content(self, u) -> np.ndarray:
        """Per-batch size of the null-space component of u."""
        uh = self._fwd(u)
        return np.sqrt((np.abs(np.where(self.null, uh, 0)) ** 2).sum(axis=self.axes))


# --------------------------------------------------------------------------
# batched Krylov
# --------------------------------------------------------------------------


def _dot(u, v, axes):
    return (u * v).sum(axis=axes)


def _rms(u, axes):
    n = np.prod([u.shape[a] for a in axes])
    return np.sqrt((u * u).sum(axis=axes) / n)


def _expand(x, nax):
    return x[(...,) + (None,) * nax]


@dataclass(frozen=True)
class SolveDiagnostics:
    iterations: np.ndarray
    relative_residual: float
    absolute_residual: float
    method: str
    converged: bool
    norm_y: float = float("nan")
    norm_grad: float = float("nan")
    tau: float = 0.0

    @property
    def max_iterations(self) -> int:
        return int(np.max(self.iterations)) if np.size(self.iterations) else 0

    def energy_constant(self, norm_f: float, norm_g: float = 0.0) -> float:
        """Measured C_d in ||grad Y|| + tau ||Y|| <= C_d (||F|| + tau^{-1} ||G||)."""
        lhs = self.norm_grad + self.tau * self.norm_y
        rhs = norm_f + (norm_g / self.tau if norm_g > 0 and self.tau > 0 else 0.0)
        return lhs / rhs if rhs > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "max_iterations": self.max_iterations,
            "relative_residual": self.relative_residual,
            "absolute_residual": self.absolute_residual,
            "method": self.method,
            "converged": self.converged,
            "norm_y": self.norm_y,
            "norm_grad": self.norm_grad,
        }


def krylov_solve(op: DivFormOperator, b: np.ndarray, cfg: SolverConfig = SolverConfig(),
                 x0: np.ndarray | None = None) -> tuple[np.ndarray, SolveDiagnostics]:
    """Solve op(x) = b independently for every batch entry of b."""
    axes = op.axes
    nax = op.nax
    b = op.project(b)
    bnorm = _rms(b, axes)
    scale = float(bnorm.max()) if bnorm.size else 0.0
    thresh = np.maximum(cfg.tol * bnorm, cfg.atol * scale)
    if scale == 0.0:
        x = np.zeros_like(b)
        return x, SolveDiagnostics(np.zeros(bnorm.shape, int), 0.0, 0.0, "trivial", True, tau=np.sqrt(op.tau2))
    method = "pcg" if op.symmetric else "bicgstab"
    if method == "pcg":
        x, its = _pcg(op, b, x0, thresh, cfg.maxiter, axes, nax)
    else:
        x, its = _bicgstab(op, b, x0, thresh, cfg.maxiter, axes, nax)
    res = _rms(op(x) - b, axes)
    ok = res <= np.maximum(thresh * 10, 0)  # true residual may drift slightly
    rel = res / np.where(bnorm > 0, bnorm, 1.0)
    rel = np.where(bnorm > 0, rel, 0.0)
    diag = SolveDiagnostics(its, float(rel.max()), float(res.max()), method, bool(ok.all()), tau=np.sqrt(op.tau2))
    if not ok.all():
        worst = np.unravel_index(int(np.argmax(res / np.maximum(thresh, 1e-300))), res.shape)
        raise SolverError(
            f"{method} did not converge in {cfg.maxiter} iterations "
            f"(worst node {worst}, residual {res[worst]:.3e}, target {thresh[worst]:.3e})",
            worst_node=worst, residual=float(res[worst]),
        )
    return x, diag


def _pcg(op, b, x0, thresh, maxiter, axes, nax):
    x = np.zeros_like(b) if x0 is None else x0.copy()
    r = b - op(x) if x0 is not None else b.copy()
    z = op.precondition(r)
    p = z.copy()
    rz = _dot(r, z, axes)
    its = np.zeros(rz.shape, dtype=int)
    active = _rms(r, axes) > thresh
    for _ in range(maxiter):
        if not active.any():
            break
        ap = op(p)
        pap = _dot(p, ap, axes)
        alpha = np.where(active & (pap != 0), rz / np.where(pap != 0, pap, 1.0), 0.0)
        x += _expand(alpha, nax) * p
        r -= _expand(alpha, nax) * ap
        its += active
        active = active & (_rms(r, axes) > thresh)
        z = op.precondition(r)
        rz_new = _dot(r, z, axes)
        beta = np.where(active & (rz != 0), rz_new / np.where(rz != 0, rz, 1.0), 0.0)
        p = z + _expand(beta, nax) * p
        rz = rz_new
    return x, its


def _bicgstab(op, b, x0, thresh, maxiter, axes, nax):
    x = np.zeros_like(b) if x0 is None else x0.copy()
    r = b - op(x) if x0 is not None else b.copy()
    rhat = r.copy()
    shape = _dot(r, r, axes).shape
    rho = np.ones(shape)
    alpha = np.ones(shape)
    omega = np.ones(shape)
    v = np.zeros_like(b)
    p = np.zeros_like(b)
    its = np.zeros(shape, dtype=int)
    active = _rms(r, axes) > thresh

    def safe(num, den):
        return np.where(active & (den != 0), num / np.where(den != 0, den, 1.0), 0.0)

    for _ in range(maxiter):
        if not active.any():
            break
        rho_new = _dot(rhat, r, axes)
        beta = safe(rho_new * alpha, rho * omega)
        p = r + _expand(beta, nax) * (p - _expand(omega, nax) * v)
        phat = op.precondition(p)
        v = op(phat)
        alpha = safe(rho_new, _dot(rhat, v, axes))
        x += _expand(alpha, nax) * phat
        s = r - _expand(alpha, nax) * v
        its += active
        done = _rms(s, axes) <= thresh
        shat = op.precondition(s)
        t = op(shat)
        omega = np.where(done, 0.0, safe(_dot(t, s, axes), _dot(t, t, axes)))
        x += _expand(omega, nax) * shat
        r = np.where(_expand(active, nax), s - _expand(omega, nax) * t, r)
        rho = rho_new
        active = active & ~done & (_rms(r, axes) > thresh)
        # restart entries that broke down
        broke = active & (np.abs(rho) < 1e-300)
        if broke.any():
            rhat = np.where(_expand(broke, nax), r, rhat)
            rho = np.where(broke, 1.0, rho)
    return x, its


# --------------------------------------------------------------------------
# parametric innermost-block solves on arrays
# --------------------------------------------------------------------------


def solve_cell_array(a: np.ndarray, rhs: np.ndarray, d: int, tau: float,
                     cfg: SolverConfig = SolverConfig()) -> tuple[np.ndarray, SolveDiagnostics]:
    """Solve -div(A grad y) + tau^2 y = rhs on the trailing d axes.

    ``a`` has shape (d, d, *outer, *inner) and ``rhs`` (*extra, *outer, *inner);
    for tau = 0 the null-space content of rhs is discarded and y has zero
    mean on every inner cell.
    """
    inner = rhs.shape[rhs.ndim - d:]
    op = DivFormOperator(a, inner, np.eye(d), tau, cfg.dealias)
    return krylov_solve(op, rhs, cfg)


# --------------------------------------------------------------------------
# public field-level interface
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CellProblem:
    """Cell problem on the innermost block of ``A.grid``; outer blocks are parameters."""

    A: TorusField
    F: TorusField | None = None
    G: TorusField | None = None
    tau: float = 0.0

    def __post_init__(self):
        if self.A.rank != 2:
            raise ValidationError("A must be a matrix field")
        g = self.A.grid
        if self.F is not None and (self.F.grid != g or self.F.rank != 1):
            raise ValidationError("F must be a vector field on the grid of A")
        if self.G is not None and (self.G.grid != g or self.G.rank != 0):
            raise ValidationError("G must be a scalar field on the grid of A")
        if self.tau < 0:
            raise ValidationError("tau must be >= 0")

    @property
    def grid(self) -> GridSpec:
        return self.A.grid

    def rhs(self) -> np.ndarray:
        g = self.grid
        out = np.zeros(g.shape)
        if self.F is not None:
            out = out + div_block(self.F.values, g, g.n - 1)
        if self.G is not None:
            out = out + self.G.values
        return out

    def operator(self, cfg: SolverConfig) -> DivFormOperator:
        g = self.grid
        return DivFormOperator(self.A.values, g.block_shape(g.n - 1), np.eye(g.d), self.tau, cfg.dealias)


def solve_inner(p: CellProblem, tol: float | None = None,
                cfg: SolverConfig = SolverConfig()) -> tuple[TorusField, SolveDiagnostics]:
    """Solve the cell problem at every outer node.

    Raises ValidationError when tau = 0 and G has a nonzero mean on some
    inner cell, SolverError when the iteration cap is hit.
    """
    if tol is not None:
        if tol <= 0:
            raise ValidationError("tol must be positive")
        cfg = SolverConfig(tol=tol, maxiter=cfg.maxiter, dealias=cfg.dealias, atol=cfg.atol)
    g = p.grid
    if p.tau == 0 and p.G is not None:
        axes = g.axes(g.n - 1)
        means = np.abs(p.G.values.mean(axis=axes))
        if means.max() > 1e-10 * (1.0 + np.abs(p.G.values).max()):
            worst = np.unravel_index(int(np.argmax(means)), means.shape)
            raise ValidationError(
                f"tau = 0 requires a zero-mean G on every inner cell; node {worst} has mean {means[worst]:.3e}"
            )
    op = p.operator(cfg)
    y, diag = krylov_solve(op, p.rhs(), cfg)
    gy = grad_block(y, g, g.n - 1)
    norm_grad = float(np.sqrt((gy**2).sum(axis=0).mean()))
    norm_y = float(np.sqrt((y**2).mean()))
    diag = SolveDiagnostics(diag.iterations, diag.relative_residual, diag.absolute_residual, diag.method,
                            diag.converged, norm_y, norm_grad, p.tau)
    return TorusField(g, y), diag


def residual_inner(p: CellProblem, Y: TorusField, cfg: SolverConfig = SolverConfig()) -> float:
    """Largest discrete L2 (root-mean-square) residual over outer nodes."""
    op = p.operator(cfg)
    res = op(Y.values) - p.rhs()
    return float(_rms(res, op.axes).max())


# --------------------------------------------------------------------------
# direct lifted solve (reference)
# --------------------------------------------------------------------------


def _lifted_weights(grid: GridSpec, deltas: Sequence[float]) -> np.ndarray:
    w = np.zeros((grid.d, grid.ndim))
    for i in range(grid.n):
        for c in range(grid.d):
            w[c, i * grid.d + c] = 1.0 / deltas[i]
    return w


def lifted_operator(A: TorusField, scales: ScaleVector, tau: float | None = None,
                    dealias: bool = False) -> DivFormOperator:
    tau = scales.tau if tau is None else tau
    g = A.grid
    return DivFormOperator(A.values, g.shape, _lifted_weights(g, scales.deltas), tau, dealias)


def solve_lifted(A: TorusField, scales: ScaleVector, F: np.ndarray | None = None, G: np.ndarray | None = None,
                 tau: float | None = None, cfg: SolverConfig = SolverConfig(tol=1e-11)) -> tuple[np.ndarray, SolveDiagnostics]:
    """Solve -div_hat(A grad_hat X) + tau^2 X = div_hat F + G on the whole lifted torus.

    ``F`` has shape (d, *extra, *grid) and ``G`` (*extra, *grid).  Defaults to
    the corrector right-hand sides F = A e_j, one per direction.  The
    preconditioned iteration count does not depend on tau.
    """
    g = A.grid
    op = lifted_operator(A, scales, tau)
    if F is None and G is None:
        F = A.values  # F[:, j] = A e_j
    rhs = 0
    if F is not None:
        fh = op._fwd(F)
        rhs = op._inv(sum(TWO_PI * 1j * op.kc[c] * fh[c] for c in range(g.d)), op.shape)
    if G is not None:
        rhs = rhs + G
    return krylov_solve(op, np.asarray(rhs, dtype=float), cfg)


def lifted_residual(A: TorusField, scales: ScaleVector, X: np.ndarray, F: np.ndarray | None = None,
                    G: np.ndarray | None = None, tau: float | None = None) -> np.ndarray:
    """-div_hat(A (grad_hat X)) + tau^2 X - div_hat F - G evaluated by collocation."""
    op = lifted_operator(A, scales, tau)
    if F is None and G is None:
        F = A.values
    fl = op.flux(X)
    if F is not None:
        fl = fl + F
    out = op.divergence(fl) + op.tau2 * X
    if G is not None:
        out = out - G
    return out
