"""Dirichlet problems on (0,1) and (0,1)^2: fine solves, effective solves, error metrics.

In 1-D the equation -(a u')' = f is integrated exactly up to quadrature:
with F(x) = int_0^x f,

    a u' = p - F,    u(x) = g0 + int_0^x (p - F)/a,

and p is fixed by u(1) = g1.  Quadrature is composite Gauss-Legendre whose
panels are short enough to give at least 20 nodes per finest period.
In 2-D a second-order finite-difference scheme is solved by sparse LU.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.polynomial import legendre as L

from .errors import ResolutionError, ValidationError
from .torus_field import ScaleVector, TorusField, diagonal_trace, hat_grad

__all__ = [
    "DirichletProblem",
    "FineSolution1D",
    "FineSolution2D",
    "ExpansionError",
    "RateFit",
    "solve_fine_1d",
    "solve_fine_2d",
    "solve_effective",
    "expansion_error",
    "cutoff",
    "rate_fit",
    "write_error_table",
    "ERROR_TABLE_SCHEMA",
]

ORDER = 8
NODES_PER_PERIOD = 20
ERROR_TABLE_SCHEMA = "homoscale-errors/1"

_GL_X, _GL_W = L.leggauss(ORDER)
# values at the Gauss nodes -> Legendre coefficients (exact for degree < ORDER)
_TO_COEF = np.linalg.inv(L.legvander(_GL_X, ORDER - 1))


@dataclass(frozen=True)
class DirichletProblem:
    """-div(A grad u) = f in the unit interval or square, u = g on the boundary."""

    d: int
    coefficient: Callable | np.ndarray | float
    f: Callable | float = 1.0
    g: Callable | float = 0.0

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValidationError("domain dimension must be 1 or 2")


# --------------------------------------------------------------------------
# 1-D
# --------------------------------------------------------------------------


def _as_callable(f):
    if callable(f):
        return f
    c = float(f)
    return lambda x: np.full(np.shape(x), c)


@dataclass(eq=False)
class FineSolution1D:
    """Piecewise-polynomial representation of u on Gauss panels."""

    edges: np.ndarray  # (P+1,)
    nodes: np.ndarray  # (P, ORDER)
    weights: np.ndarray  # (P, ORDER)
    a: np.ndarray  # coefficient at nodes
    du: np.ndarray  # u' at nodes
    u_left: np.ndarray  # u at the left edge of each panel
    flux: float  # p, the value of a u' + F
    F: np.ndarray  # int_0^x f at nodes
    f: Callable = field(repr=False, default=None)
    constant_a: float | None = None
    _cint: np.ndarray = field(default=None, repr=False)
    _cdu: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self._cdu = self.du @ _TO_COEF.T  # (P, ORDER)
        self._cint = L.legint(self._cdu, lbnd=-1, axis=1)  # (P, ORDER+1)

    @property
    def n_panels(self) -> int:
        return self.nodes.shape[0]

    @property
    def u(self) -> np.ndarray:
        """u at the quadrature nodes."""
        return self(self.nodes)

    def _locate(self, x):
        x = np.asarray(x, dtype=float)
        p = np.clip(np.searchsorted(self.edges, x, side="right") - 1, 0, self.n_panels - 1)
        h = self.edges[p + 1] - self.edges[p]
        s = 2.0 * (x - self.edges[p]) / h - 1.0
        return p, h, s

    def __call__(self, x) -> np.ndarray:
        p, h, s = self._locate(x)
        return self.u_left[p] + 0.5 * h * L.legval(s, np.moveaxis(self._cint[p], -1, 0), tensor=False)

    def derivative(self, x) -> np.ndarray:
        p, _, s = self._locate(x)
        return L.legval(s, np.moveaxis(self._cdu[p], -1, 0), tensor=False)

    def second_derivative(self, x) -> np.ndarray:
        """Only for constant coefficients: u'' = -f / a."""
        if self.constant_a is None:
            raise ValidationError("second derivative is available for constant coefficients only")
        return -self.f(np.asarray(x, dtype=float)) / self.constant_a

    def integrate(self, values: np.ndarray) -> float:
        return float((self.weights * values).sum())

    def l2_norm(self, values: np.ndarray | None = None) -> float:
        v = self.u if values is None else values
        return math.sqrt(self.integrate(v * v))

    def l2_distance(self, other: Callable) -> float:
        """||u - other||_{L2(0,1)} with ``other`` evaluated at the nodes."""
        return self.l2_norm(self.u - np.asarray(other(self.nodes)))

    def flux_defect(self) -> float:
        """max |a u' + F - p| at the nodes (the first integral of the equation)."""
        return float(np.abs(self.a * self.du + self.F - self.flux).max())


def _panels(period: float | None, panels: int | None) -> int:
    need = 1 if period is None else int(math.ceil(1.0 / (ORDER * period / NODES_PER_PERIOD)))
    if panels is None:
        return max(need, 4)
    if panels < need:
        raise ResolutionError(
            f"{panels} panels give node spacing {1.0 / (ORDER * panels):.3g} > period/{NODES_PER_PERIOD} = "
            f"{period / NODES_PER_PERIOD:.3g}"
        )
    return int(panels)


def gauss_nodes(n_panels: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    edges = np.linspace(0.0, 1.0, n_panels + 1)
    h = np.diff(edges)[:, None]
    nodes = edges[:-1, None] + 0.5 * h * (_GL_X[None, :] + 1.0)
    weights = 0.5 * h * _GL_W[None, :]
    return edges, nodes, weights


def _cumulative(values: np.ndarray, edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(int_0^x v at nodes, int_0^{left edge} v) for node values of a smooth v."""
    h = np.diff(edges)
    c = values @ _TO_COEF.T
    ci = L.legint(c, lbnd=-1, axis=1)
    local = 0.5 * h[:, None] * L.legval(_GL_X, ci.T, tensor=True)
    totals = 0.5 * h * L.legval(1.0, ci.T)
    left = np.concatenate([[0.0], np.cumsum(totals)[:-1]])
    return left[:, None] + local, left


def solve_fine_1d(a_eps: Callable, f: Callable | float = 1.0, g0: float = 0.0, g1: float = 0.0,
                  finest_period: float | None = None, panels: int | None = None) -> FineSolution1D:
    """Solve -(a u')' = f on (0,1), u(0) = g0, u(1) = g1.

    ``finest_period`` is the shortest period of the coefficient; panels are
    chosen to give at least 20 nodes per period, and an explicit ``panels``
    count that cannot do so raises ResolutionError.
    """
    n = _panels(finest_period, panels)
    edges, nodes, weights = gauss_nodes(n)
    a = np.asarray(a_eps(nodes), dtype=float).reshape(nodes.shape)
    if not np.all(a > 0):
        raise ValidationError(f"coefficient is not positive on the quadrature nodes (min {a.min():.3g})")
    if callable(f):
        F, _ = _cumulative(np.asarray(f(nodes), dtype=float).reshape(nodes.shape), edges)
        fc = f
    else:
        F = float(f) * nodes
        fc = _as_callable(f)
    q = 1.0 / a
    p = (g1 - g0 + (weights * F * q).sum()) / (weights * q).sum()
    du = (p - F) * q
    _, u_left_rel = _cumulative(du, edges)
    const_a = float(a.flat[0]) if np.all(a == a.flat[0]) else None
    sol = FineSolution1D(edges=edges, nodes=nodes, weights=weights, a=a, du=du, u_left=g0 + u_left_rel,
                         flux=float(p), F=F, f=fc, constant_a=const_a)
    return sol


# --------------------------------------------------------------------------
# 2-D finite differences
# --------------------------------------------------------------------------


@dataclass(eq=False)
class FineSolution2D:
    """Nodal values on the uniform (N+1)^2 mesh including the boundary."""

    x: np.ndarray  # (N+1,)
    u: np.ndarray  # (N+1, N+1), indexed [i, j] = u(x_i, y_j)
    residual: float

    @property
    def h(self) -> float:
        return float(self.x[1] - self.x[0])

    def l2_norm(self, values: np.ndarray | None = None) -> float:
        v = self.u if values is None else values
        w = np.full(self.x.shape, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return float(np.sqrt(np.einsum("i,j,ij->", w, w, v * v)))

    def gradient(self, values: np.ndarray | None = None) -> np.ndarray:
        v = self.u if values is None else values
        return np.stack(np.gradient(v, self.h, edge_order=2))

    def energy(self, coefficient: Callable) -> float:
        """Discrete int grad u . A grad u."""
        X, Y = np.meshgrid(self.x, self.x, indexing="ij")
        A = _coef_values(coefficient, X, Y)
        gu = self.gradient()
        dens = np.einsum("i...,ij...,j...->...", gu, A, gu)
        return self.l2_norm(np.sqrt(np.maximum(dens, 0.0))) ** 2


def _coef_values(coefficient, X, Y) -> np.ndarray:
    if callable(coefficient):
        A = np.asarray(coefficient(X, Y), dtype=float)
    else:
        A = np.asarray(coefficient, dtype=float)
    if A.ndim == 0:
        A = A * np.eye(2)
    if A.shape[:2] != (2, 2):
        raise ValidationError(f"2-D coefficient must have leading shape (2, 2); got {A.shape}")
    return np.broadcast_to(A.reshape(A.shape + (1,) * (2 + 2 - A.ndim)), (2, 2) + X.shape)


def _field_values(v, X, Y) -> np.ndarray:
    if callable(v):
        return np.broadcast_to(np.asarray(v(X, Y), dtype=float), X.shape)
    return np.full(X.shape, float(v))


def solve_fine_2d(A_eps, f: Callable | float, g: Callable | float = 0.0, mesh: int = 64,
                  finest_period: float | None = None) -> FineSolution2D:
    """Second-order FD for -div(A grad u) = f on the unit square with u = g on the boundary.

    The diagonal of A is sampled at edge midpoints (five-point stencil), the
    off-diagonal at nodes (corner points of the nine-point stencil).
    """
    N = int(mesh)
    if N < 2:
        raise ValidationError("mesh needs at least two intervals")
    h = 1.0 / N
    if finest_period is not None and h > finest_period / 8:
        raise ResolutionError(f"mesh spacing {h:.3g} exceeds finest period/8 = {finest_period / 8:.3g}")
    x = np.linspace(0.0, 1.0, N + 1)
    X, Y = np.meshgrid(x, x, indexing="ij")
    xm = 0.5 * (x[:-1] + x[1:])
    Ax = _coef_values(A_eps, *np.meshgrid(xm, x, indexing="ij"))  # (2,2,N,N+1) at (i+1/2, j)
    Ay = _coef_values(A_eps, *np.meshgrid(x, xm, indexing="ij"))  # (2,2,N+1,N) at (i, j+1/2)
    An = _coef_values(A_eps, X, Y)
    a11 = Ax[0, 0]
    a22 = Ay[1, 1]
    a12 = An[0, 1]
    a21 = An[1, 0]
    if np.any(a11 <= 0) or np.any(a22 <= 0):
        raise ValidationError("coefficient diagonal is not positive on the mesh")

    idx = np.arange((N + 1) ** 2).reshape(N + 1, N + 1)
    I, J = np.meshgrid(np.arange(1, N), np.arange(1, N), indexing="ij")
    I, J = I.ravel(), J.ravel()
    rows, cols, vals = [], [], []

    def add(di, dj, v):
        rows.append(idx[I, J])
        cols.append(idx[I + di, J + dj])
        vals.append(v / h**2)

    e_p, e_m = a11[I, J], a11[I - 1, J]
    n_p, n_m = a22[I, J], a22[I, J - 1]
    add(0, 0, e_p + e_m + n_p + n_m)
    add(1, 0, -e_p)
    add(-1, 0, -e_m)
    add(0, 1, -n_p)
    add(0, -1, -n_m)
    # -d_x(a12 d_y u) - d_y(a21 d_x u), central differences
    b_p, b_m = a12[I + 1, J], a12[I - 1, J]
    c_p, c_m = a21[I, J + 1], a21[I, J - 1]
    add(1, 1, -0.25 * (b_p + c_p))
    add(1, -1, 0.25 * (b_p + c_m))
    add(-1, 1, 0.25 * (b_m + c_p))
    add(-1, -1, -0.25 * (b_m + c_m))
    K = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=((N + 1) ** 2, (N + 1) ** 2))
    interior = idx[1:-1, 1:-1].ravel()
    bmask = np.ones((N + 1) ** 2, dtype=bool)
    bmask[interior] = False
    gfull = np.zeros((N + 1) ** 2)
    gfull[bmask] = _field_values(g, X, Y).ravel()[bmask]
    rhs = _field_values(f, X, Y).ravel()[interior] - (K @ gfull)[interior]
    Kii = K[interior][:, interior].tocsc()
    ui = spla.spsolve(Kii, rhs)
    res = float(np.abs(Kii @ ui - rhs).max() / max(1.0, np.abs(rhs).max()))
    u = gfull.copy()
    u[interior] = ui
    return FineSolution2D(x=x, u=u.reshape(N + 1, N + 1), residual=res)


# --------------------------------------------------------------------------
# effective problems
# --------------------------------------------------------------------------


def solve_effective(Abar, f: Callable | float = 1.0, g: Callable | float | tuple = 0.0, domain: int = 1,
                    mesh: int = 64):
    """Constant-coefficient Dirichlet problem.

    ``domain`` is the dimension.  In 1-D ``g`` may be a pair (g0, g1) and
    the solve is the exact quadrature formula; in 2-D the FD scheme is used.
    """
    M = np.atleast_2d(np.asarray(Abar, dtype=float))
    if domain == 1:
        a = float(M.reshape(-1)[0])
        if a <= 0:
            raise ValidationError("effective coefficient must be positive")
        g0, g1 = (g, g) if np.isscalar(g) else g
        return solve_fine_1d(lambda x: np.full(np.shape(x), a), f, float(g0), float(g1), panels=4)
    if domain == 2:
        if M.shape != (2, 2):
            raise ValidationError("2-D effective matrix must be 2 x 2")
        if np.linalg.eigvalsh(0.5 * (M + M.T)).min() <= 0:
            raise ValidationError("effective matrix is not elliptic")
        return solve_fine_2d(M, f, g, mesh)
    raise ValidationError("domain must be 1 or 2")


# --------------------------------------------------------------------------
# first-order expansion
# --------------------------------------------------------------------------


def cutoff(dist: np.ndarray, eps1: float) -> tuple[np.ndarray, np.ndarray]:
    """C^2 smoothstep of the boundary distance: 0 for dist <= 3 eps1, 1 for dist >= 4 eps1.

    Returns (eta, d eta / d dist); the derivative is bounded by 15/(8 eps1).
    """
    s = np.clip((np.asarray(dist, dtype=float) - 3.0 * eps1) / eps1, 0.0, 1.0)
    eta = s**3 * (10.0 - 15.0 * s + 6.0 * s * s)
    deta = 30.0 * s * s * (1.0 - s) ** 2 / eps1
    return eta, deta


@dataclass(frozen=True)
class ExpansionError:
    l2_error: float  # ||u_eps - u0||_L2
    w_eps_h1: float  # ||w_eps||_H1
    w_eps_l2: float
    cutoff_width: float  # width of the transition band of eta

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _corrector_values(X) -> tuple:
    if isinstance(X, TorusField):
        return X.grid, X.values
    return X.grid, X.X.values


def expansion_error(u_eps, u0, X, scales: ScaleVector, domain: int | None = None) -> ExpansionError:
    """Norms of w = u_eps - u0 - eps_1 eta X(x/eps) . grad u0.

    ``X`` is a corrector field with a leading direction axis (a CorrectorSet
    also works) or None for the plain difference.  Derivatives of the
    corrector along the diagonal are grad_hat X / eps_1.
    """
    eps1 = scales.epsilons[0]
    if isinstance(u_eps, FineSolution1D):
        if domain not in (None, 1):
            raise ValidationError("a 1-D solution needs domain 1")
        x = u_eps.nodes.ravel()
        ue = u_eps.u.ravel()
        due = u_eps.du.ravel()
        u0v, du0, d2u0 = u0(x), u0.derivative(x), u0.second_derivative(x)
        diff = ue - u0v
        w, dw = diff.copy(), due - du0
        dist = np.minimum(x, 1.0 - x)
        eta, deta = cutoff(dist, eps1)
        deta = deta * np.where(x < 0.5, 1.0, -1.0)
        if X is not None:
            grid, vals = _corrector_values(X)
            Xf = TorusField(grid, vals[0] if vals.ndim == grid.ndim + 1 else vals)
            if grid.n != scales.n:
                raise ValidationError("corrector grid does not match the scale vector")
            xt = diagonal_trace(Xf, scales, x)
            gx = diagonal_trace(TorusField(Xf.grid, hat_grad(Xf.values, Xf.grid, scales.deltas)[0]), scales, x)
            w = w - eps1 * eta * xt * du0
            dw = dw - (eps1 * deta * xt * du0 + eta * gx * du0 + eps1 * eta * xt * d2u0)
        wts = u_eps.weights.ravel()
        l2 = math.sqrt(float((wts * diff**2).sum()))
        wl2 = math.sqrt(float((wts * w**2).sum()))
        h1 = math.sqrt(wl2**2 + float((wts * dw**2).sum()))
        return ExpansionError(l2, h1, wl2, eps1)
    if isinstance(u_eps, FineSolution2D):
        if not isinstance(u0, FineSolution2D) or u0.u.shape != u_eps.u.shape:
            raise ValidationError("mesh mismatch between fine and effective solutions")
        h = u_eps.h
        if X is not None and h > scales.epsilons[-1] / 8:
            raise ResolutionError("mesh does not resolve the finest scale")
        diff = u_eps.u - u0.u
        w = diff.copy()
        if X is not None:
            Xg, Yg = np.meshgrid(u_eps.x, u_eps.x, indexing="ij")
            pts = np.stack([Xg.ravel(), Yg.ravel()], axis=1)
            dist = np.minimum.reduce([Xg, 1 - Xg, Yg, 1 - Yg])
            eta, _ = cutoff(dist, eps1)
            gu0 = u0.gradient()
            grid, vals = _corrector_values(X)
            for j in range(2):
                xt = diagonal_trace(TorusField(grid, vals[j]), scales, pts).reshape(Xg.shape)
                w = w - eps1 * eta * xt * gu0[j]
        l2 = u_eps.l2_norm(diff)
        wl2 = u_eps.l2_norm(w)
        gw = u_eps.gradient(w)
        h1 = math.sqrt(wl2**2 + u_eps.l2_norm(gw[0]) ** 2 + u_eps.l2_norm(gw[1]) ** 2)
        return ExpansionError(l2, h1, wl2, eps1)
    raise ValidationError("unsupported solution type")


# --------------------------------------------------------------------------
# rates and tables
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RateFit:
    regime: str  # "power" or "exponential"
    slope: float  # d log(error) / d log(eps_1), or d log(error) / d ratio
    prefactor: float
    r2: float
    residual: float  # rms of the log-residuals
    decay: float  # -slope in the exponential regime, nan otherwise

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def rate_fit(points: Sequence[tuple], regime: str = "power", gap: int = -1) -> RateFit:
    """Least-squares fit of log(error) against log(eps_1) or a scale ratio.

    ``points`` holds (eps, error) where eps is a number or a scale vector.
    The exponential regime regresses on eps_i/eps_{i+1} for ``gap`` i (the
    last gap by default) or on eps itself when eps is a number.
    """
    if len(points) < 3:
        raise ValidationError("rate_fit needs at least three points")
    xs, ys = [], []
    for eps, err in points:
        e = np.atleast_1d(np.asarray(eps, dtype=float))
        if err <= 0 or not np.isfinite(err):
            raise ValidationError(f"errors must be positive and finite; got {err}")
        if regime == "power":
            xs.append(math.log(e[0]))
        elif regime == "exponential":
            xs.append(float(e[0]) if e.size == 1 else float(e[gap - 1 if gap < 0 else gap] / e[gap if gap < 0 else gap + 1]))
        else:
            raise ValidationError(f"unknown regime {regime!r}")
        ys.append(math.log(err))
    x = np.asarray(xs)
    y = np.asarray(ys)
    if np.ptp(x) <= 1e-12 * max(1.0, np.abs(x).max()):
        raise ValidationError("degenerate design: all abscissae coincide")
    M = np.stack([x, np.ones_like(x)], axis=1)
    (slope, icpt), *_ = np.linalg.lstsq(M, y, rcond=None)
    res = y - M @ np.array([slope, icpt])
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((res**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(regime, float(slope), float(math.exp(icpt)), r2, float(np.sqrt((res**2).mean())),
                   float(-slope) if regime == "exponential" else float("nan"))


def write_error_table(path: str | os.PathLike, rows: Sequence[dict]) -> Path:
    """CSV with columns eps_1..eps_n, l2_error, h1_w, tau, k_1..k_{n-1}.

    Each row is a dict with keys "eps" (sequence), "l2_error", "h1_w",
    "tau" and "ks" (sequence); missing values are written empty.
    """
    rows = list(rows)
    n = max(len(r["eps"]) for r in rows) if rows else 1
    header = [f"eps_{i + 1}" for i in range(n)] + ["l2_error", "h1_w", "tau"] + [f"k_{i + 1}" for i in range(n - 1)]
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        fh.write(f"# schema: {ERROR_TABLE_SCHEMA}\n")
        wr = csv.writer(fh)
        wr.writerow(header)
        for r in rows:
            eps = list(r["eps"]) + [""] * (n - len(r["eps"]))
            ks = list(r.get("ks", ())) + [""] * (n - 1 - len(r.get("ks", ())))
            vals = [r.get("l2_error", ""), r.get("h1_w", ""), r.get("tau", "")]
            wr.writerow([_fmt(v) for v in eps + vals + ks])
    return out


def _fmt(v) -> str:
    if v == "" or v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))
