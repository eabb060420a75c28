"""Periodic fields on the lifted torus T^{d x n} and their spectral calculus.

A point of the lifted torus is (y_1, ..., y_n) with every block y_i in T^d.
Samples live on a tensor grid whose trailing axes are ordered block-major:
axis ``i*d + c`` carries component ``c`` of block ``i``.  Any leading axes of
a sample array are tensor components (scalar fields have none).

Blocks are numbered from 0.  Block ``n-1`` is the finest scale.

Array-level helpers (``diff_axis``, ``grad_block``, ``hat_grad`` ...) accept
arrays with arbitrary leading axes as long as the trailing axes match the
grid.  They are shared by the solver modules, which work on raw arrays for
speed.  The ``TorusField`` wrapper is the public, immutable value type.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import scipy.fft as sfft

from .config import thread_count
from .errors import ResolutionError, ValidationError

__all__ = [
    "GridSpec",
    "ScaleVector",
    "AnalyticCoefficient",
    "TorusField",
    "AnalyticityReport",
    "build_field",
    "scale_partial",
    "directional_gradient",
    "partial_average",
    "full_average",
    "diagonal_trace",
    "verify_analyticity",
    "write_tnsr",
    "read_tnsr",
    "load_coefficient",
    "save_coefficient",
]

TWO_PI = 2.0 * np.pi


# --------------------------------------------------------------------------
# grids and scales
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Tensor grid on T^{d x n}; ``resolution[i]`` points per period in block i."""

    d: int
    n: int
    resolution: tuple[int, ...]
    memory_budget_bytes: int = 2**31

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValidationError(f"d must be 1 or 2, got {self.d}")
        if self.n < 1:
            raise ValidationError("a grid needs at least one block")
        res = tuple(int(r) for r in self.resolution)
        object.__setattr__(self, "resolution", res)
        if len(res) != self.n:
            raise ValidationError(f"expected {self.n} resolutions, got {len(res)}")
        for r in res:
            if r < 4 or r % 2:
                raise ValidationError(f"resolution must be even and >= 4, got {r}")
        # one real matrix-valued field must fit the budget
        if 8 * self.d * self.d * self.size > self.memory_budget_bytes:
            raise ResolutionError(
                f"grid {res} (d={self.d}) exceeds the memory budget of "
                f"{self.memory_budget_bytes} bytes"
            )

    @classmethod
    def uniform(cls, d: int, n: int, r: int | None = None, **kw) -> "GridSpec":
        if r is None:
            r = 64 if d == 1 else 32
        return cls(d, n, (r,) * n, **kw)

    @property
    def ndim(self) -> int:
        return self.d * self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(r for r in self.resolution for _ in range(self.d))

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def block_shape(self, block: int) -> tuple[int, ...]:
        return (self.resolution[block],) * self.d

    def axes(self, block: int, ndim: int | None = None) -> tuple[int, ...]:
        """Absolute axes of ``block`` inside an array with ``ndim`` dimensions."""
        self._check_block(block)
        base = (ndim if ndim is not None else self.ndim) - self.ndim
        return tuple(base + block * self.d + c for c in range(self.d))

    def leading(self, blocks: int) -> "GridSpec":
        """Grid made of the first ``blocks`` blocks."""
        return GridSpec(self.d, blocks, self.resolution[:blocks], self.memory_budget_bytes)

    def without(self, block: int) -> "GridSpec":
        self._check_block(block)
        if self.n == 1:
            raise ValidationError("cannot remove the only block")
        res = self.resolution[:block] + self.resolution[block + 1:]
        return GridSpec(self.d, self.n - 1, res, self.memory_budget_bytes)

    def with_resolution(self, block: int, r: int) -> "GridSpec":
        res = list(self.resolution)
        res[block] = r
        return GridSpec(self.d, self.n, tuple(res), self.memory_budget_bytes)

    def coords(self) -> list[list[np.ndarray]]:
        """Broadcastable node coordinates: ``coords()[i][c]`` is y_i^c."""
        out = []
        for i, r in enumerate(self.resolution):
            nodes = np.arange(r) / r
            row = []
            for c in range(self.d):
                shape = [1] * self.ndim
                shape[i * self.d + c] = r
                row.append(nodes.reshape(shape))
            out.append(row)
        return out

    def _check_block(self, block: int):
        if not 0 <= block < self.n:
            raise ValidationError(f"block {block} out of range for n={self.n}")

    def to_dict(self) -> dict:
        return {"d": self.d, "n": self.n, "resolution": list(self.resolution)}


@dataclass(frozen=True)
class ScaleVector:
    """Scales 1 >= eps_1 > ... > eps_n > 0 with regularization tau."""

    epsilons: tuple[float, ...]
    tau: float = 0.0

    def __post_init__(self):
        eps = tuple(float(e) for e in self.epsilons)
        object.__setattr__(self, "epsilons", eps)
        if not eps:
            raise ValidationError("at least one scale is required")
        if not (0 < eps[0] <= 1):
            raise ValidationError(f"eps_1 must lie in (0, 1], got {eps[0]}")
        for i in range(1, len(eps)):
            if eps[i] == eps[i - 1]:
                raise ValidationError(
                    f"scales {i} and {i + 1} are equal ({eps[i]}); merge them into one scale"
                )
            if not (0 < eps[i] < eps[i - 1]):
                raise ValidationError(f"scales must be strictly decreasing, got {eps}")
        if not (self.tau >= 0 and math.isfinite(self.tau)):
            raise ValidationError(f"tau must be finite and >= 0, got {self.tau}")

    @classmethod
    def from_deltas(cls, deltas: Sequence[float], eps1: float = 1.0, tau: float = 0.0):
        return cls(tuple(eps1 * dl for dl in deltas), tau)

    @property
    def n(self) -> int:
        return len(self.epsilons)

    @property
    def deltas(self) -> tuple[float, ...]:
        e1 = self.epsilons[0]
        return (1.0,) + tuple(e / e1 for e in self.epsilons[1:])

    @property
    def ratios(self) -> tuple[float, ...]:
        """eps_{j-1}/eps_j for j = 2..n."""
        e = self.epsilons
        return tuple(e[j - 1] / e[j] for j in range(1, len(e)))

    def with_tau(self, tau: float) -> "ScaleVector":
        return ScaleVector(self.epsilons, tau)

    def to_dict(self) -> dict:
        return {"epsilons": list(self.epsilons), "tau": self.tau}


# --------------------------------------------------------------------------
# array-level spectral primitives
# --------------------------------------------------------------------------


def _workers() -> int:
    return thread_count()


def _wavenumbers(r: int) -> np.ndarray:
    """Integer frequencies of an r-point rfft with the Nyquist entry zeroed.

    Zeroing the Nyquist frequency keeps first derivatives real and
    skew-adjoint, so every composite operator stays symmetric.
    """
    k = np.arange(r // 2 + 1, dtype=float)
    if r % 2 == 0:
        k[-1] = 0.0
    return k


def full_wavenumbers(r: int) -> np.ndarray:
    """Integer frequencies of an r-point complex fft, Nyquist zeroed."""
    k = np.fft.fftfreq(r, 1.0 / r)
    if r % 2 == 0:
        k[r // 2] = 0.0
    return k


def diff_axis(u: np.ndarray, axis: int, order: int = 1) -> np.ndarray:
    """Spectral derivative of ``order`` along one periodic axis of unit length."""
    r = u.shape[axis]
    uh = sfft.rfft(u, axis=axis, workers=_workers())
    mult = (2j * np.pi * _wavenumbers(r)) ** order
    shape = [1] * u.ndim
    shape[axis] = -1
    return sfft.irfft(uh * mult.reshape(shape), n=r, axis=axis, workers=_workers())


def grad_block(u: np.ndarray, grid: GridSpec, block: int) -> np.ndarray:
    """Gradient in block ``block``; a new leading axis of size d is prepended."""
    axes = grid.axes(block, u.ndim)
    return np.stack([diff_axis(u, ax) for ax in axes])


def div_block(v: np.ndarray, grid: GridSpec, block: int) -> np.ndarray:
    """Divergence in block ``block``, contracting the leading axis of ``v``."""
    axes = grid.axes(block, v.ndim - 1)
    out = diff_axis(v[0], axes[0])
    for c in range(1, grid.d):
        out = out + diff_axis(v[c], axes[c])
    return out


def hat_grad(u, grid: GridSpec, deltas: Sequence[float], blocks: Iterable[int] | None = None):
    """Directional gradient sum_i delta_i^{-1} grad_i over ``blocks`` (default all)."""
    blocks = range(grid.n) if blocks is None else blocks
    out = None
    for i in blocks:
        g = grad_block(u, grid, i) / deltas[i]
        out = g if out is None else out + g
    if out is None:
        return np.zeros((grid.d,) + np.shape(u))
    return out


def hat_div(v, grid: GridSpec, deltas: Sequence[float], blocks: Iterable[int] | None = None):
    blocks = range(grid.n) if blocks is None else blocks
    out = None
    for i in blocks:
        g = div_block(v, grid, i) / deltas[i]
        out = g if out is None else out + g
    if out is None:
        return np.zeros(np.shape(v)[1:])
    return out


def block_mean(u: np.ndarray, grid: GridSpec, block: int) -> np.ndarray:
    """Average over one block; the block axes are removed."""
    return u.mean(axis=grid.axes(block, u.ndim))


def expand_last(u: np.ndarray, d: int) -> np.ndarray:
    """View an array over the leading blocks as constant in one more block."""
    return u.reshape(u.shape + (1,) * d)


def apply_matrix(a: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Pointwise (A v)_i = A_ij v_j; trailing axes broadcast."""
    return np.einsum("ij...,j...->i...", a, v)


def block_symbol(grid: GridSpec, block: int, ndim: int) -> list[np.ndarray]:
    """Broadcastable integer frequencies (Nyquist zeroed) for a full fft of a block."""
    out = []
    for ax in grid.axes(block, ndim):
        shape = [1] * ndim
        shape[ax] = -1
        out.append(full_wavenumbers(grid.resolution[block]).reshape(shape))
    return out


def solve_block_laplacian(g: np.ndarray, grid: GridSpec, block: int, tau2: float = 0.0,
                          scale: float = 1.0) -> np.ndarray:
    """Solve -scale^2 Delta_block u + tau2 u = g in Fourier space.

    With ``tau2 = 0`` the block mean of ``g`` is discarded and ``u`` has zero
    block mean.
    """
    axes = grid.axes(block, g.ndim)
    gh = sfft.fftn(g, axes=axes, workers=_workers())
    ks = block_symbol(grid, block, g.ndim)
    sym = sum((TWO_PI * k / scale) ** 2 for k in ks) + tau2
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(sym > 0, 1.0 / np.where(sym > 0, sym, 1.0), 0.0)
    return sfft.ifftn(gh * inv, axes=axes, workers=_workers()).real


# --------------------------------------------------------------------------
# analytic coefficients
# --------------------------------------------------------------------------

Freq = tuple[tuple[int, ...], ...]


def _neg(k: Freq) -> Freq:
    return tuple(tuple(-x for x in blk) for blk in k)


@dataclass(frozen=True, eq=False)
class AnalyticCoefficient:
    """Matrix coefficient A(y_1..y_n) given as a finite Fourier sum.

    ``modes`` maps a frequency (one integer d-vector per block) to a complex
    d x d amplitude c_k, so that A(y) = sum_k c_k exp(2 pi i k . y).  The mode
    set must be conjugate symmetric so that A is real.
    """

    d: int
    n: int
    modes: Mapping[Freq, np.ndarray]
    lam: float
    C0: float | None = None
    Lambda0: float | None = None

    def __post_init__(self):
        clean = {}
        for k, amp in self.modes.items():
            key = tuple(tuple(int(x) for x in blk) for blk in k)
            if len(key) != self.n or any(len(b) != self.d for b in key):
                raise ValidationError(f"frequency {k} does not match d={self.d}, n={self.n}")
            a = np.asarray(amp, dtype=complex)
            if a.shape == ():
                a = a * np.eye(self.d)
            if a.shape != (self.d, self.d):
                raise ValidationError(f"amplitude for {k} must be {self.d}x{self.d}")
            clean[key] = clean.get(key, 0) + a
        for k, a in clean.items():
            partner = clean.get(_neg(k))
            if partner is None or not np.allclose(partner, np.conj(a), atol=1e-14, rtol=1e-12):
                raise ValidationError(f"mode set is not conjugate symmetric at {k}; samples would be complex")
        object.__setattr__(self, "modes", clean)
        if not (0 < self.lam <= 1):
            raise ValidationError(f"ellipticity constant must lie in (0, 1], got {self.lam}")

    @classmethod
    def isotropic(cls, d: int, n: int, const: float, terms: Sequence[tuple] = (), lam: float | None = None,
                  **kw) -> "AnalyticCoefficient":
        """Scalar coefficient times the identity.

        ``terms`` holds ``(freq, amplitude, "cos" | "sin")`` with ``freq`` one
        d-tuple per block, e.g. ``(((1,), (0,)), 1.0, "sin")`` for sin(2 pi y_1).
        """
        zero = tuple((0,) * d for _ in range(n))
        modes: dict = {zero: complex(const)}
        for freq, amp, kind in terms:
            k = tuple(tuple(int(x) for x in blk) for blk in freq)
            if kind == "cos":
                c = amp / 2.0
                pair = (c, c)
            elif kind == "sin":
                pair = (amp / 2j, -amp / 2j)
            else:
                raise ValidationError(f"unknown term kind {kind!r}")
            modes[k] = modes.get(k, 0) + pair[0]
            modes[_neg(k)] = modes.get(_neg(k), 0) + pair[1]
        modes = {k: v * np.eye(d) for k, v in modes.items()}
        if lam is None:
            lo, hi = const - sum(abs(t[1]) for t in terms), const + sum(abs(t[1]) for t in terms)
            if lo <= 0:
                raise ValidationError("isotropic coefficient is not uniformly positive")
            lam = min(lo, 1.0 / hi, 1.0)
        return cls(d, n, modes, lam, **kw)

    def max_frequency(self) -> tuple[int, ...]:
        """Largest |k| component per block."""
        out = [0] * self.n
        for k in self.modes:
            for i, blk in enumerate(k):
                out[i] = max(out[i], max(abs(x) for x in blk))
        return tuple(out)

    def sample(self, grid: GridSpec) -> np.ndarray:
        if grid.d != self.d or grid.n != self.n:
            raise ValidationError("grid does not match coefficient dimensions")
        for i, (kmax, r) in enumerate(zip(self.max_frequency(), grid.resolution)):
            if kmax >= r // 2:
                raise ResolutionError(
                    f"block {i}: frequency {kmax} needs more than {r} points (Nyquist {r // 2})"
                )
        spec = np.zeros((self.d, self.d) + grid.shape, dtype=complex)
        for k, a in self.modes.items():
            idx = tuple(x % r for blk, r in zip(k, grid.resolution) for x in blk)
            spec[(slice(None), slice(None)) + idx] += a
        axes = tuple(range(2, 2 + grid.ndim))
        vals = sfft.ifftn(spec, axes=axes, norm="forward", workers=_workers())
        return np.ascontiguousarray(vals.real)

    def evaluate(self, y: Sequence[np.ndarray]) -> np.ndarray:
        """Direct Fourier sum at points; ``y[i]`` has shape (P, d) or (P,) for d = 1."""
        ys = [np.asarray(v, dtype=float).reshape(len(v), -1) for v in y]
        out = np.zeros((self.d, self.d, ys[0].shape[0]), dtype=complex)
        for k, a in self.modes.items():
            phase = sum(yi @ np.asarray(blk, float) for yi, blk in zip(ys, k))
            out += a[:, :, None] * np.exp(TWO_PI * 1j * phase)[None, None, :]
        return out.real

    def to_json(self) -> dict:
        modes = []
        for k in sorted(self.modes):
            a = self.modes[k]
            entry = {"freq": [list(b) for b in k], "matrix": a.real.tolist()}
            if np.any(a.imag):
                entry["imag"] = a.imag.tolist()
            modes.append(entry)
        return {"d": self.d, "n": self.n, "modes": modes, "lambda": self.lam,
                "C0": self.C0, "Lambda0": self.Lambda0}

    @classmethod
    def from_json(cls, doc: Mapping) -> "AnalyticCoefficient":
        try:
            modes_doc = doc["modes"]
            first = modes_doc[0]["freq"]
            n = int(doc.get("n", len(first)))
            d = int(doc.get("d", len(first[0])))
            modes = {}
            for m in modes_doc:
                k = tuple(tuple(int(x) for x in blk) for blk in m["freq"])
                amp = _json_matrix(m["matrix"])
                if "imag" in m:
                    amp = amp + 1j * np.asarray(m["imag"], dtype=float)
                modes[k] = modes.get(k, 0) + amp
            return cls(d, n, modes, float(doc["lambda"]), doc.get("C0"), doc.get("Lambda0"))
        except (KeyError, IndexError, TypeError) as exc:
            raise ValidationError(f"malformed coefficient document: {exc}") from exc


def _json_matrix(rows) -> np.ndarray:
    """Matrix entries may be numbers or [re, im] pairs."""
    out = []
    for row in rows:
        out.append([complex(v[0], v[1]) if isinstance(v, (list, tuple)) else complex(v) for v in row])
    return np.asarray(out, dtype=complex)


def load_coefficient(path: str | os.PathLike) -> AnalyticCoefficient:
    return AnalyticCoefficient.from_json(json.loads(Path(path).read_text()))


def save_coefficient(coef: AnalyticCoefficient, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(coef.to_json(), indent=2))


# --------------------------------------------------------------------------
# fields
# --------------------------------------------------------------------------

_SHAPE_NAMES = {0: "scalar", 1: "vector", 2: "matrix"}


@dataclass(frozen=True, eq=False)
class TorusField:
    """Immutable real samples of a tensor field on a lifted-torus grid."""

    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True)
        if v.ndim < self.grid.ndim or v.shape[v.ndim - self.grid.ndim:] != self.grid.shape:
            raise ValidationError(
                f"sample shape {v.shape} does not end with grid shape {self.grid.shape}"
            )
        if not np.all(np.isfinite(v)):
            raise ValidationError("field samples must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    # constructors
    @classmethod
    def from_function(cls, grid: GridSpec, func: Callable) -> "TorusField":
        """Sample ``func(y)`` where ``y[i][c]`` is a broadcastable coordinate array."""
        vals = np.asarray(func(grid.coords()), dtype=float)
        target_tail = grid.shape
        vals = np.broadcast_to(vals, vals.shape[: max(vals.ndim - grid.ndim, 0)] + target_tail)
        return cls(grid, vals)

    @classmethod
    def constant(cls, grid: GridSpec, value) -> "TorusField":
        value = np.asarray(value, dtype=float)
        return cls(grid, np.broadcast_to(value.reshape(value.shape + (1,) * grid.ndim),
                                         value.shape + grid.shape))

    # structure
    @property
    def rank(self) -> int:
        return self.values.ndim - self.grid.ndim

    @property
    def component_shape(self) -> tuple[int, ...]:
        return self.values.shape[: self.rank]

    @property
    def shape_name(self) -> str:
        return _SHAPE_NAMES.get(self.rank, f"tensor{self.rank}")

    @cached_property
    def spectrum(self) -> np.ndarray:
        """Normalized Fourier coefficients (so that samples = sum c_k e^{2 pi i k.y})."""
        axes = tuple(range(self.rank, self.values.ndim))
        return sfft.fftn(self.values, axes=axes, norm="forward", workers=_workers())

    # norms
    def pointwise_norm(self) -> np.ndarray:
        """Component-sum tensor norm |T| = sum of absolute component values."""
        if self.rank == 0:
            return np.abs(self.values)
        return np.abs(self.values).reshape((-1,) + self.grid.shape).sum(axis=0)

    def sup_norm(self) -> float:
        return float(self.pointwise_norm().max())

    def l2_norm(self) -> float:
        """sqrt of the torus average of the squared Euclidean component norm."""
        sq = self.values**2
        if self.rank:
            sq = sq.reshape((-1,) + self.grid.shape).sum(axis=0)
        return float(np.sqrt(sq.mean()))

    # arithmetic
    def _coerce(self, other):
        if isinstance(other, TorusField):
            if other.grid != self.grid:
                raise ValidationError("fields live on different grids")
            return other.values
        return other

    def __add__(self, other):
        return TorusField(self.grid, self.values + self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return TorusField(self.grid, self.values - self._coerce(other))

    def __neg__(self):
        return TorusField(self.grid, -self.values)

    def __mul__(self, other):
        return TorusField(self.grid, self.values * self._coerce(other))

    __rmul__ = __mul__

    def component(self, *index) -> "TorusField":
        return TorusField(self.grid, self.values[index])


# --------------------------------------------------------------------------
# public operations
# --------------------------------------------------------------------------


def build_field(spec: AnalyticCoefficient, grid: GridSpec) -> TorusField:
    """Sample an analytic coefficient on a grid (exact for resolved modes)."""
    return TorusField(grid, spec.sample(grid))


def scale_partial(f: TorusField, block: int, order: int = 1) -> TorusField:
    """Order-``order`` derivative tensor with respect to one block.

    Each differentiation prepends one axis of size d.
    """
    if order < 1:
        raise ValidationError("derivative order must be >= 1")
    f.grid._check_block(block)
    vals = f.values
    for _ in range(order):
        vals = grad_block(vals, f.grid, block)
    return TorusField(f.grid, vals)


def directional_gradient(f: TorusField, scales: ScaleVector) -> TorusField:
    """sum_i delta_i^{-1} grad_{y_i} f, a d-vector over physical directions."""
    if scales.n != f.grid.n:
        raise ValidationError(f"scale vector has n={scales.n}, grid has n={f.grid.n}")
    return TorusField(f.grid, hat_grad(f.values, f.grid, scales.deltas))


def partial_average(f: TorusField, block: int) -> TorusField:
    """Average over one block; the result lives on the grid without that block."""
    return TorusField(f.grid.without(block), block_mean(f.values, f.grid, block))


def full_average(f: TorusField):
    vals = f.values.mean(axis=tuple(range(f.rank, f.values.ndim)))
    return float(vals) if f.rank == 0 else vals


def _trace_factors(y: np.ndarray, r: int) -> np.ndarray:
    """Interpolation weights e^{2 pi i k y} for the r-point spectrum, Nyquist split."""
    k = np.fft.fftfreq(r, 1.0 / r)
    e = np.exp(TWO_PI * 1j * np.outer(y, k))
    if r % 2 == 0:
        e[:, r // 2] = np.cos(np.pi * r * y)
    return e


def diagonal_trace(f: TorusField, scales: ScaleVector, points) -> np.ndarray:
    """Evaluate f(x/eps_1, ..., x/eps_n) by trigonometric interpolation.

    ``points`` has shape (P,) for d = 1 or (P, d).  Returns an array of shape
    (P,) + component shape.
    """
    grid = f.grid
    if scales.n != grid.n:
        raise ValidationError(f"scale vector has n={scales.n}, grid has n={grid.n}")
    x = np.asarray(points, dtype=float)
    x = x.reshape(-1, grid.d) if grid.d > 1 or x.ndim > 1 else x.reshape(-1, 1)
    comp = f.component_shape
    spec = f.spectrum.reshape((-1,) + grid.shape)
    ncomp = spec.shape[0]
    out = np.empty((x.shape[0], ncomp))
    rest = grid.size // grid.shape[0]
    chunk = max(1, int(4e6 // max(rest * ncomp, 1)))
    for start in range(0, x.shape[0], chunk):
        xs = x[start:start + chunk]
        t = None
        for i in range(grid.n):
            for c in range(grid.d):
                y = np.mod(xs[:, c] / scales.epsilons[i], 1.0)
                e = _trace_factors(y, grid.resolution[i])
                if t is None:
                    t = np.tensordot(e, spec, axes=([1], [1]))  # (p, comp, rest...)
                else:
                    t = np.einsum("pck...,pk->pc...", t, e)
        out[start:start + chunk] = t.real
    return out.reshape((x.shape[0],) + comp)


# --------------------------------------------------------------------------
# analyticity certificate
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AnalyticityReport:
    C0: float
    Lambda0: float
    derivative_norms: tuple[float, ...]
    declared_ok: bool | None

    def to_dict(self) -> dict:
        return {"C0": self.C0, "Lambda0": self.Lambda0,
                "derivative_norms": list(self.derivative_norms), "declared_ok": self.declared_ok}


def verify_analyticity(spec: AnalyticCoefficient, ell_check: int = 4,
                       grid: GridSpec | None = None) -> AnalyticityReport:
    """Fit |D^l A| <= C0 Lambda0^l l! for 0 <= l <= ell_check.

    |D^l A| is the sup over a grid of the component-sum norm of the full
    derivative tensor in all d*n lifted variables.  C0 is the l = 0 value and
    Lambda0 the largest implied ratio over l >= 1.
    """
    if ell_check < 0:
        raise ValidationError("ell_check must be >= 0")
    if grid is None:
        res = tuple(max(8, 2 * (4 * (k + 1) // 2)) for k in spec.max_frequency())
        grid = GridSpec(spec.d, spec.n, res)
    vals = spec.sample(grid)
    norms = []
    current = vals
    for ell in range(ell_check + 1):
        if ell > 0:
            current = np.concatenate([grad_block(current, grid, i) for i in range(grid.n)], axis=0)
        flat = np.abs(current).reshape((-1,) + grid.shape).sum(axis=0)
        norms.append(float(flat.max()))
    C0 = norms[0]
    Lambda0 = 0.0
    for ell in range(1, ell_check + 1):
        if norms[ell] > 0 and C0 > 0:
            Lambda0 = max(Lambda0, (norms[ell] / (C0 * math.factorial(ell))) ** (1.0 / ell))
    declared = None
    if spec.C0 is not None and spec.Lambda0 is not None:
        declared = all(
            norms[ell] <= spec.C0 * spec.Lambda0**ell * math.factorial(ell) * (1 + 1e-12)
            for ell in range(ell_check + 1)
        )
    return AnalyticityReport(C0, Lambda0, tuple(norms), declared)


def ellipticity_margins(a: np.ndarray) -> tuple[float, float]:
    """(min over nodes of the smallest eigenvalue of sym(A), max spectral norm).

    ``a`` has shape (d, d, ...); constant matrices are accepted as (d, d).
    """
    d = a.shape[0]
    m = np.moveaxis(a.reshape(d, d, -1), -1, 0)
    sym = 0.5 * (m + np.swapaxes(m, 1, 2))
    lo = float(np.linalg.eigvalsh(sym)[:, 0].min())
    hi = float(np.linalg.norm(m, ord=2, axis=(1, 2)).max())
    return lo, hi


def check_ellipticity(a: np.ndarray, lam: float, tol: float = 1e-12) -> tuple[float, float]:
    lo, hi = ellipticity_margins(a)
    if lo < lam - tol or hi > 1.0 / lam + tol:
        raise ValidationError(
            f"coefficient violates ellipticity with lambda={lam}: min eig {lo:.6g}, max norm {hi:.6g}"
        )
    return lo, hi


# --------------------------------------------------------------------------
# TNSR/1 snapshots
# --------------------------------------------------------------------------

TNSR_MAGIC = "TNSR/1"


def write_tnsr(path: str | os.PathLike, data, meta: Mapping | None = None) -> None:
    """Write a header line then the little-endian float64 payload.

    ``data`` may be a TorusField (grid info is recorded) or a plain array.
    """
    header: dict = {}
    if isinstance(data, TorusField):
        arr = data.values
        header["shape"] = data.shape_name
        header["grid"] = data.grid.to_dict()
    else:
        arr = np.asarray(data, dtype=float)
        header["shape"] = _SHAPE_NAMES.get(arr.ndim, f"tensor{arr.ndim}") if meta is None or "shape" not in meta else meta["shape"]
    header = {"format": TNSR_MAGIC, "dims": list(arr.shape), **header, "dtype": "f64", "order": "row-major"}
    if meta:
        header.update({k: v for k, v in meta.items() if k != "shape"})
    payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def read_tnsr(path: str | os.PathLike):
    """Return ``(data, header)``; data is a TorusField when grid info is present."""
    with open(path, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: bad TNSR header") from exc
    if header.get("dtype") != "f64" or header.get("order") != "row-major":
        raise ValidationError(f"{path}: unsupported dtype/order")
    dims = tuple(header["dims"])
    if len(payload) != 8 * math.prod(dims):
        raise ValidationError(f"{path}: payload size does not match dims {dims}")
    arr = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(float)
    if "grid" in header:
        g = header["grid"]
        return TorusField(GridSpec(g["d"], g["n"], tuple(g["resolution"])), arr), header
    return arr, header
