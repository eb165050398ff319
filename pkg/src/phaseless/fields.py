"""Grids, sampled fields, Fourier transforms and special functions.

Fourier convention used throughout the package::

    v_hat(p) = (2 pi)^(-d) * integral exp(+i p.x) v(x) dx
    v(x)     = integral exp(-i p.x) v_hat(p) dp

Transforms of sampled fields are Riemann sums on the sampling grid, evaluated
at arbitrary target points (not restricted to an FFT lattice).
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import special

logger = logging.getLogger(__name__)


class FieldError(ValueError):
    """Invalid field, grid or special-function input."""


@dataclass(frozen=True)
class GridSpec:
    """Regular grid of ``points**dim`` nodes covering ``center + [-L, L]^dim``.

    Node coordinates along every axis are ``center + (i - points // 2) * h``
    with ``h = 2L / points``, so an origin-centered grid with an even number
    of points contains ``x = 0``.
    """

    dim: int
    extent: float
    points: int
    center: tuple = ()

    def __post_init__(self):
        if self.dim < 1:
            raise FieldError("dim must be >= 1")
        if self.points < 2:
            raise FieldError("points must be >= 2")
        if not self.extent > 0:
            raise FieldError("extent must be positive")
        center = tuple(float(c) for c in self.center) or (0.0,) * self.dim
        if len(center) != self.dim:
            raise FieldError("center has wrong dimension")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "extent", float(self.extent))
        object.__setattr__(self, "points", int(self.points))

    @property
    def spacing(self) -> float:
        return 2.0 * self.extent / self.points

    @property
    def shape(self) -> tuple:
        return (self.points,) * self.dim

    @property
    def origin_centered(self) -> bool:
        return all(c == 0.0 for c in self.center)

    def axis(self, i: int) -> np.ndarray:
        idx = np.arange(self.points) - self.points // 2
        return self.center[i] + idx * self.spacing

    def axes(self) -> list:
        return [self.axis(i) for i in range(self.dim)]

    def coordinates(self) -> list:
        """Meshgrid arrays (``indexing='ij'``), one per axis."""
        return np.meshgrid(*self.axes(), indexing="ij")

    def radius(self, about=None) -> np.ndarray:
        coords = self.coordinates()
        about = np.zeros(self.dim) if about is None else np.asarray(about, float)
        return np.sqrt(sum((c - a) ** 2 for c, a in zip(coords, about)))

    def shifted(self, offset) -> "GridSpec":
        offset = np.asarray(offset, float)
        return GridSpec(self.dim, self.extent, self.points,
                        tuple(np.asarray(self.center) + offset))

    def check_resolution(self, energy: float) -> bool:
        """Warn when the spacing is too coarse for wavenumber sqrt(E)."""
        limit = math.pi / (2.0 * math.sqrt(energy))
        if self.spacing > limit:
            logger.warning("grid spacing %.4g exceeds pi/(2 sqrt(E)) = %.4g at E = %g",
                           self.spacing, limit, energy)
            return False
        return True


@dataclass(frozen=True, eq=False)
class SampledField:
    """Complex samples on a :class:`GridSpec`.

    ``support_radius``/``support_center`` optionally declare a ball outside of
    which every sample is exactly zero; the constructor enforces it.
    """

    grid: GridSpec
    values: np.ndarray
    support_radius: Optional[float] = None
    support_center: Optional[tuple] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=complex)
        if values.size != self.grid.points ** self.grid.dim:
            raise FieldError(f"expected {self.grid.points ** self.grid.dim} samples, "
                             f"got {values.size}")
        values = values.reshape(self.grid.shape)
        if self.support_radius is not None:
            center = self.support_center
            if center is None:
                center = (0.0,) * self.grid.dim
            center = tuple(float(c) for c in center)
            object.__setattr__(self, "support_center", center)
            outside = self.grid.radius(center) > self.support_radius
            if np.any(outside) and np.any(values[outside] != 0):
                values = values.copy()
                values[outside] = 0.0
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.grid.dim

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def __add__(self, other: "SampledField") -> "SampledField":
        if other.grid != self.grid:
            raise FieldError("fields live on different grids")
        return SampledField(self.grid, self.values + other.values)

    def scaled(self, factor: complex) -> "SampledField":
        return SampledField(self.grid, factor * self.values,
                            self.support_radius, self.support_center)

    def translated(self, offset) -> "SampledField":
        """The field ``x -> self(x - offset)``: same samples on a moved grid."""
        offset = np.asarray(offset, float)
        center = None
        if self.support_center is not None:
            center = tuple(np.asarray(self.support_center) + offset)
        return SampledField(self.grid.shifted(offset), self.values,
                            self.support_radius, center)

    def embed(self, grid: GridSpec) -> "SampledField":
        """Copy the samples onto ``grid`` (same spacing, node-aligned).

        Samples falling outside ``grid`` must be zero.
        """
        if grid.dim != self.dim or not math.isclose(grid.spacing, self.grid.spacing,
                                                     rel_tol=1e-12):
            raise FieldError("embedding requires identical dimension and spacing")
        h = grid.spacing
        out = np.zeros(grid.shape, dtype=complex)
        src = [slice(None)] * self.dim
        dst = [slice(None)] * self.dim
        for ax in range(self.dim):
            delta = (self.grid.axis(ax)[0] - grid.axis(ax)[0]) / h
            off = int(round(delta))
            if abs(delta - off) > 1e-8:
                raise FieldError("grids are not node-aligned")
            lo, hi = max(0, off), min(grid.points, off + self.grid.points)
            if lo >= hi:
                src[ax] = slice(0, 0)
                dst[ax] = slice(0, 0)
            else:
                src[ax] = slice(lo - off, hi - off)
                dst[ax] = slice(lo, hi)
        out[tuple(dst)] = self.values[tuple(src)]
        if not math.isclose(np.abs(out).sum(), np.abs(self.values).sum(), rel_tol=1e-12,
                            abs_tol=1e-300):
            raise FieldError("field does not fit inside the target grid")
        return SampledField(grid, out, self.support_radius, self.support_center)


@dataclass(frozen=True)
class SpectralSamples:
    """Values of a transform at a list of points ``p``."""

    points: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if len(self.points) != len(self.values):
            raise FieldError("points and values differ in length")

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class SobolevBudget:
    """Norm inputs for the reconstruction error budget."""

    n: int
    norm_n1: float
    weighted_norms: tuple
    sup_bound: float
    dim: int

    def __post_init__(self):
        entries = [self.norm_n1, self.sup_bound, *self.weighted_norms]
        if any(e < 0 for e in entries):
            raise FieldError("budget entries must be non-negative")

    @property
    def max_weighted(self) -> float:
        return max(self.weighted_norms) if self.weighted_norms else 0.0


def _crop(field: SampledField):
    """Restrict to the bounding box of the nonzero samples."""
    vals = field.values
    axes = field.grid.axes()
    nz = np.nonzero(vals)
    if len(nz[0]) == 0:
        return None, None
    sl = tuple(slice(int(ix.min()), int(ix.max()) + 1) for ix in nz)
    return vals[sl], [a[s] for a, s in zip(axes, sl)]


def fourier_transform(field: SampledField, targets) -> SpectralSamples:
    """Riemann-sum transform ``(2pi)^-d h^d sum exp(i p.x) f(x)`` at ``targets``.

    The sum is separable and evaluated by successive contractions along each
    axis, which keeps the cost at O(T * N^d) without an FFT lattice.
    """
    d = field.dim
    targets = np.asarray(targets, dtype=float)
    if targets.size == 0:
        return SpectralSamples(np.zeros((0, d)), np.zeros(0, dtype=complex))
    targets = targets.reshape(-1, d)
    if not field.is_finite():
        raise FieldError("field contains non-finite samples")
    out = np.zeros(len(targets), dtype=complex)
    vals, axes = _crop(field)
    if vals is None:
        return SpectralSamples(targets, out)

    rest = int(np.prod(vals.shape[1:])) if d > 1 else 1
    chunk = max(1, min(len(targets), int(2e7 // max(rest, 1))))
    flat = vals.reshape(vals.shape[0], -1)
    for start in range(0, len(targets), chunk):
        tp = targets[start:start + chunk]
        acc = np.exp(1j * np.outer(tp[:, 0], axes[0])) @ flat
        for ax in range(1, d):
            acc = acc.reshape(len(tp), len(axes[ax]), -1)
            phase = np.exp(1j * np.outer(tp[:, ax], axes[ax]))
            acc = np.einsum("tn,tnr->tr", phase, acc)
        out[start:start + chunk] = acc[:, 0]
    h = field.grid.spacing
    out *= h ** d / (2.0 * np.pi) ** d
    return SpectralSamples(targets, out)


def bessel_k(nu: float, s) -> np.ndarray:
    """Modified Bessel function of the second kind K_nu(s) for s > 0."""
    if not nu > 0:
        raise FieldError("nu must be positive")
    s_arr = np.asarray(s, dtype=float)
    if np.any(~(s_arr > 0)):
        raise FieldError("K_nu is only defined here for s > 0")
    out = special.kv(nu, s_arr)
    return out if out.ndim else float(out)


def bessel_kernel_limit(nu: float) -> float:
    """Value of |x|^nu K_nu(|x|) at x = 0, i.e. 2^(nu-1) Gamma(nu)."""
    return 2.0 ** (nu - 1.0) * math.gamma(nu)


def bessel_kernel_values(nu: float, radius: np.ndarray) -> np.ndarray:
    radius = np.asarray(radius, dtype=float)
    out = np.empty_like(radius)
    zero = radius == 0
    out[zero] = bessel_kernel_limit(nu)
    r = radius[~zero]
    out[~zero] = r ** nu * special.kv(nu, r)
    return out


def bessel_kernel(nu: float, grid: GridSpec) -> SampledField:
    """Sample omega_nu(x) = |x|^nu K_nu(|x|) on ``grid``."""
    if not nu > 0:
        raise FieldError("nu must be positive")
    return SampledField(grid, bessel_kernel_values(nu, grid.radius()))


def bessel_kernel_transform(nu: float, p, dim: int) -> np.ndarray:
    """Closed-form transform c12 / (1 + |p|^2)^(d/2 + nu) of omega_nu."""
    p = np.asarray(p, float).reshape(-1, dim)
    c12 = kernel_constant(nu, dim)
    return c12 / (1.0 + np.sum(p ** 2, axis=1)) ** (dim / 2.0 + nu)


def kernel_constant(nu: float, dim: int) -> float:
    """c12 = Gamma(d/2 + nu) 2^(nu-1) / pi^(d/2)."""
    return math.gamma(dim / 2.0 + nu) * 2.0 ** (nu - 1.0) / math.pi ** (dim / 2.0)


def sphere_area(dim: int) -> float:
    """Surface measure of the unit sphere S^(dim-1) in R^dim."""
    if dim < 1:
        raise FieldError("dim must be >= 1")
    return 2.0 * math.pi ** (dim / 2.0) / math.gamma(dim / 2.0)


def ball_volume(dim: int) -> float:
    return math.pi ** (dim / 2.0) / math.gamma(dim / 2.0 + 1.0)


def multi_indices(dim: int, order: int):
    """All multi-indices J with |J| <= order."""
    for total in range(order + 1):
        for combo in itertools.combinations_with_replacement(range(dim), total):
            yield combo


def sobolev_norm(field: SampledField, n: int, weight_axis: Optional[int] = None) -> float:
    """max_{|J| <= n} of the L1 norm of the partial derivative d^J f.

    Derivatives are second-order centered differences (one-sided at the
    boundary). With ``weight_axis`` the field is first multiplied by x_j.
    """
    if n < 0:
        raise FieldError("n must be non-negative")
    vals = field.values
    h = field.grid.spacing
    if weight_axis is not None:
        vals = vals * field.grid.coordinates()[weight_axis]
    cache = {(): vals}
    best = 0.0
    for combo in multi_indices(field.dim, n):
        if combo not in cache:
            parent = cache[combo[:-1]]
            cache[combo] = np.gradient(parent, h, axis=combo[-1], edge_order=2)
        best = max(best, float(np.abs(cache[combo]).sum()) * h ** field.dim)
    return best


def sobolev_budget(field: SampledField, n: int) -> SobolevBudget:
    weighted = tuple(sobolev_norm(field, n, ax) for ax in range(field.dim))
    return SobolevBudget(n=n, norm_n1=sobolev_norm(field, n), weighted_norms=weighted,
                         sup_bound=float(np.abs(field.values).max()), dim=field.dim)


# -- persistence -----------------------------------------------------------

_MAGIC = b"PLFIELD1"
_DTYPES = {8: np.dtype("<c8"), 16: np.dtype("<c16")}


def field_bytes(field: SampledField, itemsize: int = 16) -> bytes:
    if itemsize not in _DTYPES:
        raise FieldError("itemsize must be 8 (complex64) or 16 (complex128)")
    g = field.grid
    header = _MAGIC + struct.pack("<IIdB", g.dim, g.points, g.extent, itemsize)
    header += struct.pack(f"<{g.dim}d", *g.center)
    return header + field.values.astype(_DTYPES[itemsize]).tobytes()


def checksum(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_field(field: SampledField, path, provenance: Optional[dict] = None,
               itemsize: int = 16) -> str:
    """Write ``path`` (binary) and ``path.json`` (manifest); return the checksum."""
    path = Path(path)
    data = field_bytes(field, itemsize)
    path.write_bytes(data)
    digest = checksum(data)
    manifest = {
        "checksum": digest,
        "support_radius": field.support_radius,
        "support_center": list(field.support_center) if field.support_center else None,
        "provenance": provenance or {},
    }
    path.with_name(path.name + ".json").write_text(json.dumps(manifest, indent=2,
                                                              sort_keys=True))
    return digest


def load_field(path) -> SampledField:
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(_MAGIC):
        raise FieldError(f"{path} is not a field file")
    off = len(_MAGIC)
    dim, points, extent, itemsize = struct.unpack_from("<IIdB", data, off)
    off += struct.calcsize("<IIdB")
    center = struct.unpack_from(f"<{dim}d", data, off)
    off += 8 * dim
    values = np.frombuffer(data, dtype=_DTYPES[itemsize], offset=off)
    support_radius, support_center = None, None
    side = path.with_name(path.name + ".json")
    if side.exists():
        meta = json.loads(side.read_text())
        if meta.get("checksum") not in (None, checksum(data)):
            raise FieldError(f"checksum mismatch for {path}")
        support_radius = meta.get("support_radius")
        sc = meta.get("support_center")
        support_center = tuple(sc) if sc else None
    grid = GridSpec(dim, extent, points, center)
    return SampledField(grid, values.astype(complex), support_radius, support_center)
