"""Unknown potentials and admissible background scatterers.

Backgrounds are of the form ``w = omega_nu * (q conv q)`` with
``omega_nu(x) = |x|^nu K_nu(|x|)`` and ``q`` a real, even, compactly supported
bump. Their transforms are real and bounded below by ``c1 (1 + |p|)^-beta``,
``beta = d + 2 nu``, so ``w_hat`` never vanishes. Families of two or ``d + 1``
members are built by translation or by multiplication with ``i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
from numpy.polynomial.legendre import leggauss

from .fields import (FieldError, GridSpec, SampledField, SobolevBudget, fourier_transform,
                     bessel_kernel_values, kernel_constant, sobolev_budget)

MODES = ("iw-pair", "translate-pair", "lattice")


class GeometryError(ValueError):
    """Background support overlaps the potential domain."""


class ParameterError(ValueError):
    """Invalid family or bump parameters."""


def bump_profile(rho: np.ndarray, profile: str = "smooth") -> np.ndarray:
    """Even radial profile on [0, 1], zero for rho >= 1, value 1 at rho = 0."""
    rho = np.asarray(rho, float)
    out = np.zeros_like(rho)
    inside = rho < 1.0
    if profile == "smooth":
        out[inside] = np.exp(1.0 - 1.0 / (1.0 - rho[inside] ** 2))
    elif profile == "polynomial":
        out[inside] = (1.0 - rho[inside] ** 2) ** 4
    else:
        raise ParameterError(f"unknown profile {profile!r}")
    return out


def build_bump(grid: GridSpec, radius: float, profile: str = "smooth",
               amplitude: complex = 1.0, center=None) -> SampledField:
    """Real (or constant-phase), even bump supported in |x - center| <= radius."""
    if not radius > 0:
        raise ParameterError("bump radius must be positive")
    if amplitude == 0:
        raise ParameterError("bump amplitude must be nonzero")
    center = np.zeros(grid.dim) if center is None else np.asarray(center, float)
    rho = grid.radius(center) / radius
    return SampledField(grid, amplitude * bump_profile(rho, profile),
                        support_radius=radius, support_center=tuple(center))


def autoconvolve(q: SampledField) -> np.ndarray:
    """Samples of (q conv q) on the grid of ``q`` (linear, no wraparound).

    The grid of ``q`` must be origin-centered and large enough to hold the
    doubled support.
    """
    grid = q.grid
    n, d = grid.points, grid.dim
    axes = tuple(range(d))
    spec = np.fft.fftn(q.values, s=(2 * n,) * d, axes=axes)
    full = np.fft.ifftn(spec * spec, axes=axes)
    sl = tuple(slice(n // 2, n // 2 + n) for _ in range(d))
    return full[sl] * grid.spacing ** d


@dataclass(frozen=True)
class Potential:
    """Unknown scatterer v, supported in the ball of radius ``domain_radius``."""

    field: SampledField
    domain_radius: float
    budget: SobolevBudget

    def __post_init__(self):
        outside = self.field.grid.radius() > self.domain_radius
        if np.any(self.field.values[outside] != 0):
            raise GeometryError("potential is not supported inside its domain")
        if np.abs(self.field.values).max() > self.budget.sup_bound * (1 + 1e-12):
            raise ParameterError("sup bound smaller than max |v|")

    def fourier(self, p) -> np.ndarray:
        return fourier_transform(self.field, p).values

    def __call__(self, x) -> np.ndarray:
        """Nearest-node values of v at points ``x`` (used for error evaluation)."""
        return sample_nearest(self.field, x)


def sample_nearest(field: SampledField, x) -> np.ndarray:
    grid = field.grid
    x = np.atleast_2d(np.asarray(x, float))
    idx = []
    for ax in range(grid.dim):
        i = np.rint((x[:, ax] - grid.center[ax]) / grid.spacing).astype(int) + grid.points // 2
        idx.append(np.clip(i, 0, grid.points - 1))
    return field.values[tuple(idx)]


def build_potential(grid: GridSpec, domain_radius: float = 1.0, profile: str = "bump",
                    amplitude: complex = 1.0, n: int = 3) -> Potential:
    """Test potentials supported in the ball of radius ``domain_radius``.

    ``bump``: smooth bump filling the domain. ``autocorrelation``: b conv b
    of a half-radius bump, normalized to peak |amplitude|; its transform is
    non-negative. ``asymmetric``: two off-center bumps of unequal weight.
    """
    R = domain_radius
    if profile == "bump":
        field = build_bump(grid, R, "smooth", amplitude)
    elif profile == "autocorrelation":
        half = build_bump(grid, R / 2.0, "smooth", 1.0)
        vals = autoconvolve(half).real
        vals = amplitude * vals / vals.max()
        field = SampledField(grid, vals, support_radius=R)
    elif profile == "asymmetric":
        a = build_bump(grid, 0.55 * R, "smooth", amplitude, center=(0.35 * R,) + (0.1 * R,) * (grid.dim - 1))
        b = build_bump(grid, 0.4 * R, "smooth", 0.5 * amplitude,
                       center=(-0.5 * R,) + (-0.3 * R,) * (grid.dim - 1))
        field = SampledField(grid, a.values + b.values, support_radius=R)
    elif profile == "zero":
        field = SampledField(grid, np.zeros(grid.shape), support_radius=R)
    else:
        raise ParameterError(f"unknown potential profile {profile!r}")
    return Potential(field, R, sobolev_budget(field, n))


@dataclass(frozen=True, eq=False)
class BackgroundScatterer:
    """One member ``phase * w(x - translate)`` of a background family."""

    field: SampledField
    base: SampledField
    translate: tuple
    phase_factor: complex
    nu: float
    q_radius: float
    beta: float
    c1: float

    @property
    def omega_radius(self) -> float:
        return 2.0 * self.q_radius

    def fourier(self, p) -> np.ndarray:
        """Numerical transform of the placed member (translation and phase included)."""
        return fourier_transform(self.field, p).values

    def base_fourier(self, p) -> np.ndarray:
        return fourier_transform(self.base, p).values

    def lower_bound(self, p) -> np.ndarray:
        p = np.asarray(p, float).reshape(-1, self.base.dim)
        return self.c1 * (1.0 + np.linalg.norm(p, axis=1)) ** (-self.beta)

    def place(self, translate=None, phase: complex = 1.0) -> "BackgroundScatterer":
        t = np.asarray(self.translate if translate is None else translate, float)
        placed = self.base.scaled(phase).translated(t)
        return BackgroundScatterer(placed, self.base, tuple(t), complex(phase), self.nu,
                                   self.q_radius, self.beta, self.c1)


def disk_quadrature(dim: int, order: int = 64):
    """Nodes and weights on the unit ball: Gauss-Legendre radii x uniform angles."""
    xr, wr = leggauss(order)
    rad = 0.5 * (xr + 1.0)
    wrad = 0.5 * wr
    if dim == 2:
        th = 2.0 * np.pi * np.arange(order) / order
        r, t = np.meshgrid(rad, th, indexing="ij")
        w = (wrad * rad)[:, None] * np.full(order, 2.0 * np.pi / order)[None, :]
        nodes = np.stack([r * np.cos(t), r * np.sin(t)], -1).reshape(-1, 2)
        return nodes, w.ravel()
    if dim == 3:
        xc, wc = leggauss(order)
        ph = 2.0 * np.pi * np.arange(order) / order
        r, c, f = np.meshgrid(rad, xc, ph, indexing="ij")
        sn = np.sqrt(1.0 - c ** 2)
        nodes = np.stack([r * sn * np.cos(f), r * sn * np.sin(f), r * c], -1).reshape(-1, 3)
        w = (wrad * rad ** 2)[:, None, None] * wc[None, :, None] * (2.0 * np.pi / order)
        return nodes, np.broadcast_to(w, r.shape).ravel()
    raise FieldError("ball quadrature implemented for d = 2, 3")


def lower_bound_constant(q: SampledField, nu: float, order: int = 64) -> float:
    """c1(q, nu) = c12 / 2^(d + 2 nu) * integral_{|xi| <= 1} |q_hat(xi)|^2 dxi."""
    d = q.dim
    nodes, weights = disk_quadrature(d, order)
    qhat = fourier_transform(q, nodes).values
    integral = float(np.sum(weights * np.abs(qhat) ** 2))
    return kernel_constant(nu, d) / 2.0 ** (d + 2.0 * nu) * integral


def build_background(q: SampledField, nu: float, q_radius: Optional[float] = None) -> BackgroundScatterer:
    """w = omega_nu * (q conv q), untranslated, with its lower-bound metadata."""
    if not nu > 0:
        raise FieldError("nu must be positive")
    grid = q.grid
    if not grid.origin_centered:
        raise ParameterError("q must be sampled on an origin-centered grid")
    r = q_radius if q_radius is not None else q.support_radius
    if r is None:
        raise ParameterError("q needs a support radius")
    if grid.extent < 2.0 * r + grid.spacing:
        raise GeometryError("grid too small for the support of q conv q")
    if grid.spacing > r / 4.0:
        raise FieldError("grid too coarse to resolve the kernel near the origin")
    qq = autoconvolve(q)
    if np.all(np.isreal(q.values)):
        qq = qq.real
    vals = bessel_kernel_values(nu, grid.radius()) * qq
    base = SampledField(grid, vals, support_radius=2.0 * r)
    c1 = lower_bound_constant(q, nu)
    beta = grid.dim + 2.0 * nu
    return BackgroundScatterer(base, base, (0.0,) * grid.dim, 1.0 + 0j, float(nu), float(r),
                               beta, c1)


@dataclass(frozen=True)
class ZetaProfile:
    """Closed form of the determinant for a family mode."""

    analytic_form: str
    y: Optional[tuple] = None
    s: Optional[float] = None

    def value(self, pair: int, p, w_hat) -> np.ndarray:
        p = np.asarray(p, float)
        p = p.reshape(-1, p.shape[-1])
        w2 = np.abs(np.asarray(w_hat)) ** 2
        if self.analytic_form == "constant-positive":
            return w2
        if self.analytic_form == "hyperplane-sine":
            return np.sin(p @ np.asarray(self.y)) * w2
        if self.analytic_form == "lattice-sine":
            return np.sin(self.s * p[:, pair - 2]) * w2
        raise ParameterError(self.analytic_form)


_FORMS = {"iw-pair": "constant-positive", "translate-pair": "hyperplane-sine",
          "lattice": "lattice-sine"}


@dataclass(frozen=True, eq=False)
class BackgroundFamily:
    mode: str
    members: tuple
    domain_radius: float
    y: Optional[tuple] = None
    s: Optional[float] = None
    base_domain_gap: float = 0.0
    profile: ZetaProfile = dc_field(default=None)

    @property
    def m(self) -> int:
        return len(self.members)

    @property
    def dim(self) -> int:
        return self.members[0].field.dim

    @property
    def base(self) -> BackgroundScatterer:
        return self.members[0]

    @property
    def beta(self) -> float:
        return self.members[0].beta

    def member(self, j: int) -> BackgroundScatterer:
        """Member ``w_j`` with 1-based index."""
        if not 1 <= j <= self.m:
            raise IndexError(f"member index {j} outside 1..{self.m}")
        return self.members[j - 1]

    def transforms(self, p) -> np.ndarray:
        """Numerical w_hat_j(p) for all members, shape (m, n_p)."""
        return np.stack([mem.fourier(p) for mem in self.members])

    def zeta(self, pair: int, p, transforms=None) -> np.ndarray:
        """Determinant Re w1 Im wj - Im w1 Re wj from numerical transforms."""
        if not 2 <= pair <= self.m:
            raise IndexError(f"pair index {pair} outside 2..{self.m}")
        if transforms is None:
            w1, wj = self.member(1).fourier(p), self.member(pair).fourier(p)
        else:
            w1, wj = transforms[0], transforms[pair - 1]
        return w1.real * wj.imag - w1.imag * wj.real

    def zeta_analytic(self, pair: int, p) -> np.ndarray:
        p = np.asarray(p, float).reshape(-1, self.dim)
        return self.profile.value(pair, p, self.base.base_fourier(p))

    def manifest(self) -> dict:
        b = self.base
        return {
            "mode": self.mode,
            "nu": b.nu,
            "r": b.q_radius,
            "beta": b.beta,
            "c1": b.c1,
            "translates": [list(mem.translate) for mem in self.members],
            "phases": [[mem.phase_factor.real, mem.phase_factor.imag] for mem in self.members],
            "y": list(self.y) if self.y is not None else None,
            "s": self.s,
            "domain_radius": self.domain_radius,
            "base_domain_gap": self.base_domain_gap,
        }


def make_family(base: BackgroundScatterer, mode: str, domain_radius: float,
                translate=None, y=None, s: Optional[float] = None) -> BackgroundFamily:
    """Assemble and validate a two-member pair or a (d+1)-member lattice family."""
    d = base.base.dim
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}")
    t1 = np.zeros(d) if translate is None else np.asarray(translate, float)
    if mode == "iw-pair":
        members = [base.place(t1), base.place(t1, 1j)]
    elif mode == "translate-pair":
        if y is None or not np.any(np.asarray(y, float) != 0):
            raise ParameterError("translate-pair needs a nonzero offset y")
        y = np.asarray(y, float)
        members = [base.place(t1), base.place(t1 + y)]
    else:
        if s is None or not s > 0:
            raise ParameterError("lattice family needs s > 0")
        members = [base.place(t1)] + [base.place(t1 + s * np.eye(d)[j]) for j in range(d)]
    gaps = [np.linalg.norm(m.translate) - m.omega_radius - domain_radius for m in members]
    gap = min(gaps)
    if not gap > 0:
        raise GeometryError(f"background support overlaps the potential domain (gap {gap:.3g})")
    profile = ZetaProfile(_FORMS[mode], tuple(y) if y is not None else None,
                          float(s) if s is not None else None)
    return BackgroundFamily(mode, tuple(members), float(domain_radius),
                            tuple(y) if y is not None else None,
                            float(s) if s is not None else None, float(gap), profile)
