"""Phaseless Born inversion and configuration-space reconstruction.

Away from the zero set of the determinant, the transform of v is recovered
pointwise from three intensities by a 2x2 linear solve. Near the zero set of
a translate pair (slabs ``p.y in (-eps, eps) + pi Z``) the estimate is replaced
by the average of its values on the two slab faces; near the zero lattice of a
(d+1)-member family (balls of radius eps/s around ``(pi/s) Z^d``) by its average
over the sphere bounding the ball. ``reconstruct`` integrates the estimates
against ``exp(-i p.x)`` over the ball ``|p| <= r(E)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dc_field
from fractions import Fraction
from typing import Callable, Optional

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import sparse

from .forward import PhaselessDataset
from .scatterers import BackgroundFamily

logger = logging.getLogger(__name__)

THEOREMS = ("phased-baseline", "T1", "T2", "T3")
FAMILY_FOR = {"T1": "iw-pair", "T2": "translate-pair", "T3": "lattice"}


class ConfigError(ValueError):
    """Theorem, family and parameters do not fit together."""


class NearSingularError(ArithmeticError):
    """|zeta(p)| below the floor at a point not routed through regularization."""


class CoverageError(KeyError):
    """Dataset lacks points required by the quadrature plan."""

    def __init__(self, missing):
        super().__init__(f"{len(missing)} required points missing from dataset")
        self.missing = missing


# -- exponents, radii, cutoffs ----------------------------------------------

def alpha(theorem: str, n, d, beta=0):
    """Decay exponent of each reconstruction (exact for int/Fraction input)."""
    if not n > d:
        raise ConfigError("rates require n > d")
    if theorem == "phased-baseline":
        return (n - d) / (2 * n) if not _exact(n, d) else Fraction(n - d, 2 * n)
    if _exact(n, d, beta):
        n, d, beta = Fraction(n), Fraction(d), Fraction(beta)
    if theorem == "T1":
        return (n - d) / (2 * (n + beta))
    if theorem == "T2":
        return (n - d) / (2 * (n + beta + (n - d) / 2))
    if theorem == "T3":
        return (n - d) / (2 * (n + beta + (n - d) / (d + 1)))
    raise ConfigError(f"unknown theorem {theorem!r}")


def _exact(*vals) -> bool:
    return all(isinstance(v, (int, Fraction)) for v in vals)


@dataclass(frozen=True)
class ReconConfig:
    """Reconstruction scheme and its energy-dependent radius and cutoff.

    ``radial_nodes``/``angular_nodes`` fix the polar quadrature on the ball;
    when None they scale with r(E) times the domain radius.
    """

    theorem: str
    n: int
    tau: float = 1.0
    beta: float = 0.0
    dim: int = 2
    radial_nodes: Optional[int] = None
    angular_nodes: Optional[int] = None
    sphere_nodes: int = 32

    def __post_init__(self):
        if self.theorem not in THEOREMS:
            raise ConfigError(f"theorem must be one of {THEOREMS}")
        if not self.n > self.dim:
            raise ConfigError("n must exceed the dimension")
        if not 0 < self.tau <= 1:
            raise ConfigError("tau must lie in (0, 1]")
        if self.theorem != "phased-baseline" and not self.beta > 0:
            raise ConfigError("beta must be positive")

    @property
    def alpha(self) -> float:
        return float(alpha(self.theorem, self.n, self.dim, self.beta))

    def radius(self, energy: float) -> float:
        return 2.0 * self.tau * energy ** (self.alpha / (self.n - self.dim))

    def epsilon(self, energy: float) -> Optional[float]:
        if self.theorem == "T2":
            return energy ** (-self.alpha / 2.0)
        if self.theorem == "T3":
            return energy ** (-self.alpha / (self.dim + 1))
        return None

    def node_counts(self, energy: float, domain_radius: float) -> tuple:
        band = self.radius(energy) * domain_radius
        nr = self.radial_nodes or max(16, int(math.ceil(2.0 * band)) + 12)
        na = self.angular_nodes or max(32, 2 * int(math.ceil(2.0 * band + 12)))
        return nr, na


# -- zero sets ----------------------------------------------------------------

@dataclass(frozen=True)
class ZeroSetModel:
    """Open eps-neighbourhood of the determinant's zero set.

    Pair mode: ``p.y in (-eps, eps) + pi Z``. Lattice mode:
    ``|s p - pi z| < eps`` for some z in Z^d. Boundary ties count as outside.
    """

    mode: str
    epsilon: float
    y: Optional[np.ndarray] = None
    s: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ConfigError("epsilon must lie in (0, 1)")
        if self.mode == "translate-pair":
            object.__setattr__(self, "y", np.asarray(self.y, float))
        elif self.mode == "lattice" and not (self.s and self.s > 0):
            raise ConfigError("lattice zero set needs s > 0")

    @classmethod
    def for_family(cls, family: BackgroundFamily, epsilon: float) -> "ZeroSetModel":
        return cls(family.mode, epsilon, family.y, family.s)

    def classify(self, p):
        """Return (inside, z): boolean mask and nearest zero index per point."""
        p = np.atleast_2d(np.asarray(p, float))
        if self.mode == "translate-pair":
            t = p @ self.y
            z = np.rint(t / np.pi).astype(int)
            return np.abs(t - np.pi * z) < self.epsilon, z
        if self.mode == "lattice":
            t = self.s * p
            z = np.rint(t / np.pi).astype(int)
            return np.linalg.norm(t - np.pi * z, axis=1) < self.epsilon, z
        return np.zeros(len(p), bool), np.zeros(len(p), int)

    def p_perp(self, p) -> np.ndarray:
        p = np.atleast_2d(np.asarray(p, float))
        y = self.y
        return p - np.outer(p @ y, y) / (y @ y)

    def slab_faces(self, p, z):
        """p_-^eps and p_+^eps for points inside a slab with index z."""
        y = self.y
        y2 = y @ y
        base = self.p_perp(p) + np.outer(np.pi * np.asarray(z), y) / y2
        step = self.epsilon * y / y2
        return base - step, base + step

    def sphere(self, z, count: int) -> np.ndarray:
        """``count`` nodes on the sphere of radius eps/s around (pi/s) z."""
        z = np.asarray(z, float)
        center = np.pi * z / self.s
        return center + (self.epsilon / self.s) * sphere_nodes(len(z), count)[0]


def sphere_nodes(dim: int, count: int):
    """Equal-weight-style nodes on S^(d-1): trapezoid on the circle for d = 2."""
    if dim == 2:
        th = 2.0 * np.pi * np.arange(count) / count
        return np.stack([np.cos(th), np.sin(th)], 1), np.full(count, 1.0 / count)
    if dim == 3:
        m = max(2, int(round(math.sqrt(count / 2.0))))
        xc, wc = leggauss(m)
        ph = 2.0 * np.pi * np.arange(2 * m) / (2 * m)
        c, f = np.meshgrid(xc, ph, indexing="ij")
        sn = np.sqrt(1.0 - c ** 2)
        nodes = np.stack([sn * np.cos(f), sn * np.sin(f), c], -1).reshape(-1, 3)
        w = np.broadcast_to(wc[:, None] / (2.0 * 2 * m), c.shape).ravel()
        return nodes, w
    raise ConfigError("sphere nodes implemented for d = 2, 3")


def pair_selector(p, s: float) -> np.ndarray:
    """i'(p, s) in {2, ..., d+1}: member maximizing |sin(s p_(i-1))| (first on ties)."""
    p = np.atleast_2d(np.asarray(p, float))
    return 2 + np.argmax(np.abs(np.sin(s * p)), axis=1)


# -- spectral estimates -------------------------------------------------------

@dataclass(frozen=True)
class SpectralEstimate:
    p: np.ndarray
    energy: float
    value: complex
    regularized: bool
    pair_used: int
    zeta_at_p: float
    z: Optional[object] = None
    p_perp: Optional[np.ndarray] = None


def invert_pair(i0, i1, ij, w1, wj):
    """U from the 2x2 system; returns (U, zeta). Arrays broadcast elementwise."""
    zeta = w1.real * wj.imag - w1.imag * wj.real
    b1 = i1 - i0 - np.abs(w1) ** 2
    b2 = ij - i0 - np.abs(wj) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        re = 0.5 * (wj.imag * b1 - w1.imag * b2) / zeta
        im = 0.5 * (-wj.real * b1 + w1.real * b2) / zeta
    return re + 1j * im, zeta


def _pairs_for(family: BackgroundFamily, p) -> np.ndarray:
    if family.mode == "lattice":
        return pair_selector(p, family.s)
    return np.full(len(np.atleast_2d(p)), 2, dtype=int)


def estimate_points(dataset: PhaselessDataset, family: BackgroundFamily, p, energy: float,
                    pairs=None):
    """Vectorized U at points ``p`` (which must be dataset points).

    Returns (U, zeta, pairs, w1) with the numerically evaluated w_hat's.
    """
    p = np.atleast_2d(np.asarray(p, float))
    try:
        idx = dataset.p_index(p)
    except KeyError as exc:
        raise CoverageError(exc.args[0]) from None
    ie = dataset.energy_index(energy)
    pairs = _pairs_for(family, p) if pairs is None else np.broadcast_to(pairs, (len(p),))
    what = family.transforms(p)
    table = dataset.intensities[:, ie, :]
    cols = np.arange(len(p))
    wj = what[pairs - 1, cols]
    U, zeta = invert_pair(table[0, idx], table[1, idx], table[pairs, idx], what[0], wj)
    return U, zeta, pairs, what[0]


def sine_floor(family: BackgroundFamily, epsilon: Optional[float]) -> float:
    """Lower bound on |zeta| / |w_hat|^2 outside the eps-neighbourhood."""
    if family.mode == "iw-pair" or epsilon is None:
        return 0.0
    if family.mode == "translate-pair":
        return 2.0 * epsilon / math.pi
    return 2.0 * epsilon / (math.pi * math.sqrt(family.dim))


def spectral_estimate(dataset: PhaselessDataset, family: BackgroundFamily, pair: int, p,
                      energy: float, floor: Optional[float] = None,
                      epsilon: Optional[float] = None) -> SpectralEstimate:
    """U(p, E) = 1/2 M^-1 b using members w_1 and w_pair.

    ``floor`` bounds |zeta| from below; by default it is the sine bound times
    |w_hat_1(p)|^2 when ``epsilon`` is given, else zero.
    """
    p = np.asarray(p, float)
    U, zeta, _, w1 = estimate_points(dataset, family, p[None, :], energy, pairs=pair)
    if floor is None:
        floor = sine_floor(family, epsilon) * abs(w1[0]) ** 2 if epsilon else 0.0
    if abs(zeta[0]) <= floor:
        raise NearSingularError(f"|zeta| = {abs(zeta[0]):.3e} below floor {floor:.3e} at p = {p}")
    return SpectralEstimate(p, energy, complex(U[0]), False, int(pair), float(zeta[0]))


def clamp_to_ball(points: np.ndarray, radius: float):
    """Radially clamp points outside |p| <= radius; return (points, n_clamped)."""
    norm = np.linalg.norm(points, axis=1)
    out = norm > radius
    if np.any(out):
        points = points.copy()
        points[out] *= (radius * (1.0 - 1e-12) / norm[out])[:, None]
        logger.info("clamped %d regularization points to the probe ball", int(out.sum()))
    return points, int(out.sum())


def slab_average(estimator: Callable, p, zero_set: ZeroSetModel, probe_radius=None):
    """U^eps(p) = (U(p_-) + U(p_+)) / 2 for points inside slabs."""
    p = np.atleast_2d(np.asarray(p, float))
    inside, z = zero_set.classify(p)
    if not np.all(inside):
        raise ConfigError("slab averaging requested outside the slab neighbourhood")
    lo, hi = zero_set.slab_faces(p, z)
    if probe_radius is not None:
        lo, _ = clamp_to_ball(lo, probe_radius)
        hi, _ = clamp_to_ball(hi, probe_radius)
    return 0.5 * (estimator(lo) + estimator(hi)), z


def sphere_average(estimator: Callable, p, zero_set: ZeroSetModel, count: int,
                   probe_radius=None):
    """U^eps(p): average of U over the sphere of radius eps/s around (pi/s) z(p)."""
    p = np.atleast_2d(np.asarray(p, float))
    inside, z = zero_set.classify(p)
    if not np.all(inside):
        raise ConfigError("sphere averaging requested outside the lattice neighbourhood")
    d = p.shape[1]
    _, weights = sphere_nodes(d, count)
    out = np.empty(len(p), dtype=complex)
    for i, zi in enumerate(z):
        pts = zero_set.sphere(zi, count)
        if probe_radius is not None:
            pts, _ = clamp_to_ball(pts, probe_radius)
        out[i] = np.sum(weights * estimator(pts))
    return out, z


def regularized_estimate_pair(dataset, family, p, energy, epsilon) -> SpectralEstimate:
    zs = ZeroSetModel.for_family(family, epsilon)
    p = np.asarray(p, float)
    inside, z = zs.classify(p)
    if not inside[0]:
        raise ConfigError("point is outside the slab neighbourhood")
    lo, hi = zs.slab_faces(p[None, :], z)
    radius = 2.0 * math.sqrt(energy)
    for face in (lo, hi):
        if np.linalg.norm(face) > radius * (1 + 1e-12):
            raise ConfigError("slab face outside the probe ball")
    val, _ = slab_average(lambda q: estimate_points(dataset, family, q, energy)[0], p, zs)
    zeta = family.zeta(2, p[None, :])[0]
    return SpectralEstimate(p, energy, complex(val[0]), True, 2, float(zeta), int(z[0]),
                            zs.p_perp(p)[0])


def regularized_estimate_lattice(dataset, family, p, energy, epsilon,
                                 quad_points: int = 32) -> SpectralEstimate:
    zs = ZeroSetModel.for_family(family, epsilon)
    p = np.asarray(p, float)
    inside, z = zs.classify(p)
    if not inside[0]:
        raise ConfigError("point is outside the lattice neighbourhood")
    nodes = zs.sphere(z[0], quad_points)
    if np.linalg.norm(nodes, axis=1).max() > 2.0 * math.sqrt(energy) * (1 + 1e-12):
        raise ConfigError("sphere nodes leave the probe ball")
    sines = np.abs(np.sin(family.s * nodes))
    if np.any(sines.max(axis=1) == 0):
        raise ConfigError("degenerate sphere node")
    val, _ = sphere_average(lambda q: estimate_points(dataset, family, q, energy)[0], p, zs,
                            quad_points)
    pair = int(pair_selector(p, family.s)[0])
    zeta = family.zeta(pair, p[None, :])[0]
    return SpectralEstimate(p, energy, complex(val[0]), True, pair, float(zeta), tuple(z[0]))


# -- quadrature plan ------------------------------------------------------------

def ball_nodes(dim: int, radius: float, radial: int, angular: int):
    """Polar product rule on |p| <= radius: Gauss-Legendre radii, uniform angles."""
    xr, wr = leggauss(radial)
    rad = 0.5 * radius * (xr + 1.0)
    wrad = 0.5 * radius * wr * rad ** (dim - 1)
    if dim == 2:
        th = 2.0 * np.pi * (np.arange(angular) + 0.5) / angular
        dirs = np.stack([np.cos(th), np.sin(th)], 1)
        wdir = np.full(angular, 2.0 * np.pi / angular)
    elif dim == 3:
        dirs, wdir = sphere_nodes(3, angular)
        wdir = wdir * 4.0 * np.pi
    else:
        raise ConfigError("ball quadrature implemented for d = 2, 3")
    nodes = (rad[:, None, None] * dirs[None, :, :]).reshape(-1, dim)
    weights = (wrad[:, None] * wdir[None, :]).ravel()
    return nodes, weights


@dataclass(eq=False)
class ReconPlan:
    """Quadrature nodes in B_r(E), their region labels and the data points needed.

    ``averaging`` maps estimates at ``required`` points to node values:
    ``U_nodes = averaging @ U_required``.
    """

    energy: float
    radius: float
    epsilon: Optional[float]
    nodes: np.ndarray
    weights: np.ndarray
    inside: np.ndarray
    z: np.ndarray
    required: np.ndarray
    averaging: sparse.csr_matrix
    clamped: int = 0

    @property
    def nodes_inside(self) -> int:
        return int(self.inside.sum())

    @property
    def nodes_outside(self) -> int:
        return int(len(self.nodes) - self.inside.sum())


def _unique_rows(points: np.ndarray):
    keys = np.round(points, 10) + 0.0
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    return points[first], inverse.ravel()


def plan_reconstruction(config: ReconConfig, family: Optional[BackgroundFamily],
                        energy: float, domain_radius: float) -> ReconPlan:
    if config.theorem in FAMILY_FOR:
        if family is None or family.mode != FAMILY_FOR[config.theorem]:
            raise ConfigError(f"{config.theorem} requires a {FAMILY_FOR[config.theorem]} family")
        if abs(family.beta - config.beta) > 1e-12:
            raise ConfigError("config beta differs from the family's beta")
    r = config.radius(energy)
    probe = 2.0 * math.sqrt(energy)
    if r > probe:
        raise ConfigError(f"r(E) = {r:.4g} exceeds the probe radius {probe:.4g}")
    nr, na = config.node_counts(energy, domain_radius)
    nodes, weights = ball_nodes(config.dim, r, nr, na)
    eps = config.epsilon(energy)
    if config.theorem in ("T2", "T3"):
        zs = ZeroSetModel.for_family(family, eps)
        inside, z = zs.classify(nodes)
    else:
        zs = None
        inside = np.zeros(len(nodes), bool)
        z = np.zeros(len(nodes), int)

    pts, rows, cols, vals = [], [], [], []
    clamped = 0
    count = 0

    def add(node_ids, points, weight):
        nonlocal count
        pts.append(points)
        rows.append(node_ids)
        cols.append(np.arange(count, count + len(points)))
        vals.append(np.full(len(points), weight))
        count += len(points)

    out_ids = np.flatnonzero(~inside)
    add(out_ids, nodes[out_ids], 1.0)
    in_ids = np.flatnonzero(inside)
    if len(in_ids) and config.theorem == "T2":
        lo, hi = zs.slab_faces(nodes[in_ids], z[in_ids])
        lo, c1 = clamp_to_ball(lo, probe)
        hi, c2 = clamp_to_ball(hi, probe)
        clamped += c1 + c2
        add(in_ids, lo, 0.5)
        add(in_ids, hi, 0.5)
    elif len(in_ids) and config.theorem == "T3":
        _, w = sphere_nodes(config.dim, config.sphere_nodes)
        for i in in_ids:
            sph, c = clamp_to_ball(zs.sphere(z[i], config.sphere_nodes), probe)
            clamped += c
            pts.append(sph)
            rows.append(np.full(len(sph), i))
            cols.append(np.arange(count, count + len(sph)))
            vals.append(w)
            count += len(sph)
    allpts = np.concatenate(pts) if pts else np.zeros((0, config.dim))
    required, inverse = _unique_rows(allpts)
    mat = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows),
                                                   inverse[np.concatenate(cols)])),
                            shape=(len(nodes), len(required)))
    return ReconPlan(energy, r, eps, nodes, weights, inside, z, required, mat, clamped)


# -- reconstruction -------------------------------------------------------------

@dataclass(eq=False)
class ReconResult:
    x_points: np.ndarray
    u_values: np.ndarray
    energy: float
    config: ReconConfig
    radius: float
    epsilon: Optional[float]
    nodes_inside: int
    nodes_outside: int
    sup_error: Optional[float] = None
    floor_violations: int = 0
    min_zeta_ratio: Optional[float] = None
    clamped: int = 0

    def manifest(self) -> dict:
        return {
            "theorem": self.config.theorem,
            "n": self.config.n,
            "tau": self.config.tau,
            "beta": self.config.beta,
            "alpha": self.config.alpha,
            "E": self.energy,
            "r_E": self.radius,
            "eps_E": self.epsilon,
            "nodes_outside": self.nodes_outside,
            "nodes_inside": self.nodes_inside,
            "sup_error": self.sup_error,
            "zeta_floor_violations": self.floor_violations,
            "min_zeta_over_floor": self.min_zeta_ratio,
            "clamped_points": self.clamped,
        }


def inverse_transform(x_points, nodes, weights, values, chunk: int = 4096) -> np.ndarray:
    """sum_i weights_i exp(-i p_i.x) values_i at every x (fixed summation order)."""
    x_points = np.atleast_2d(np.asarray(x_points, float))
    wv = weights * values
    out = np.empty(len(x_points), dtype=complex)
    for start in range(0, len(x_points), chunk):
        xs = x_points[start:start + chunk]
        out[start:start + chunk] = np.exp(-1j * xs @ nodes.T) @ wv
    return out


def node_estimates(dataset: PhaselessDataset, family: Optional[BackgroundFamily],
                   config: ReconConfig, plan: ReconPlan):
    """Estimates at the plan's nodes plus zeta-floor diagnostics."""
    if config.theorem == "phased-baseline":
        if dataset.phased is None:
            raise ConfigError("phased baseline needs complex amplitudes in the dataset")
        try:
            idx = dataset.p_index(plan.required)
        except KeyError as exc:
            raise CoverageError(exc.args[0]) from None
        values = dataset.phased[dataset.energy_index(plan.energy), idx]
        return plan.averaging @ values, 0, None
    U, zeta, _, w1 = estimate_points(dataset, family, plan.required, plan.energy)
    floor = sine_floor(family, plan.epsilon) * np.abs(w1) ** 2
    violations, ratio = 0, None
    if np.any(floor > 0):
        ratio_all = np.abs(zeta) / floor
        ratio = float(ratio_all.min())
        violations = int(np.sum(ratio_all < 1.0 - 1e-9))
        if violations:
            logger.warning("%d points have |zeta| below the analytic floor", violations)
    if np.any(zeta == 0):
        raise NearSingularError("zeta vanishes at a required point")
    return plan.averaging @ U, violations, ratio


def reconstruct(dataset: PhaselessDataset, family: Optional[BackgroundFamily],
                config: ReconConfig, x_points, energy: Optional[float] = None,
                truth: Optional[Callable] = None, domain_radius: float = 1.0,
                plan: Optional[ReconPlan] = None) -> ReconResult:
    """u(x, E) = integral over B_r(E) of exp(-i p.x) times U or U^eps.

    ``truth`` (callable on x points) enables the sup-norm error.
    """
    if energy is None:
        if len(dataset.energies) != 1:
            raise ConfigError("dataset holds several energies; pass energy")
        energy = float(dataset.energies[0])
    plan = plan or plan_reconstruction(config, family, energy, domain_radius)
    values, violations, ratio = node_estimates(dataset, family, config, plan)
    x_points = np.atleast_2d(np.asarray(x_points, float))
    u = inverse_transform(x_points, plan.nodes, plan.weights, values)
    if not np.all(np.isfinite(u)):
        raise ArithmeticError("non-finite reconstruction values")
    sup = None
    if truth is not None:
        sup = float(np.max(np.abs(u - truth(x_points)), initial=0.0))
    return ReconResult(x_points, u, energy, config, plan.radius, plan.epsilon,
                       plan.nodes_inside, plan.nodes_outside, sup, violations, ratio,
                       plan.clamped)


def domain_points(potential_grid, domain_radius: float) -> np.ndarray:
    """Nodes of the potential grid inside the closed domain ball."""
    coords = np.stack([c.ravel() for c in potential_grid.coordinates()], 1)
    return coords[np.linalg.norm(coords, axis=1) <= domain_radius]
