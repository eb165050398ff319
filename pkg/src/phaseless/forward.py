"""Forward problem: probe geometry, scattering amplitudes, phaseless datasets."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .fields import FieldError, GridSpec, SampledField, checksum, fourier_transform
from .lippmann import LippmannSchwinger, SolverError
from .scatterers import BackgroundFamily, Potential

logger = logging.getLogger(__name__)


class ProbeError(ValueError):
    """Requested p lies outside the ball |p| <= 2 sqrt(E)."""


class DatasetError(RuntimeError):
    """Dataset generation failed for some (j, E, p) records."""

    def __init__(self, message, failures=(), dataset=None):
        super().__init__(message)
        self.failures = list(failures)
        self.dataset = dataset


def asymptotic_constant(dim: int, k_norm: float) -> complex:
    """c(d, |k|) = -pi i (-2 pi i)^((d-1)/2) |k|^((d-3)/2), principal branch."""
    return -math.pi * 1j * (-2.0 * math.pi * 1j) ** ((dim - 1) / 2.0) * k_norm ** ((dim - 3) / 2.0)


@dataclass(frozen=True)
class ProbeGeometry:
    """Unit field gamma(p) orthogonal to p and the energy it is used at.

    d = 2: gamma(p) = (-p2, p1)/|p|, gamma(0) = (0, 1).
    d = 3: gamma(p) = p x e / |p x e| with e the coordinate axis least aligned
    with p (first such axis on ties); gamma(0) = e_3.
    """

    energy: float
    dim: int = 2

    def gamma(self, p) -> np.ndarray:
        p = np.atleast_2d(np.asarray(p, float))
        norm = np.linalg.norm(p, axis=1)
        out = np.zeros_like(p)
        zero = norm == 0
        if self.dim == 2:
            out[:, 0] = -p[:, 1]
            out[:, 1] = p[:, 0]
            out[~zero] /= norm[~zero, None]
            out[zero] = (0.0, 1.0)
        elif self.dim == 3:
            axis = np.argmin(np.abs(p), axis=1)
            e = np.eye(3)[axis]
            cr = np.cross(p, e)
            cn = np.linalg.norm(cr, axis=1)
            out[~zero] = cr[~zero] / cn[~zero, None]
            out[zero] = (0.0, 0.0, 1.0)
        else:
            raise FieldError("probe geometry implemented for d = 2, 3")
        return out


def probe_vectors(geom: ProbeGeometry, p):
    """k_E(p) = p/2 + (E - p^2/4)^(1/2) gamma(p), l_E(p) = k_E(p) - p.

    Accepts one point or an (n, d) array and returns arrays of the same shape.
    """
    p_arr = np.asarray(p, float)
    single = p_arr.ndim == 1
    p2 = np.atleast_2d(p_arr)
    sq = np.sum(p2 ** 2, axis=1)
    radicand = geom.energy - sq / 4.0
    if np.any(radicand < -1e-12 * geom.energy):
        raise ProbeError("|p| exceeds 2 sqrt(E)")
    amp = np.sqrt(np.clip(radicand, 0.0, None))
    g = geom.gamma(p2)
    k = p2 / 2.0 + amp[:, None] * g
    l = -p2 / 2.0 + amp[:, None] * g
    if single:
        return k[0], l[0]
    return k, l


@dataclass(eq=False)
class ForwardSolution:
    """Total field psi+ for one incident vector k."""

    k: np.ndarray
    psi_support: np.ndarray
    residual: float
    system: LippmannSchwinger

    @property
    def asymptotic_constant(self) -> complex:
        return asymptotic_constant(self.system.grid.dim, float(np.linalg.norm(self.k)))

    @property
    def psi_plus(self) -> SampledField:
        return SampledField(self.system.grid, self.system.full_field(self.k, self.psi_support))


def solve_lippmann_schwinger(scatterer: SampledField, k, **kwargs) -> ForwardSolution:
    """Solve for psi+(., k) with E = |k|^2 on the scatterer's grid."""
    k = np.asarray(k, float)
    system = LippmannSchwinger(scatterer, float(k @ k), **kwargs)
    psi, res = system.solve_support(k)
    return ForwardSolution(k, psi[0], float(res[0]), system)


def scattering_amplitude(solution: ForwardSolution, scatterer: SampledField, l) -> complex:
    """f(k, l) = (2 pi)^-d integral exp(-i l.x) v(x) psi+(x, k) dx."""
    if scatterer.grid != solution.system.grid:
        raise FieldError("scatterer and solution live on different grids")
    if not np.array_equal(scatterer.values, solution.system.scatterer.values):
        raise FieldError("solution was computed for a different scatterer")
    return complex(solution.system.amplitudes(solution.psi_support, l)[0])


def born_amplitude(potential, k, l) -> complex:
    """First Born term v_hat(k - l)."""
    field = potential.field if isinstance(potential, Potential) else potential
    p = np.asarray(k, float) - np.asarray(l, float)
    return complex(fourier_transform(field, p[None, :]).values[0])


def scene_grid(potential: Potential, family: Optional[BackgroundFamily],
               margin: float = 0.25) -> GridSpec:
    """Smallest node-aligned square grid holding v and every background member."""
    g = potential.field.grid
    h, d = g.spacing, g.dim
    lo = -np.full(d, potential.domain_radius)
    hi = np.full(d, potential.domain_radius)
    if family is not None:
        for mem in family.members:
            t = np.asarray(mem.translate)
            lo = np.minimum(lo, t - mem.omega_radius)
            hi = np.maximum(hi, t + mem.omega_radius)
    center = np.round((lo + hi) / 2.0 / h) * h
    half = np.max(np.maximum(hi - center, center - lo)) + margin
    points = int(2 * math.ceil(half / h))
    return GridSpec(d, points * h / 2.0, points, tuple(center))


def scene_scatterers(potential: Potential, family: Optional[BackgroundFamily],
                     grid: Optional[GridSpec] = None) -> list:
    """[v, v + w_1, ..., v + w_m] embedded on a common grid."""
    grid = grid or scene_grid(potential, family)
    v = potential.field.embed(grid)
    out = [v]
    if family is not None:
        out += [SampledField(grid, v.values + mem.field.embed(grid).values)
                for mem in family.members]
    return out


@dataclass(eq=False)
class PhaselessDataset:
    """Intensities |f_j(k_E(p), l_E(p))|^2 for j = 0..m, each energy and p.

    ``intensities`` has shape (m + 1, n_energies, n_p). ``phased`` optionally
    keeps the complex amplitudes of j = 0 for the phased baseline.
    """

    energies: np.ndarray
    p_grid: np.ndarray
    intensities: np.ndarray
    mode: str
    family_manifest: dict = dc_field(default_factory=dict)
    noise: float = 0.0
    seed: int = 0
    perturbation: float = 0.0
    phased: Optional[np.ndarray] = None
    solver: dict = dc_field(default_factory=dict)
    _lookup: dict = dc_field(default=None, repr=False)

    def __post_init__(self):
        self.energies = np.asarray(self.energies, float)
        self.p_grid = np.atleast_2d(np.asarray(self.p_grid, float))
        self.intensities = np.asarray(self.intensities, float)
        shape = (self.intensities.shape[0], len(self.energies), len(self.p_grid))
        if self.intensities.shape != shape:
            raise ValueError(f"intensity table has shape {self.intensities.shape}, "
                             f"expected {shape}")
        if np.any(~np.isfinite(self.intensities)):
            raise ValueError("intensity table has holes")
        if np.any(self.intensities < 0):
            raise ValueError("negative intensity")

    @property
    def m(self) -> int:
        return self.intensities.shape[0] - 1

    def _key(self, p):
        return tuple(np.round(np.asarray(p, float), 10) + 0.0)

    def p_index(self, p) -> np.ndarray:
        """Row indices of the points ``p`` (n, d) in the grid; KeyError if missing."""
        if self._lookup is None:
            self._lookup = {self._key(q): i for i, q in enumerate(self.p_grid)}
        p = np.atleast_2d(np.asarray(p, float))
        missing = [tuple(q) for q in p if self._key(q) not in self._lookup]
        if missing:
            raise KeyError(missing)
        return np.array([self._lookup[self._key(q)] for q in p], dtype=int)

    def energy_index(self, energy: float) -> int:
        hits = np.flatnonzero(np.isclose(self.energies, energy, rtol=1e-12, atol=0))
        if not len(hits):
            raise KeyError(f"energy {energy} not in dataset")
        return int(hits[0])

    def intensity(self, j: int, energy: float, p) -> np.ndarray:
        return self.intensities[j, self.energy_index(energy), self.p_index(p)]

    def records(self):
        """Iterate (j, E, p, |f_j|^2) over the full index set."""
        for j in range(self.m + 1):
            for ie, e in enumerate(self.energies):
                for ip, p in enumerate(self.p_grid):
                    yield j, float(e), p, float(self.intensities[j, ie, ip])

    def manifest(self) -> dict:
        return {
            "family": self.family_manifest,
            "energies": self.energies.tolist(),
            "n_points": len(self.p_grid),
            "dim": int(self.p_grid.shape[1]),
            "mode": self.mode,
            "seed": self.seed,
            "noise": self.noise,
            "perturbation": self.perturbation,
            "solver": self.solver,
            "has_phased": self.phased is not None,
        }

    def checksum(self) -> str:
        """sha256 over the array contents (the npz container carries timestamps)."""
        parts = [self.energies, self.p_grid, self.intensities]
        if self.phased is not None:
            parts.append(self.phased)
        return checksum(b"".join(np.ascontiguousarray(a).tobytes() for a in parts))

    def save(self, directory) -> str:
        """Write ``dataset.npz`` and ``dataset.json``; return the content checksum."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        arrays = {"energies": self.energies, "p_grid": self.p_grid,
                  "intensities": self.intensities}
        if self.phased is not None:
            arrays["phased"] = self.phased
        with open(directory / "dataset.npz", "wb") as fh:
            np.savez(fh, **arrays)
        digest = self.checksum()
        manifest = dict(self.manifest(), checksum=digest)
        (directory / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return digest

    @classmethod
    def load(cls, directory) -> "PhaselessDataset":
        directory = Path(directory)
        meta = json.loads((directory / "dataset.json").read_text())
        with np.load(directory / "dataset.npz") as data:
            phased = data["phased"] if "phased" in data else None
            return cls(data["energies"], data["p_grid"], data["intensities"], meta["mode"],
                       meta.get("family", {}), meta.get("noise", 0.0), meta.get("seed", 0),
                       meta.get("perturbation", 0.0), phased, meta.get("solver", {}))


def born_perturbation(p: np.ndarray, energy: float, scale: float, seed: int, j: int) -> np.ndarray:
    """delta(p, E) with |delta| = C E^-1/2 (1 + |p|)^-1 and seeded random phase."""
    if scale == 0:
        return np.zeros(len(p), dtype=complex)
    rng = np.random.default_rng([seed, j, int(round(energy * 1e6))])
    phase = rng.uniform(0.0, 2.0 * np.pi, len(p))
    mag = scale / math.sqrt(energy) / (1.0 + np.linalg.norm(p, axis=1))
    return mag * np.exp(1j * phase)


def _solver_amplitudes(scatterer: SampledField, energy: float, p: np.ndarray,
                       batch: int = 256, **solver_kw):
    geom = ProbeGeometry(energy, scatterer.dim)
    k, l = probe_vectors(geom, p)
    system = LippmannSchwinger(scatterer, energy, **solver_kw)
    out = np.empty(len(p), dtype=complex)
    worst = 0.0
    for start in range(0, len(p), batch):
        sl = slice(start, start + batch)
        psi, res = system.solve_support(k[sl])
        worst = max(worst, float(res.max(initial=0.0)))
        phase = np.exp(-1j * l[sl] @ system.support_coords.T)
        out[sl] = np.sum(phase * (system.contrast * psi), axis=1) / (2.0 * np.pi) ** scatterer.dim
    return out, worst


def generate_dataset(potential: Potential, family: Optional[BackgroundFamily], energies,
                     p_grid, mode: str = "born-synthetic", noise: float = 0.0,
                     perturbation: float = 0.0, seed: int = 0, threads: int = 1,
                     keep_phased: bool = True, solver_options: Optional[dict] = None
                     ) -> PhaselessDataset:
    """Phaseless data S = {|f|^2, |f_1|^2, ..., |f_m|^2} at every (E, p).

    ``mode='solver'`` runs the Lippmann-Schwinger solver on v + w_j;
    ``mode='born-synthetic'`` uses |v_hat_j(p) + delta_j(p, E)|^2 with
    ``|delta| = perturbation * E^-1/2 (1 + |p|)^-1``. Multiplicative Gaussian
    noise of relative size ``noise`` is applied last.
    """
    energies = np.atleast_1d(np.asarray(energies, float))
    p_grid = np.atleast_2d(np.asarray(p_grid, float))
    if mode not in ("solver", "born-synthetic"):
        raise ValueError(f"unknown dataset mode {mode!r}")
    pmax = np.linalg.norm(p_grid, axis=1).max(initial=0.0)
    for e in energies:
        if pmax > 2.0 * math.sqrt(e) * (1 + 1e-12):
            raise ProbeError(f"p grid reaches |p| = {pmax:.4g} > 2 sqrt({e:g})")
    m = family.m if family is not None else 0
    table = np.zeros((m + 1, len(energies), len(p_grid)))
    phased = np.zeros((len(energies), len(p_grid)), dtype=complex)
    solver_kw = dict(solver_options or {})
    failures = []
    info = {}

    if mode == "born-synthetic":
        vhat = potential.fourier(p_grid)
        what = family.transforms(p_grid) if family is not None else np.zeros((0, len(p_grid)))
        for ie, e in enumerate(energies):
            for j in range(m + 1):
                f = vhat + (what[j - 1] if j else 0.0)
                f = f + born_perturbation(p_grid, e, perturbation, seed, j)
                table[j, ie] = np.abs(f) ** 2
                if j == 0:
                    phased[ie] = f
    else:
        scenes = scene_scatterers(potential, family)
        info = {"grid_points": scenes[0].grid.points, "spacing": scenes[0].grid.spacing,
                "kernel": solver_kw.get("kernel", "truncated"), "tol": solver_kw.get("tol", 1e-8)}
        jobs = [(j, ie) for ie in range(len(energies)) for j in range(m + 1)]

        def run(job):
            j, ie = job
            try:
                return job, _solver_amplitudes(scenes[j], energies[ie], p_grid, **solver_kw), None
            except (SolverError, FieldError) as exc:
                return job, None, exc

        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            results = list(pool.map(run, jobs))
        worst = 0.0
        for (j, ie), res, exc in results:
            if exc is not None:
                failures.extend((j, float(energies[ie]), tuple(p)) for p in p_grid)
                table[j, ie] = np.nan
                logger.error("solver failed for j=%d E=%g: %s", j, energies[ie], exc)
                continue
            f, resid = res
            worst = max(worst, resid)
            table[j, ie] = np.abs(f) ** 2
            if j == 0:
                phased[ie] = f
        info["max_residual"] = worst

    if noise:
        rng = np.random.default_rng([seed, 7919])
        table = table * (1.0 + noise * rng.standard_normal(table.shape))
        table = np.clip(table, 0.0, None)

    manifest = family.manifest() if family is not None else {}
    if failures:
        raise DatasetError(f"{len(failures)} records failed", failures, None)
    return PhaselessDataset(energies, p_grid, table, mode, manifest, noise, seed, perturbation,
                            phased if keep_phased else None, info)
