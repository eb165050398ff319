"""Experiment orchestration: configs, energy sweeps, rate fits and outputs."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path
from typing import Optional, Sequence

import jsonschema
import numpy as np
from scipy import stats

from .budget import error_budget
from .fields import GridSpec
from .forward import generate_dataset
from .recon import (FAMILY_FOR, ConfigError, ReconConfig, alpha, domain_points,
                    plan_reconstruction, reconstruct)
from .scatterers import build_background, build_bump, build_potential, make_family

logger = logging.getLogger(__name__)

CSV_HEADER = ("E", "sup_error", "r_E", "eps_E", "nodes_outside", "nodes_inside",
              "born_gap_const")

DEFAULTS = {
    "dim": 2,
    "potential": {"profile": "bump", "amplitude": 1.0, "domain_radius": 1.0, "n": 3},
    "family": {"mode": "iw-pair", "nu": 1.0, "r": 1.0, "translate": [6.0, 0.0],
               "y": [2.0, 1.0], "s": 2.0},
    "theorem": "T1",
    "tau": 1.0,
    "energies": [16.0, 32.0, 64.0, 128.0, 256.0],
    "grid": {"spacing": 0.0625},
    "dataset": {"mode": "solver", "perturbation": 0.0, "noise": 0.0, "seed": 0,
                "kernel": "truncated", "tol": 1e-8},
    "quadrature": {"radial_nodes": None, "angular_nodes": None, "sphere_nodes": 32},
    "fit": {"skip_smallest": 1},
}

_num = {"type": "number"}
_vec = {"type": "array", "items": _num, "minItems": 2, "maxItems": 3}
_opt_int = {"type": ["integer", "null"], "minimum": 1}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "dim": {"enum": [2, 3]},
        "potential": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "profile": {"enum": ["bump", "autocorrelation", "asymmetric", "zero"]},
                "amplitude": _num,
                "domain_radius": {"type": "number", "exclusiveMinimum": 0},
                "n": {"type": "integer", "minimum": 1},
            },
        },
        "family": {
            "type": ["object", "null"], "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["iw-pair", "translate-pair", "lattice"]},
                "nu": {"type": "number", "exclusiveMinimum": 0},
                "r": {"type": "number", "exclusiveMinimum": 0},
                "translate": _vec, "y": _vec,
                "s": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "theorem": {"enum": ["phased-baseline", "T1", "T2", "T3"]},
        "tau": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "energies": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                     "minItems": 1},
        "grid": {"type": "object", "additionalProperties": False,
                 "properties": {"spacing": {"type": "number", "exclusiveMinimum": 0}}},
        "dataset": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["solver", "born-synthetic"]},
                "perturbation": {"type": "number", "minimum": 0},
                "noise": {"type": "number", "minimum": 0},
                "seed": {"type": "integer", "minimum": 0},
                "kernel": {"enum": ["truncated", "corrected"]},
                "tol": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "quadrature": {
            "type": "object", "additionalProperties": False,
            "properties": {"radial_nodes": _opt_int, "angular_nodes": _opt_int,
                           "sphere_nodes": {"type": "integer", "minimum": 4}},
        },
        "fit": {"type": "object", "additionalProperties": False,
                "properties": {"skip_smallest": {"type": "integer", "minimum": 0}}},
        "out": {"type": "string"},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _on_grid(vec, h) -> bool:
    q = np.asarray(vec, float) / h
    return bool(np.all(np.abs(q - np.rint(q)) < 1e-9))


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description; ``raw`` is the merged JSON document."""

    raw: dict

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        try:
            jsonschema.validate(doc, SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ConfigError(f"config: {exc.message}") from None
        raw = _merge(DEFAULTS, doc)
        if "family" in doc and doc["family"] is None:
            raw["family"] = None
        cfg = cls(raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(doc)

    def validate(self):
        raw = self.raw
        en = raw["energies"]
        if any(b <= a for a, b in zip(en, en[1:])):
            raise ConfigError("energies must be strictly increasing")
        theorem, fam = raw["theorem"], raw["family"]
        if theorem in FAMILY_FOR:
            if fam is None or fam["mode"] != FAMILY_FOR[theorem]:
                raise ConfigError(f"{theorem} requires a {FAMILY_FOR[theorem]} family")
        if raw["potential"]["n"] <= raw["dim"]:
            raise ConfigError("n must exceed the dimension")
        h = self.spacing
        if fam is not None:
            d = raw["dim"]
            for key in ("translate", "y"):
                if len(fam[key]) != d:
                    raise ConfigError(f"family.{key} must have {d} components")
            if not _on_grid(fam["translate"], h):
                raise ConfigError("family.translate must be a multiple of the grid spacing")
            if fam["mode"] == "translate-pair" and not _on_grid(fam["y"], h):
                raise ConfigError("family.y must be a multiple of the grid spacing")
            if fam["mode"] == "lattice" and not _on_grid([fam["s"]], h):
                raise ConfigError("family.s must be a multiple of the grid spacing")

    @property
    def spacing(self) -> float:
        return float(self.raw["grid"]["spacing"])

    @property
    def energies(self) -> list:
        return [float(e) for e in self.raw["energies"]]

    @property
    def seed(self) -> int:
        return int(self.raw["dataset"]["seed"])

    def with_overrides(self, seed=None, out=None) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        if seed is not None:
            raw["dataset"]["seed"] = int(seed)
        if out is not None:
            raw["out"] = str(out)
        return ExperimentConfig(raw)

    def canonical(self) -> str:
        """Canonical JSON of the experiment, excluding where outputs go."""
        doc = {k: v for k, v in self.raw.items() if k != "out"}
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def recon_config(self, beta: float) -> ReconConfig:
        q = self.raw["quadrature"]
        return ReconConfig(self.raw["theorem"], int(self.raw["potential"]["n"]),
                           float(self.raw["tau"]), beta, int(self.raw["dim"]),
                           q["radial_nodes"], q["angular_nodes"], int(q["sphere_nodes"]))


@dataclass
class Scene:
    potential: object
    family: object
    recon: ReconConfig
    x_points: np.ndarray


def build_scene(config: ExperimentConfig) -> Scene:
    """Potential, background family and reconstruction settings from a config."""
    raw, h, d = config.raw, config.spacing, int(config.raw["dim"])
    pot_spec = raw["potential"]
    R = float(pot_spec["domain_radius"])
    pts = 2 * int(math.ceil((R + 4 * h) / h))
    grid = GridSpec(d, pts * h / 2.0, pts)
    potential = build_potential(grid, R, pot_spec["profile"], pot_spec["amplitude"],
                                int(pot_spec["n"]))
    family, beta = None, 0.0
    fam = raw["family"]
    if fam is not None and raw["theorem"] != "phased-baseline":
        r = float(fam["r"])
        qpts = 2 * int(math.ceil((2 * r + 2 * h) / h))
        qgrid = GridSpec(d, qpts * h / 2.0, qpts)
        base = build_background(build_bump(qgrid, r), float(fam["nu"]), r)
        family = make_family(base, fam["mode"], R, fam["translate"], fam["y"], fam["s"])
        beta = family.beta
    return Scene(potential, family, config.recon_config(beta), domain_points(grid, R))


@dataclass
class SweepResult:
    rows: list
    config: ExperimentConfig
    missing: list = dc_field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.missing)


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float
    e_range: tuple
    n_rows: int


class InsufficientDataError(ValueError):
    pass


def run_row(config: ExperimentConfig, scene: Scene, energy: float, out_dir: Optional[Path],
            threads: int = 1) -> dict:
    """Plan, simulate and reconstruct at one energy."""
    ds_spec = config.raw["dataset"]
    R = float(config.raw["potential"]["domain_radius"])
    plan = plan_reconstruction(scene.recon, scene.family, energy, R)
    solver_opts = {"kernel": ds_spec["kernel"], "tol": ds_spec["tol"]}
    data = generate_dataset(scene.potential, scene.family, [energy], plan.required,
                            ds_spec["mode"], ds_spec["noise"], ds_spec["perturbation"],
                            config.seed, threads, True, solver_opts)
    digest = data.checksum()
    if out_dir is not None:
        data.save(out_dir / "datasets" / f"E_{energy:g}")
    result = reconstruct(data, scene.family, scene.recon, scene.x_points, energy,
                         truth=scene.potential, domain_radius=R, plan=plan)
    vhat = scene.potential.fourier(plan.required)
    gap = float(np.max(np.abs(data.phased[0] - vhat), initial=0.0) * math.sqrt(energy))
    return {
        "E": energy,
        "sup_error": result.sup_error,
        "r_E": result.radius,
        "eps_E": result.epsilon,
        "nodes_outside": result.nodes_outside,
        "nodes_inside": result.nodes_inside,
        "born_gap_const": gap,
        "dataset_checksum": digest,
        "zeta_floor_violations": result.floor_violations,
        "clamped_points": result.clamped,
    }


def _read_rows(path: Path, digest: str) -> dict:
    done = {}
    if not path.exists():
        return done
    for line in path.read_text().splitlines():
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            continue  # torn write from an interrupted run
        if rec.get("config") == digest and "row" in rec:
            done[float(rec["row"]["E"])] = rec["row"]
    return done


def run_sweep(config: ExperimentConfig, out_dir=None, threads: int = 1,
              resume: bool = True) -> SweepResult:
    """One row per energy; rows are appended to ``rows.jsonl`` as they finish.

    Rows already present for the same config digest are reused, so an
    interrupted sweep picks up where it stopped.
    """
    out = Path(out_dir or config.raw.get("out") or "phaseless-out")
    out.mkdir(parents=True, exist_ok=True)
    digest = config.digest()
    rows_path = out / "rows.jsonl"
    done = _read_rows(rows_path, digest) if resume else {}
    todo = [e for e in config.energies if e not in done]
    scene = build_scene(config) if todo else None
    lock = threading.Lock()
    failed = []

    def work(energy):
        try:
            row = run_row(config, scene, energy, out)
        except Exception as exc:  # recorded per row; the sweep continues
            logger.error("row E=%g failed: %s", energy, exc)
            with lock:
                failed.append((energy, f"{type(exc).__name__}: {exc}"))
            return
        with lock, open(rows_path, "a") as fh:
            fh.write(json.dumps({"config": digest, "row": row}, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
            done[energy] = row

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        list(pool.map(work, todo))
    rows = [done[e] for e in config.energies if e in done]
    missing = [e for e in config.energies if e not in done]
    if failed:
        logger.warning("%d rows failed: %s", len(failed), failed)
    return SweepResult(rows, config, missing)


def fit_rate(rows: Sequence[dict], skip_smallest: int = 0,
             window: Optional[tuple] = None) -> RateFit:
    """Least-squares line through (log E, log sup_error)."""
    rows = sorted(rows, key=lambda r: r["E"])[skip_smallest:]
    if window is not None:
        rows = [r for r in rows if window[0] <= r["E"] <= window[1]]
    zero = [r["E"] for r in rows if not r["sup_error"] > 0]
    if zero:
        logger.warning("excluding rows with zero sup_error at E = %s", zero)
    rows = [r for r in rows if r["sup_error"] > 0]
    if len(rows) < 3:
        raise InsufficientDataError(f"need at least 3 usable rows, have {len(rows)}")
    x = np.log([r["E"] for r in rows])
    y = np.log([r["sup_error"] for r in rows])
    reg = stats.linregress(x, y)
    r2 = min(1.0, max(0.0, float(reg.rvalue) ** 2))
    return RateFit(float(reg.slope), float(reg.intercept), r2,
                   (rows[0]["E"], rows[-1]["E"]), len(rows))


def _fmt(val) -> str:
    if val is None:
        return ""
    if isinstance(val, (int, np.integer)):
        return str(int(val))
    return repr(float(val))


def write_csv(rows, path: Path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in sorted(rows, key=lambda r: r["E"]):
            writer.writerow([_fmt(row[k]) for k in CSV_HEADER])


def read_csv(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append({k: (float(v) if v != "" else None) for k, v in rec.items()})
    return rows


def render_svg(rows, fit: Optional[RateFit], reference_slope: float,
               width: int = 480, height: int = 360) -> str:
    """Log-log plot of sup_error against E with the fitted and reference lines."""
    pts = [(math.log10(r["E"]), math.log10(r["sup_error"]))
           for r in rows if r["sup_error"] and r["sup_error"] > 0]
    pad = 48
    if pts:
        xs, ys = zip(*pts)
    else:
        xs, ys = (0.0, 1.0), (0.0, 1.0)
    x0, x1 = min(xs) - 0.1, max(xs) + 0.1
    y0, y1 = min(ys) - 0.3, max(ys) + 0.3

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" '
           'stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
           f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle" '
           'font-size="12">log10 E</text>',
           f'<text x="14" y="{height / 2:.1f}" font-size="12" transform="rotate(-90 14 '
           f'{height / 2:.1f})" text-anchor="middle">log10 sup error</text>']
    for x, y in pts:
        out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="black"/>')
    if pts:
        # reference line of slope -alpha through the first point
        xa, ya = pts[0]
        yb = ya + reference_slope * (x1 - 0.1 - xa)
        out.append(f'<line class="reference" data-reference-slope="{reference_slope!r}" '
                   f'x1="{sx(xa):.2f}" y1="{sy(ya):.2f}" x2="{sx(x1 - 0.1):.2f}" '
                   f'y2="{sy(yb):.2f}" stroke="gray" stroke-dasharray="4 3"/>')
    if fit is not None:
        # natural-log fit drawn in base-10 coordinates
        fa, fb = x0 + 0.1, x1 - 0.1
        ya = (fit.intercept + fit.slope * fa * math.log(10)) / math.log(10)
        yb = (fit.intercept + fit.slope * fb * math.log(10)) / math.log(10)
        out.append(f'<line class="fit" data-fitted-slope="{fit.slope!r}" x1="{sx(fa):.2f}" '
                   f'y1="{sy(ya):.2f}" x2="{sx(fb):.2f}" y2="{sy(yb):.2f}" stroke="blue"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def theoretical_alpha(config: ExperimentConfig, beta: float) -> float:
    raw = config.raw
    return float(alpha(raw["theorem"], int(raw["potential"]["n"]), int(raw["dim"]), beta))


def emit_outputs(sweep: SweepResult, fit: Optional[RateFit], out_dir) -> dict:
    """Write sweep.csv, manifest.json and sweep.svg; return the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = sweep.config
    scene = build_scene(config)
    beta = scene.family.beta if scene.family is not None else 0.0
    a = theoretical_alpha(config, beta)
    write_csv(sweep.rows, out / "sweep.csv")
    (out / "sweep.svg").write_text(render_svg(sweep.rows, fit, -a))
    budget = None
    if scene.family is not None and sweep.rows:
        gap = max(r["born_gap_const"] for r in sweep.rows)
        budget = error_budget(scene.potential.budget, scene.family, scene.recon,
                              born_gap=gap).as_dict()
    manifest = {
        "config": {k: v for k, v in config.raw.items() if k != "out"},
        "config_hash": config.digest(),
        "theorem": config.raw["theorem"],
        "alpha_theoretical": a,
        "reference_slope": -a,
        "fit": asdict(fit) if fit is not None else None,
        "partial": sweep.partial,
        "missing_energies": sweep.missing,
        "dataset_checksums": {_fmt(r["E"]): r["dataset_checksum"] for r in sweep.rows},
        "zeta_floor_violations": sum(r["zeta_floor_violations"] for r in sweep.rows),
        "clamped_points": sum(r["clamped_points"] for r in sweep.rows),
        "error_budget": budget,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
