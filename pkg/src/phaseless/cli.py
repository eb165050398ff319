"""Command-line entry point: ``phaseless {simulate,reconstruct,sweep,fit,budget}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from .budget import DivergentTailError, error_budget
from .fields import FieldError
from .forward import DatasetError, PhaselessDataset, ProbeError, generate_dataset
from .harness import (ExperimentConfig, InsufficientDataError, build_scene, emit_outputs,
                      fit_rate, read_csv, run_sweep)
from .lippmann import SolverError
from .recon import (ConfigError, CoverageError, NearSingularError, plan_reconstruction,
                    reconstruct)
from .scatterers import GeometryError, ParameterError

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL, EXIT_NUMERIC = 0, 2, 3, 4

logger = logging.getLogger("phaseless")


def _config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    return ExperimentConfig.load(args.config).with_overrides(seed=args.seed)


def _out(args, config=None) -> Path:
    if args.out:
        return Path(args.out)
    if config is not None and config.raw.get("out"):
        return Path(config.raw["out"])
    return Path("phaseless-out")


def cmd_simulate(args) -> int:
    config = _config(args)
    out = _out(args, config)
    scene = build_scene(config)
    R = float(config.raw["potential"]["domain_radius"])
    ds = config.raw["dataset"]
    for energy in config.energies:
        plan = plan_reconstruction(scene.recon, scene.family, energy, R)
        data = generate_dataset(scene.potential, scene.family, [energy], plan.required,
                                ds["mode"], ds["noise"], ds["perturbation"], config.seed,
                                args.threads, True, {"kernel": ds["kernel"], "tol": ds["tol"]})
        digest = data.save(out / "datasets" / f"E_{energy:g}")
        print(f"E={energy:g} points={len(plan.required)} checksum={digest}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    config = _config(args)
    out = _out(args, config)
    scene = build_scene(config)
    data = PhaselessDataset.load(args.dataset)
    energy = args.energy if args.energy is not None else float(data.energies[0])
    R = float(config.raw["potential"]["domain_radius"])
    result = reconstruct(data, scene.family, scene.recon, scene.x_points, energy,
                         truth=scene.potential, domain_radius=R)
    out.mkdir(parents=True, exist_ok=True)
    stem = out / f"recon_E_{energy:g}"
    np.ascontiguousarray(result.u_values, dtype="<c16").tofile(f"{stem}.bin")
    np.ascontiguousarray(result.x_points, dtype="<f8").tofile(f"{stem}.x.bin")
    manifest = dict(result.manifest(), dataset_checksum=data.checksum(),
                    n_points=len(result.x_points))
    Path(f"{stem}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(json.dumps(manifest, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _config(args)
    out = _out(args, config)
    sweep = run_sweep(config, out, threads=args.threads, resume=not args.fresh)
    try:
        fit = fit_rate(sweep.rows, skip_smallest=config.raw["fit"]["skip_smallest"])
    except InsufficientDataError as exc:
        logger.warning("no rate fit: %s", exc)
        fit = None
    manifest = emit_outputs(sweep, fit, out)
    print(json.dumps({"fit": manifest["fit"], "alpha": manifest["alpha_theoretical"],
                      "partial": manifest["partial"]}, sort_keys=True))
    return EXIT_PARTIAL if sweep.partial else EXIT_OK


def cmd_fit(args) -> int:
    rows = read_csv(args.csv)
    fit = fit_rate(rows, skip_smallest=args.skip_smallest)
    print(json.dumps({"slope": fit.slope, "intercept": fit.intercept, "r2": fit.r2,
                      "e_range": list(fit.e_range), "n_rows": fit.n_rows}, sort_keys=True))
    return EXIT_OK


def cmd_budget(args) -> int:
    config = _config(args)
    scene = build_scene(config)
    if scene.family is None:
        raise ConfigError("the error budget needs a background family")
    budget = error_budget(scene.potential.budget, scene.family, scene.recon,
                          born_gap=args.born_gap)
    print(json.dumps(budget.as_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--seed", type=int, default=None, help="overrides dataset.seed")

    parser = argparse.ArgumentParser(prog="phaseless",
                                     description="Phaseless inverse scattering experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="generate phaseless datasets")
    p = sub.add_parser("reconstruct", parents=[common], help="dataset -> u(x, E)")
    p.add_argument("--dataset", required=True, help="directory written by simulate")
    p.add_argument("--energy", type=float, default=None)
    p = sub.add_parser("sweep", parents=[common], help="full pipeline over the energy list")
    p.add_argument("--fresh", action="store_true", help="ignore rows from earlier runs")
    p = sub.add_parser("fit", parents=[common], help="fit a decay rate to sweep.csv")
    p.add_argument("csv")
    p.add_argument("--skip-smallest", type=int, default=0)
    p = sub.add_parser("budget", parents=[common], help="print error-budget constants")
    p.add_argument("--born-gap", type=float, default=None,
                   help="empirical stand-in for the forward Born-gap constants")
    return parser


COMMANDS = {"simulate": cmd_simulate, "reconstruct": cmd_reconstruct, "sweep": cmd_sweep,
            "fit": cmd_fit, "budget": cmd_budget}


def main(argv=None) -> int:
    level = os.environ.get("PHASELESS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ParameterError, GeometryError, jsonschema.ValidationError,
            FileNotFoundError, InsufficientDataError, CoverageError, ProbeError,
            DivergentTailError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    except (SolverError, NearSingularError, FieldError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
