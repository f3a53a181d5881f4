"""Command-line entry point: trace, sweep, stability, simulate, validate, ift-certify."""
import argparse
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields

import numpy as np
import pandas as pd
import scipy.fft as sp_fft

from continuation import (
    ContinuationSettings,
    FoldRecord,
    certify_point,
    match_branch_roots,
    newton_corrector,
    scalar_system,
    solve_scalar_all,
    starting_point,
    trace_branch,
)
from database import (
    DEFAULT_CONFIG,
    DEFAULT_CONFIG_FILE,
    initialize_config,
    load_run_config,
    prepare_out_dir,
    write_csv,
    write_error,
    write_json,
)
from errors import ToolkitError
from meanfield import build_system, fixed_point_record, frozen_srb
from model import build_model, perturbative_density
from particle import ParticleSettings, init_ensemble, run
from stability import StabilitySettings, classify
from transfer import Density
from utils import format_complex, resolve_threads, setup_logging, to_jsonable
from validation import results_frame, run_suites

logger = logging.getLogger(__name__)


def _settings(cls, section, **extra):
    names = {f.name for f in fields(cls)}
    return cls(**{key: value for key, value in section.items() if key in names}, **extra)


def build_run_system(config):
    model = build_model(config.model)
    disc = config.section("discretization")
    return build_system(model, disc["K"], disc["oversample"], disc["mollifier_fraction"], **config.section("solver"))


def stability_settings(config, threads=1):
    return _settings(StabilitySettings, config.section("stability"), workers=threads)


def classified_roots(system, nu, config, threads=1, scan_points=4096, strict=None):
    """Every fixed point at ν with its stability report"""
    settings = stability_settings(config, threads)
    strict = config.section("stability")["strict"] if strict is None else strict
    entries = []
    for omega in solve_scalar_all(system, nu, scan_points):
        record = fixed_point_record(system, nu, omega)
        entries.append((record, classify(system, record, settings, strict=strict)))
    return entries


def cmd_trace(config, threads=1):
    system = build_run_system(config)
    section = config.section("continuation")
    nu_max = section["nu_max"] if section["nu_max"] is not None else system.model.nu_max
    settings = _settings(ContinuationSettings, section)

    classifier = None
    if section["classify"]:
        every = max(1, int(section["classify_every"]))
        counter = itertools.count()
        stab = stability_settings(config, threads)

        def classifier(system_, record):
            if next(counter) % every:
                return None
            return classify(system_, record, stab)

    branch = trace_branch(system, (section["nu_min"], nu_max), starting_point(system, section["nu_min"]), settings, classifier)

    counts = {}
    for nu in section["oracle_nus"]:
        entries = classified_roots(system, nu, config, threads, section["scan_points"], strict=False)
        roots = [record.omega for record, _ in entries]
        _, unmatched = match_branch_roots(system, branch, nu, roots)
        physical = sum(report.classification == "physical" for _, report in entries)
        counts[f"{nu:g}"] = {"solutions": len(roots), "physical": physical}
        branch.unmatched_roots.extend([nu, w] for w in unmatched)

    meta = config.meta()
    write_csv(branch.to_frame(), os.path.join(config.out_dir, "branch.csv"), meta)
    fold_columns = [f.name for f in fields(FoldRecord)]
    folds = pd.DataFrame([fold.to_dict() for fold in branch.folds], columns=fold_columns)
    write_csv(folds, os.path.join(config.out_dir, "folds.csv"), meta)
    write_json(branch.summary(counts), os.path.join(config.out_dir, "branch.json"), meta)
    logger.info(f"Branch has {len(branch.points)} points and {len(branch.folds)} folds")
    return 0


def cmd_sweep(config, threads=1):
    system = build_run_system(config)
    section = config.section("sweep")
    nus = np.linspace(section["nu_min"], section["nu_max"], section["points"])

    def cell(nu):
        if section["classify"]:
            return classified_roots(system, nu, config, 1, section["scan_points"], strict=False)
        return [(fixed_point_record(system, nu, w), None) for w in solve_scalar_all(system, nu, section["scan_points"])]

    with ThreadPoolExecutor(max_workers=threads) as pool:
        cells = list(pool.map(cell, nus))

    rows, counts = [], []
    for nu, entries in zip(nus, cells):
        physical = 0
        for record, report in entries:
            row = record.to_row()
            row["classification"] = report.classification if report else ""
            row["leading_eig_re"] = report.leading_eig.real if report else float("nan")
            row["leading_eig_im"] = report.leading_eig.imag if report else float("nan")
            physical += bool(report and report.classification == "physical")
            rows.append(row)
        counts.append({"nu": float(nu), "solutions": len(entries), "physical": physical})

    meta = config.meta()
    write_csv(pd.DataFrame(rows), os.path.join(config.out_dir, "sweep.csv"), meta)
    write_json({"cells": counts}, os.path.join(config.out_dir, "sweep.json"), meta)
    return 0


def cmd_stability(config, threads=1):
    system = build_run_system(config)
    section = config.section("stability")
    reports, rows = [], []
    for nu in section["nus"]:
        for record, report in classified_roots(system, nu, config, threads, config.section("continuation")["scan_points"]):
            reports.append(report.to_dict())
            row = record.to_row()
            row.update(
                classification=report.classification,
                circle_sup=report.circle_sup,
                kappa=report.kappa,
                roots=len(report.secular_roots),
                leading_eig_re=report.leading_eig.real,
                leading_eig_im=report.leading_eig.imag,
            )
            rows.append(row)
            logger.info(
                f"nu={nu:g} omega={record.omega:.12g}: {report.classification}, "
                f"leading eigenvalue {format_complex(report.leading_eig)}"
            )
    meta = config.meta()
    write_csv(pd.DataFrame(rows), os.path.join(config.out_dir, "stability.csv"), meta)
    write_json({"reports": reports}, os.path.join(config.out_dir, "stability.json"), meta)
    return 0


def cmd_simulate(config, threads=1):
    system = build_run_system(config)
    model = system.model
    section = config.section("particle")
    nu = section["nu"]
    settings = _settings(ParticleSettings, section, workers=threads)

    stable = [
        record.omega
        for record, report in classified_roots(system, nu, config, threads, config.section("continuation")["scan_points"], strict=False)
        if report.classification == "physical"
    ]
    init = section["init"]
    if init == "basins" and not stable:
        logger.warning(f"No physical fixed point at nu={nu:g}; starting from the constant density")
        init = "constant"
    if init == "basins":
        starts = [(f"basin{i}", frozen_srb(system, nu, omega)) for i, omega in enumerate(stable)]
    elif init == "constant":
        starts = [("constant", Density.constant(system.basis))]
    else:
        starts = [("perturbative", perturbative_density(model, nu, 1.0, basis=system.basis))]

    meta = config.meta()
    summaries = {}
    for offset, (label, density) in enumerate(starts):
        ensemble = init_ensemble(density, section["N"], config.seed + offset, settings.chunk)
        result = run(ensemble, model, nu, section["steps"], stable, settings)
        frame = result.to_frame().iloc[:: max(1, section["record_every"])]
        write_csv(frame, os.path.join(config.out_dir, f"trajectory_{label}.csv"), meta)
        summaries[label] = result.summary()
    write_json({"nu": nu, "init": init, "stable_omegas": stable, "runs": summaries}, os.path.join(config.out_dir, "simulate.json"), meta)
    return 0


def cmd_validate(config, threads=1):
    results = run_suites(config)
    frame = results_frame(results)
    meta = config.meta()
    write_csv(frame, os.path.join(config.out_dir, "validation.csv"), meta)
    failed = [r.to_row() for r in results if not r.passed]
    write_json(
        {"checks": [r.to_row() for r in results], "failed": failed, "passed": not failed},
        os.path.join(config.out_dir, "validation.json"),
        meta,
    )
    return 1 if failed else 0


def cmd_ift_certify(config, threads=1):
    system = build_run_system(config)
    section = config.section("ift")
    nu = section["nu"]
    roots = solve_scalar_all(system, nu, config.section("continuation")["scan_points"])
    target = section["omega"] if section["omega"] is not None else roots[len(roots) // 2]
    omega = min(roots, key=lambda w: abs(w - target))

    cert = certify_point(system, nu, omega, section["delta"], section["samples"])
    lam = nu + 0.5 * min(cert.delta1, cert.delta)
    corrector = newton_corrector(scalar_system(system, lam), [omega], lam, cert)
    payload = {
        "nu": nu,
        "omega": omega,
        "certificate": cert.to_dict(),
        "corrector": {
            "lambda": lam,
            "omega": float(corrector.x[0]),
            "iterations": corrector.iterations,
            "contraction": corrector.contraction,
            "residual": corrector.residual,
        },
    }
    write_json(payload, os.path.join(config.out_dir, "certificate.json"), config.meta())
    return 0


COMMANDS = {
    "trace": cmd_trace,
    "sweep": cmd_sweep,
    "stability": cmd_stability,
    "simulate": cmd_simulate,
    "validate": cmd_validate,
    "ift-certify": cmd_ift_certify,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON run configuration merged over the defaults.")
    common.add_argument("--out", default=None, help="Output directory.")
    common.add_argument("--seed", type=int, default=None, help="Seed for the particle generator.")
    common.add_argument("--threads", type=int, default=None, help="Worker threads (also $MFBIF_THREADS).")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging.")
    common.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only.")

    parser = argparse.ArgumentParser(prog="mfbif", description="Invariant measures of mean-field coupled chaotic maps.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("trace", parents=[common], help="Continue the fixed-point branch over nu.")
    sub.add_parser("sweep", parents=[common], help="Count and classify fixed points on a nu grid.")
    sub.add_parser("stability", parents=[common], help="Stability reports at selected nu values.")
    sub.add_parser("simulate", parents=[common], help="Finite-N particle runs.")
    sub.add_parser("validate", parents=[common], help="Run the invariant suites.")
    sub.add_parser("ift-certify", parents=[common], help="Certified corrector at a branch point.")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging(logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO)
    out_dir = args.out or DEFAULT_CONFIG["out_dir"]
    meta = None
    try:
        initialize_config(DEFAULT_CONFIG_FILE)
    except OSError as e:
        logger.warning(f"Could not write {DEFAULT_CONFIG_FILE}: {e}")
    try:
        config = load_run_config(args.config, DEFAULT_CONFIG_FILE).with_overrides(out_dir=args.out, seed=args.seed)
        out_dir, meta = config.out_dir, config.meta()
        threads = resolve_threads(args.threads, config.threads)
        prepare_out_dir(out_dir)
        write_json({"config": config.data}, os.path.join(out_dir, "run_config.json"), config.meta())
        logger.info(f"Running {args.command} (config {config.config_hash}, {threads} thread(s))")
        with sp_fft.set_workers(threads):
            return COMMANDS[args.command](config, threads)
    except ToolkitError as e:
        os.makedirs(out_dir, exist_ok=True)
        write_error(e, out_dir, meta)
        print(json.dumps(to_jsonable(e.to_dict()), sort_keys=True), file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
