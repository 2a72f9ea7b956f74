"""Command-line front end.

Subcommands::

    fit       --data F --q INT --method M [--points K] [--seed S] [--out F]
    simulate  --scenario F [--seed S] [--replicates N] --out DIR
    study     --scenario F [--replicates N] [--methods LIST] --out F
    diagnose  --scenario F [--data F] [--grid N] --out F

Data files are comma separated with a header row of item names and integer
categories starting at 1. Scenario files are JSON objects (see
``ScenarioSpec.from_dict``). Exit codes: 0 success, 1 input error, 2 the fit
finished but is not valid.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .em import FitConfig, fit
from .integration import ApproximationMethod
from .model import ModelParams, OrdinalDataset
from .simulation import (
    DEFAULT_N_EQUIVALENT,
    ScenarioSpec,
    diagnose,
    format_report,
    generate,
    parse_method,
    posterior_density_grid,
    resolve_workers,
    run_study,
)

EXIT_OK, EXIT_INPUT, EXIT_INVALID = 0, 1, 2
METHODS = ("laplace", "fla", "gh", "agh-mode", "agh-mean")

log = logging.getLogger("ordinal_lvm")


class InputError(Exception):
    """Bad command-line input or malformed file; maps to exit code 1."""


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def read_data(path, categories=None) -> OrdinalDataset:
    """Parse a CSV response matrix; errors name the offending line."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if not header or any(h == "" for h in header):
            raise InputError(f"{path}, line 1: header must name every item")
        rows = []
        for row in reader:
            line = reader.line_num
            if not row or all(c.strip() == "" for c in row):
                continue
            if len(row) != len(header):
                raise InputError(f"{path}, line {line}: expected {len(header)} fields, found {len(row)}")
            try:
                values = [int(c.strip()) for c in row]
            except ValueError:
                raise InputError(f"{path}, line {line}: non-integer category") from None
            if min(values) < 1:
                raise InputError(f"{path}, line {line}: categories start at 1")
            if categories is not None and any(v > c for v, c in zip(values, categories)):
                raise InputError(f"{path}, line {line}: category above the declared maximum")
            rows.append(values)
    if not rows:
        raise InputError(f"{path}: no observations")
    try:
        return OrdinalDataset.from_responses(np.array(rows), categories, item_names=tuple(header))
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc


def write_data(path, dataset: OrdinalDataset) -> None:
    names = dataset.item_names or tuple(f"item{i + 1}" for i in range(dataset.p))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        writer.writerows(dataset.responses.tolist())


def load_scenario(path) -> ScenarioSpec:
    try:
        return ScenarioSpec.load(path)
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: invalid scenario ({exc})") from exc


def _num(v: float) -> str:
    return f"{v:.6f}"


def format_fit(result, dataset: OrdinalDataset, method: ApproximationMethod) -> str:
    params = result.params
    names = dataset.item_names or tuple(f"item{i + 1}" for i in range(params.p))
    lines = [
        f"method: {method.label()}",
        f"observations: {dataset.n}",
        f"items: {params.p}",
        f"factors: {params.q}",
        f"converged: {str(result.converged).lower()}",
        f"valid: {str(result.valid).lower()}",
        f"iterations: {result.iterations}",
        f"loglik: {_num(result.loglik)}",
    ]
    if result.diagnostic:
        lines.append(f"diagnostic: {result.diagnostic}")
    lines += ["", "item,parameter,estimate"]
    for name, item in zip(names, params.items):
        for s, t in enumerate(item.thresholds, start=1):
            lines.append(f"{name},tau_{s},{_num(t)}")
        for j, a in enumerate(item.loadings, start=1):
            lines.append(f"{name},alpha_{j},{_num(a)}")
    lines += ["", "iteration,loglik,max_change"]
    for k, (ll, ch) in enumerate(zip(result.loglik_trace, result.change_trace), start=1):
        lines.append(f"{k},{_num(ll)},{ch:.3e}")
    return "\n".join(lines) + "\n"


def _emit(text: str, out) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _fit_kwargs(args) -> dict:
    kw = {}
    for name in ("tol", "max_iter"):
        value = getattr(args, name, None)
        if value is not None:
            kw[name] = value
    return kw


def cmd_fit(args) -> int:
    categories = None if args.categories is None else _parse_int_list(args.categories, "--categories")
    dataset = read_data(args.data, categories)
    if args.q < 1 or args.q > dataset.p:
        raise InputError("--q must be between 1 and the number of items")
    method = ApproximationMethod(args.method, args.points)
    try:
        config = FitConfig(method=method, seed=args.seed, **_fit_kwargs(args))
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    result = fit(dataset, args.q, config)
    _emit(format_fit(result, dataset, method), args.out)
    return EXIT_OK if result.valid else EXIT_INVALID


def cmd_simulate(args) -> int:
    spec = load_scenario(args.scenario)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.replicates is not None:
        overrides["replicates"] = args.replicates
    spec = ScenarioSpec(**{**spec.__dict__, **overrides})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = tuple(f"item{i + 1}" for i in range(spec.params.p))
    for r in range(max(spec.replicates, 1)):
        ds = generate(spec, r)
        write_data(out / f"replicate_{r:04d}.csv", OrdinalDataset(ds.responses, ds.categories, names))
    (out / "scenario.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    return EXIT_OK


def cmd_study(args) -> int:
    spec = load_scenario(args.scenario)
    overrides = {}
    if args.replicates is not None:
        overrides["replicates"] = args.replicates
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.methods is not None:
        tags = [m.strip() for m in args.methods.split(",") if m.strip()]
        if not tags:
            raise InputError("--methods is empty")
        points = args.points if args.points is not None else 5
        try:
            overrides["methods"] = tuple(parse_method(m, points) for m in tags)
        except ValueError as exc:
            raise InputError(f"{exc}; choose from {', '.join(METHODS)}") from None
    spec = ScenarioSpec(**{**spec.__dict__, **overrides})
    reports = run_study(spec, workers=args.workers, **_fit_kwargs(args))
    text = f"scenario: {spec.name}\nn: {spec.n}\nreplicates: {spec.replicates}\nseed: {spec.seed}\n"
    text += "".join("\n" + format_report(r, thresholds=args.thresholds) + "\n" for r in reports.values())
    out = Path(args.out)
    out.write_text(text)
    machine = {"scenario": spec.to_dict(), "methods": [r.to_dict() for r in reports.values()]}
    out.with_suffix(".json").write_text(json.dumps(machine, indent=2) + "\n")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    spec = load_scenario(args.scenario)
    if args.data is not None:
        dataset = read_data(args.data, spec.params.categories)
        if dataset.p != spec.params.p:
            raise InputError("data and scenario disagree on the number of items")
    else:
        dataset = generate(spec, 0)
    diag = diagnose(spec.params, dataset, n_equivalent=args.n_equivalent, level=args.level)
    lines = ["observation,beta1,beta2,skew_flag,kurtosis_flag"]
    for k, (b1, b2, sf, kf) in enumerate(zip(diag.beta1, diag.beta2, diag.skew_flags, diag.kurtosis_flags), 1):
        lines.append(f"{k},{b1:.8f},{b2:.8f},{int(sf)},{int(kf)}")
    lines.append("")
    lines += [f"{key}: {value:.6f}" if isinstance(value, float) else f"{key}: {value}"
              for key, value in diag.summary().items()]
    Path(args.out).write_text("\n".join(lines) + "\n")
    if args.grid:
        _write_grid(args, spec.params, dataset)
    return EXIT_OK


def _write_grid(args, params: ModelParams, dataset: OrdinalDataset) -> None:
    axis = np.linspace(-args.grid_range, args.grid_range, args.grid)
    grid = np.stack(np.meshgrid(*([axis] * params.q), indexing="ij"), axis=-1).reshape(-1, params.q)
    path = Path(args.out).with_suffix(".grid.csv")
    header = ["observation"] + [f"z{j + 1}" for j in range(params.q)] + ["density"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        rows = range(dataset.n) if args.grid_rows is None else range(min(args.grid_rows, dataset.n))
        for k in rows:
            dens = posterior_density_grid(params, dataset.responses[k], grid)
            for point, d in zip(grid, dens):
                writer.writerow([k + 1] + [f"{v:.6f}" for v in point] + [f"{d:.8e}"])


def _parse_int_list(text: str, flag: str) -> np.ndarray:
    try:
        return np.array([int(v) for v in text.split(",")])
    except ValueError:
        raise InputError(f"{flag} expects comma-separated integers") from None


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ordinal-lvm", description="Latent variable models for ordinal items.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def tuning(p):
        p.add_argument("--tol", type=float, help="parameter-change tolerance for EM")
        p.add_argument("--max-iter", type=int, dest="max_iter", help="EM iteration cap")

    p = sub.add_parser("fit", help="fit a model to a CSV data file")
    p.add_argument("--data", required=True)
    p.add_argument("--q", type=int, required=True, help="number of latent factors")
    p.add_argument("--method", choices=METHODS, default="fla")
    p.add_argument("--points", type=int, default=5, help="quadrature points per dimension")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--categories", help="comma-separated category counts per item")
    p.add_argument("--out")
    tuning(p)
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("simulate", help="generate datasets from a scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("study", help="run a replicate study")
    p.add_argument("--scenario", required=True)
    p.add_argument("--replicates", type=int)
    p.add_argument("--methods", help="comma-separated list, e.g. fla,agh-mode:7")
    p.add_argument("--points", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="worker processes (default: $ORDINAL_LVM_WORKERS or 1)")
    p.add_argument("--thresholds", action="store_true", help="include thresholds in the text table")
    p.add_argument("--out", required=True)
    tuning(p)
    p.set_defaults(handler=cmd_study)

    p = sub.add_parser("diagnose", help="Mardia skewness/kurtosis of individual posteriors")
    p.add_argument("--scenario", required=True)
    p.add_argument("--data", help="CSV data; defaults to replicate 0 of the scenario")
    p.add_argument("--n-equivalent", type=float, default=DEFAULT_N_EQUIVALENT, dest="n_equivalent")
    p.add_argument("--level", type=float, default=0.05)
    p.add_argument("--grid", type=int, default=0, help="points per axis for density grids (0 = none)")
    p.add_argument("--grid-range", type=float, default=4.0, dest="grid_range")
    p.add_argument("--grid-rows", type=int, dest="grid_rows", help="limit grids to the first N observations")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if hasattr(args, "workers") and args.workers is None:
        args.workers = resolve_workers(None)
    try:
        return args.handler(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
