"""Command-line frontend for scenario runs and fault analysis.

Five subcommands cover the workflow end to end:

``run``
    Simulate a scenario file and write the trajectory CSV, the event JSON
    and the run report JSON into the output directory.
``analyze``
    Observability and candidate-cost study of a plant, healthy or under a
    described sensor fault, emitted as JSON.
``plan``
    Just the chosen reconfiguration plan for a described fault.
``plotdata``
    Extract two-column (time, value) series from a trajectory CSV for
    external plotting, with optional stride downsampling.
``validate``
    Parse, validate and round-trip a scenario file.

Exit codes: 0 success, 2 bad input (file, field or argument), 3 when a run
finishes with an unrecoverable-fault verdict.  The default output directory
comes from ``--out``, falling back to the ``GRIDFTC_OUT`` environment
variable and then the working directory.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from .observability import kalman_rank
from .power_model import load_plant
from .reconfig import FaultEvent, fault_output_map, rftc_select
from .sim_engine import (
    ScenarioError,
    build_report,
    load_scenario,
    run_scenario,
    write_events_json,
    write_report_json,
    write_trajectory_csv,
)

OUT_ENV_VAR = "GRIDFTC_OUT"


class _CliError(Exception):
    """Input problem that maps to exit code 2."""


def _out_dir(args) -> Path:
    if args.out is not None:
        d = Path(args.out)
    else:
        d = Path(os.environ.get(OUT_ENV_VAR, "."))
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_scenario(path) -> "Scenario":
    if not Path(path).exists():
        raise _CliError(f"scenario file not found: {path}")
    try:
        return load_scenario(path)
    except ScenarioError as exc:
        raise _CliError(f"invalid scenario field '{exc.field}': {exc}") from exc


def _load_plant(path):
    if not Path(path).exists():
        raise _CliError(f"plant file not found: {path}")
    try:
        return load_plant(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise _CliError(f"invalid plant file: {exc}") from exc


def _fault_from_args(args, n: int) -> FaultEvent:
    if args.subsystem is None:
        raise _CliError("--subsystem is required together with --fault")
    if not 1 <= args.subsystem <= n:
        raise _CliError(
            f"subsystem {args.subsystem} outside 1..{n} for this plant")
    try:
        return FaultEvent(kind=args.fault, subsystem=args.subsystem,
                          t_fault=0.0, factor=args.factor,
                          sensor_row=args.sensor_row, fdi_delay=0.0)
    except ValueError as exc:
        raise _CliError(str(exc)) from exc


def cmd_run(args) -> int:
    scn = _load_scenario(args.scenario)
    out = _out_dir(args)
    t0 = time.perf_counter()
    log = run_scenario(scn, seed=args.seed)
    wall = time.perf_counter() - t0

    names = {"trajectory": "trajectory.csv", "events": "events.json",
             "report": "report.json"}
    names.update(scn.outputs)
    paths = {key: out / name for key, name in names.items()}
    write_trajectory_csv(log, paths["trajectory"])
    write_events_json(log, paths["events"])
    report = build_report(scn, log, wall_time_s=wall,
                          outputs={k: str(p) for k, p in paths.items()})
    write_report_json(report, paths["report"])

    print(f"scenario {scn.name}: {len(log.t)} steps in {wall:.1f} s")
    for ev in log.events:
        print(f"  t={ev.t:9.3f}  {ev.label}")
    for r in report.recovery:
        print(f"  fault at t={r['t_fault']:.0f} ({r['kind']}): {r['verdict']}")
    for key, p in paths.items():
        print(f"  {key}: {p}")
    if log.unrecoverable:
        print("verdict: unrecoverable fault; see report", file=sys.stderr)
        return 3
    return 0


def cmd_analyze(args) -> int:
    plant = _load_plant(args.plant)
    lin = plant.linearize()
    n = lin.n
    result: dict = {"plant": plant.name, "subsystems": n}

    nominal = []
    for i in range(n):
        rank, ok = kalman_rank(lin.A[i], lin.Csub[i], args.tol)
        nominal.append({"subsystem": i + 1, "observable": ok, "rank": rank})
    result["nominal_observability"] = nominal

    if args.fault is not None:
        fault = _fault_from_args(args, n)
        c_faulty = fault_output_map(fault, lin.Csub[fault.subsystem - 1])
        plan = rftc_select(fault.subsystem, lin, args.alpha, args.xi,
                           faulty_C=c_faulty, j_max=args.j_max, tol=args.tol)
        chosen = plan.augment_set
        table = []
        for rep in plan.candidates:
            row = rep.to_dict()
            row["chosen"] = (chosen is not None
                             and tuple(rep.candidate) == tuple(chosen))
            table.append(row)
        result["fault"] = {"kind": fault.kind, "subsystem": fault.subsystem,
                           "factor": fault.factor}
        result["candidates"] = table
        result["plan"] = plan.to_dict()

    json.dump(result, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def cmd_plan(args) -> int:
    plant = _load_plant(args.plant)
    lin = plant.linearize()
    fault = _fault_from_args(args, lin.n)
    c_faulty = fault_output_map(fault, lin.Csub[fault.subsystem - 1])
    plan = rftc_select(fault.subsystem, lin, args.alpha, args.xi,
                       faulty_C=c_faulty, j_max=args.j_max, tol=args.tol)
    json.dump(plan.to_dict(), sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def _read_trajectory(path):
    """Header list and the numeric block of a trajectory CSV.

    The trailing event column is text and is not loaded.
    """
    if not Path(path).exists():
        raise _CliError(f"trajectory file not found: {path}")
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    numeric = header[:-1] if header and header[-1] == "event" else header
    data = np.loadtxt(path, delimiter=",", skiprows=1,
                      usecols=range(len(numeric)))
    if data.ndim == 1:
        data = data[None, :]
    return numeric, data


def _series(selector: str, header: list, data: np.ndarray) -> np.ndarray:
    """One derived or raw column as a vector."""
    if selector in header:
        return data[:, header.index(selector)]
    # error-norm selectors are recomputed from the raw state columns
    subs = sorted({h.split("_")[0] for h in header if h.startswith("sub")})
    if selector == "errnorm":
        cols = []
        for s in subs:
            for j in (1, 2, 3):
                cols.append(data[:, header.index(f"{s}_x{j}")]
                            - data[:, header.index(f"{s}_xhat{j}")])
        return np.max(np.abs(np.stack(cols)), axis=0)
    if selector.endswith("_errnorm") and selector[:-8] in subs:
        s = selector[:-8]
        cols = [data[:, header.index(f"{s}_x{j}")]
                - data[:, header.index(f"{s}_xhat{j}")] for j in (1, 2, 3)]
        return np.max(np.abs(np.stack(cols)), axis=0)
    available = header[1:] + ["errnorm"] + [f"{s}_errnorm" for s in subs]
    raise _CliError(
        f"unknown selector '{selector}'; available: {', '.join(available)}")


def cmd_plotdata(args) -> int:
    header, data = _read_trajectory(args.trajectory)
    if args.stride < 1:
        raise _CliError(f"stride must be at least 1, got {args.stride}")
    out = _out_dir(args)
    t = data[:, 0]
    for selector in args.selector:
        values = _series(selector, header, data)
        series = np.column_stack([t, values])[::args.stride]
        path = out / f"{selector}.dat"
        np.savetxt(path, series, fmt="%.12g")
        print(f"{selector}: {series.shape[0]} rows -> {path}")
    return 0


def cmd_validate(args) -> int:
    scn = _load_scenario(args.scenario)
    base = Path(args.scenario).parent
    first = scn.to_dict()
    from .sim_engine import Scenario

    second = Scenario.from_dict(json.loads(json.dumps(first)),
                                base_dir=base).to_dict()
    if first != second:
        raise _CliError("scenario does not round-trip cleanly")
    json.dump(first, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridftc",
        description="Sensor-fault-tolerant reconfiguration simulator")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--tol", type=float, default=1e-9,
                        help="numeric rank / screening tolerance")
    common.add_argument("--seed", type=int, default=0,
                        help="seed for the measurement-noise generator")
    common.add_argument("--out", default=None,
                        help=f"output directory (default: ${OUT_ENV_VAR} "
                        "or the working directory)")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common],
                       help="simulate a scenario file")
    p.add_argument("scenario", help="scenario JSON file")
    p.set_defaults(func=cmd_run)

    fault_common = argparse.ArgumentParser(add_help=False)
    fault_common.add_argument("--fault", default=None,
                              choices=["gain", "stuck", "total-loss"],
                              help="sensor fault kind to analyze")
    fault_common.add_argument("--subsystem", type=int, default=None,
                              help="1-based faulty subsystem id")
    fault_common.add_argument("--factor", type=float, default=1.0,
                              help="gain-fault scale factor")
    fault_common.add_argument("--sensor-row", type=int, default=0,
                              help="faulty output row of the subsystem")
    fault_common.add_argument("--alpha", type=float, default=100.0,
                              help="observability-weakness weight")
    fault_common.add_argument("--xi", type=float, default=50.0,
                              help="functionality-gap weight")
    fault_common.add_argument("--j-max", type=float, default=None,
                              help="cost cap for admissible candidates")

    p = sub.add_parser("analyze", parents=[common, fault_common],
                       help="observability and candidate-cost study")
    p.add_argument("plant", help="plant JSON file")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("plan", parents=[common, fault_common],
                       help="chosen reconfiguration plan for one fault")
    p.add_argument("plant", help="plant JSON file")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("plotdata", parents=[common],
                       help="extract plot series from a trajectory CSV")
    p.add_argument("trajectory", help="trajectory CSV from a run")
    p.add_argument("selector", nargs="+",
                   help="column name (sub5_x1), errnorm, or sub<i>_errnorm")
    p.add_argument("--stride", type=int, default=1,
                   help="keep every stride-th row")
    p.set_defaults(func=cmd_plotdata)

    p = sub.add_parser("validate", parents=[common],
                       help="validate and round-trip a scenario file")
    p.add_argument("scenario", help="scenario JSON file")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ScenarioError as exc:
        print(f"error: invalid scenario field '{exc.field}': {exc}",
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
