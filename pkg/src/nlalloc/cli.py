"""Command-line harness: run a scenario (or sweep one parameter) and write CSV results.

Exit codes: 0 success, 1 asserted certificate violated under ``--strict``,
2 input error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import nonlinearity as nl
from .analysis import NOT_APPLICABLE, AnalysisReport, analyze, solve_oracle
from .objective import BarrierDomainError, ObjectiveError, reweight
from .protocol import ConfigurationError, NumericalAbort, Trajectory, run
from .scenario import CERTIFICATE_NAMES, Scenario, ScenarioError, bundled_scenarios, load_scenario
from .topology import TopologyError, min_connecting_window

__all__ = ["main", "run_scenario", "sweep", "execute", "SWEEP_PARAMETERS"]

EXIT_OK, EXIT_VIOLATION, EXIT_INPUT, EXIT_ABORT = 0, 1, 2, 3

SWEEP_PARAMETERS = ("q", "eta", "level", "mu1", "mu2", "B")
_SWEEP_ALIASES = {"saturation": "level", "saturation_level": "level", "s": "level"}

_INPUT_ERRORS = (ScenarioError, ConfigurationError, ObjectiveError, TopologyError)


def fmt(value) -> str:
    """Shortest round-trip decimal for floats, plain ``str`` otherwise."""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return "" if value is None else str(value)


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def write_csv_atomic(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Write an RFC 4180 CSV via a temporary file and rename, so readers never see a partial file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(header)
            for row in rows:
                w.writerow([fmt(v) for v in row])
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- running ------------------------------------------------------------------


def _window(scn: Scenario) -> int | None:
    if scn.analysis.window is not None:
        return scn.analysis.window
    if scn.network.is_static:
        return None
    return min_connecting_window(scn.network) or scn.network.period


def execute(scn: Scenario) -> tuple[Trajectory, AnalysisReport]:
    """Run the protocol and analyze the trajectory; raises on abort."""
    work = reweight(scn.spec)
    x_star = solve_oracle(work)
    traj = run(scn.config, scn.spec, scn.network)
    opts = scn.analysis
    report = analyze(
        work, traj, scn.network,
        x_star=x_star,
        intervals=opts.intervals,
        tail_fraction=opts.tail_fraction,
        tail_min=opts.tail_min,
        window=_window(scn),
        rate_tol=opts.rate_tol,
        monotone_tol=opts.monotone_tol,
        kkt_tol=opts.kkt_tol,
        distance_tol=opts.distance_tol,
        residual_tol=opts.residual_tol,
    )
    return traj, report


def _cert_key(name: str) -> str:
    return "window_decrease" if name.startswith("window_decrease") else name


def violations(scn: Scenario, report: AnalysisReport) -> list[str]:
    """Asserted certificates that did not hold (``not-applicable`` counts as a failure)."""
    bad = []
    for c in report.certificates:
        if _cert_key(c.name) in scn.analysis.asserted and c.status != "holds":
            bad.append(c.name)
    return bad


def trajectory_rows(scn: Scenario, traj: Trajectory, report: AnalysisReport):
    K = traj.steps
    idx = list(range(0, K + 1, scn.stride))
    if idx[-1] != K:
        idx.append(K)
    a = np.ones(scn.spec.n) if scn.spec.weights is None else np.asarray(scn.spec.weights)
    times = traj.times
    sums = traj.sums()
    for k in idx:
        x = traj.states[k]
        yield [k, float(times[k]), *(x / a).tolist(), float(sums[k]), float(report.residuals[k]),
               float(report.dispersion_norms[k]), float(report.distances[k])]


def report_rows(scn: Scenario, report: AnalysisReport):
    for c in report.certificates:
        yield [c.name, c.value, c.status, c.slack]
    info = [
        ("f_star", report.f_star),
        ("v", report.v),
        ("u", report.u),
        ("final_distance", report.final_distance),
        ("final_kkt_residual", report.final_kkt_residual),
        ("tail_mean_distance", report.tail_mean_distance),
        ("tail_oscillation", report.tail_oscillation),
        ("seed", scn.seed),
    ]
    for key, values in scn.realized.items():
        if len(values) == 1:
            info.append((key, values[0]))
        else:
            info.extend((f"{key}_{i + 1}", v) for i, v in enumerate(values))
    for name, value in info:
        yield [name, value, "info", None]


def run_scenario(
    ref: str | Path,
    out_dir: str | Path = ".",
    *,
    strict: bool = False,
    seed: int | None = None,
    quiet: bool = False,
    out=sys.stdout,
    err=sys.stderr,
) -> int:
    """Run one scenario, write ``<name>_trajectory.csv`` and ``<name>_report.csv``; return the exit code."""
    try:
        scn = load_scenario(ref, seed=seed)
        traj, report = execute(scn)
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=err)
        return EXIT_INPUT
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=err)
        return EXIT_ABORT
    except BarrierDomainError as exc:
        print(f"numerical abort: {exc}", file=err)
        return EXIT_ABORT
    out_dir = Path(out_dir)
    header = ["step", "t", *(f"x_{i + 1}" for i in range(scn.spec.n)), "sum_x", "residual",
              "dispersion_norm", "distance_to_opt"]
    write_csv_atomic(out_dir / f"{scn.name}_trajectory.csv", header, trajectory_rows(scn, traj, report))
    write_csv_atomic(out_dir / f"{scn.name}_report.csv", ["name", "value", "status", "slack"],
                     report_rows(scn, report))
    bad = violations(scn, report)
    if not quiet:
        for c in report.certificates:
            tag = " [asserted]" if _cert_key(c.name) in scn.analysis.asserted else ""
            note = f" ({c.note})" if c.note else ""
            print(f"{scn.name}: {c.name} = {c.value:.6g} {c.status}{tag}{note}", file=out)
    if bad:
        print(f"{scn.name}: asserted certificate(s) failed: {', '.join(bad)}", file=err)
        if strict:
            return EXIT_VIOLATION
    return EXIT_OK


# -- sweeps -------------------------------------------------------------------


def _with_parameter(scn: Scenario, param: str, value: float) -> Scenario:
    h = scn.config.nonlinearity
    cfg = scn.config
    if param == "eta":
        return dataclasses.replace(scn, config=dataclasses.replace(cfg, eta=value))
    if param == "q":
        makers = {"uniform_quantizer": nl.uniform_quantizer, "log_quantizer": nl.log_quantizer}
        if h.kind not in makers:
            raise ScenarioError(f"sweep q: scenario map is {h.kind}, not a quantizer")
        return dataclasses.replace(scn, config=dataclasses.replace(cfg, nonlinearity=makers[h.kind](value)))
    if param == "level":
        if h.kind != "saturation":
            raise ScenarioError(f"sweep level: scenario map is {h.kind}, not saturation")
        return dataclasses.replace(scn, config=dataclasses.replace(cfg, nonlinearity=nl.saturation(value)))
    if param in ("mu1", "mu2"):
        if h.kind != "signpower_sum":
            raise ScenarioError(f"sweep {param}: scenario map is {h.kind}, not signpower_sum")
        mu1, mu2 = (value, h.p2) if param == "mu1" else (h.p1, value)
        return dataclasses.replace(scn, config=dataclasses.replace(cfg, nonlinearity=nl.signpower_sum(mu1, mu2)))
    # B: hold each frame for B / frames steps so that one window of B steps covers the whole cycle
    frames = len(scn.network.frames)
    if scn.network.is_static:
        raise ScenarioError("sweep B: scenario network is static")
    if value != int(value) or int(value) % frames or value < frames:
        raise ScenarioError(f"sweep B: value {value} must be a positive multiple of the frame count {frames}")
    net = scn.network.with_durations(int(value) // frames)
    opts = dataclasses.replace(scn.analysis, window=int(value))
    return dataclasses.replace(scn, network=net, analysis=opts)


def parse_values(text: str) -> list[float]:
    text = text.strip()
    if not text:
        return []
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ScenarioError(f"sweep values: {exc}") from exc


def sweep(
    ref: str | Path,
    param: str,
    values: Sequence[float],
    out_dir: str | Path = ".",
    *,
    strict: bool = False,
    seed: int | None = None,
    quiet: bool = False,
    out=sys.stdout,
    err=sys.stderr,
) -> int:
    """One run per value; writes ``<name>_sweep_<param>.csv``. Aborted runs are recorded, not fatal."""
    param = _SWEEP_ALIASES.get(param, param)
    try:
        if param not in SWEEP_PARAMETERS:
            raise ScenarioError(f"unknown sweep parameter {param!r}; expected one of {', '.join(SWEEP_PARAMETERS)}")
        base = load_scenario(ref, seed=seed)
        variants = [_with_parameter(base, param, float(v)) for v in values]
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=err)
        return EXIT_INPUT
    header = ["parameter", "value", "outcome", "final_distance", "final_residual", "final_kkt_residual",
              "tail_mean_distance", *CERTIFICATE_NAMES]
    rows = []
    failed = False
    for v, scn in zip(values, variants):
        try:
            _, report = execute(scn)
        except (NumericalAbort, BarrierDomainError):
            rows.append([param, float(v), "aborted", *([None] * 4), *([None] * len(CERTIFICATE_NAMES))])
            failed = True
            if not quiet:
                print(f"{base.name}: {param} = {v!r} aborted", file=out)
            continue
        except _INPUT_ERRORS as exc:
            print(f"error: {param} = {v!r}: {exc}", file=err)
            return EXIT_INPUT
        status = {_cert_key(c.name): c.status for c in report.certificates}
        failed |= bool(violations(scn, report))
        rows.append([param, float(v), "ok", report.final_distance, float(report.residuals[-1]),
                     report.final_kkt_residual, report.tail_mean_distance,
                     *(status.get(name, NOT_APPLICABLE) for name in CERTIFICATE_NAMES)])
        if not quiet:
            marks = ", ".join(f"{k}={s}" for k, s in status.items() if s != NOT_APPLICABLE)
            print(f"{base.name}: {param} = {v!r} distance {report.final_distance:.6g}; {marks}", file=out)
    write_csv_atomic(Path(out_dir) / f"{base.name}_sweep_{param}.csv", header, rows)
    return EXIT_VIOLATION if strict and failed else EXIT_OK


# -- entry point --------------------------------------------------------------


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from exc
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="nlalloc",
        description="Simulate sum-preserving distributed allocation under nonlinear gradient exchange.",
    )
    p.add_argument("--scenario", help="scenario TOML file, or the name of a bundled scenario")
    p.add_argument("--out-dir", default=".", help="directory for CSV outputs (default: current)")
    p.add_argument("--strict", action="store_true", help="exit 1 when an asserted certificate fails")
    p.add_argument("--seed", type=_u64, help="override the scenario seed (unsigned 64-bit)")
    p.add_argument("--sweep", nargs=2, metavar=("PARAM", "VALUES"),
                   help=f"run once per comma-separated value of PARAM ({', '.join(SWEEP_PARAMETERS)})")
    p.add_argument("--quiet", action="store_true", help="suppress per-certificate output")
    p.add_argument("--list", action="store_true", help="list bundled scenarios and exit")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.list:
        print("\n".join(bundled_scenarios()))
        return EXIT_OK
    if not args.scenario:
        print("error: --scenario is required", file=sys.stderr)
        return EXIT_INPUT
    if args.sweep:
        param, text = args.sweep
        try:
            values = parse_values(text)
        except ScenarioError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INPUT
        return sweep(args.scenario, param, values, args.out_dir, strict=args.strict, seed=args.seed,
                     quiet=args.quiet)
    return run_scenario(args.scenario, args.out_dir, strict=args.strict, seed=args.seed, quiet=args.quiet)


if __name__ == "__main__":
    sys.exit(main())
