"""Command-line entry point: ``epicoord <command> ...``.

Exit codes: 0 success, 2 invalid input, 3 a decision backend degraded to
its fallback (results are still written).
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as epio
from . import metrics, rt
from .calibration import CalibrationError, calibrate
from .scenario import ScenarioError, load_scenario

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_DEGRADED = 3

log = logging.getLogger("epicoord")


def _write_rows(rows, path, columns):
    out = sys.stdout if path in (None, "-") else open(path, "w", newline="", encoding="utf-8")
    try:
        w = csv.DictWriter(out, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    finally:
        if out is not sys.stdout:
            out.close()


def _scenario_path(arg):
    if arg:
        return Path(arg)
    from .synthetic import shipped_scenario_path

    return shipped_scenario_path()


def cmd_run(args) -> int:
    from .orchestrator import run_episode

    path = _scenario_path(args.scenario)
    config = load_scenario(path)
    report = run_episode(config, args.paradigm, seed=args.seed, max_workers=args.workers, base_dir=path.parent)
    epio.write_report(report, args.out)
    total = float(np.sum(report.infections))
    print(f"{report.paradigm}: {config.name}, {config.n_days} days, aggregate confirmed {total:.1f} -> {args.out}")
    if report.degraded:
        print("warning: at least one backend fell back to its neutral action", file=sys.stderr)
        return EXIT_DEGRADED
    return EXIT_OK


def _report_dirs(paths):
    dirs = []
    for p in map(Path, paths):
        if (p / "summary.json").exists():
            dirs.append(p)
        elif p.is_dir():
            dirs.extend(sorted(q for q in p.iterdir() if (q / "summary.json").exists()))
    if not dirs:
        raise epio.DataError("no report directories found")
    return dirs


def cmd_compare(args) -> int:
    from .orchestrator import compare_paradigms, comparison_rows

    summaries = [epio.read_report_summary(d) for d in _report_dirs(args.reports)]
    table = compare_paradigms(summaries)
    for name, comp in table.items():
        if name == "ground_truth":
            continue
        eq = comp.equity
        fmt = lambda v: "undefined" if v is None else f"{v:.3f}"  # noqa: E731
        print(f"{name:>12}: infection reduction {comp.aggregate_reduction_infections:+.2f}%  "
              f"death reduction {comp.aggregate_reduction_deaths:+.2f}%  "
              f"equity(inf)={fmt(eq.infections)}  equity(deaths)={fmt(eq.deaths)}  types={comp.policy_types}")
    if args.out:
        _write_rows(comparison_rows(table), args.out,
                    ["paradigm", "region", "reduction_infections_pct", "reduction_deaths_pct"])
    return EXIT_OK


def _parse_population(items):
    pop = {}
    for item in items:
        code, _, value = item.partition("=")
        if not value:
            raise CalibrationError(f"population must be CODE=VALUE, got {item!r}")
        pop[code.strip().upper()] = float(value)
    return pop


def cmd_calibrate(args) -> int:
    observed = epio.load_epi(args.epi)
    pop = _parse_population(args.population)
    missing = [c for c in observed.codes if c not in pop]
    if missing:
        raise CalibrationError(f"no population given for {missing}")
    flows = epio.load_flows(args.flows, observed.codes, start=observed.start,
                            end=observed.start + dt.timedelta(days=observed.n_days - 1))
    windows = [0] + sorted((dt.date.fromisoformat(w) - observed.start).days for w in args.window_start)
    windows = sorted(set(windows))
    result = calibrate(observed, flows, windows, [pop[c] for c in observed.codes],
                       exposed_factor=args.exposed_factor, seed=args.seed, method=args.method)
    result.export(args.out, observed.codes, observed.start, observed.n_days - 1)
    print(f"loss {result.loss:.6g}; degenerate {result.degenerate or 'none'}; "
          f"unconverged {result.unconverged or 'none'} -> {args.out}")
    return EXIT_OK


def _cumulative_source(args):
    """``(start, codes, (days, regions) cumulative confirmed)`` from --epi or --trajectory."""
    if args.epi:
        obs = epio.load_epi(args.epi)
        return obs.start, obs.codes, obs.confirmed
    traj = epio.read_trajectory(args.trajectory)
    codes = tuple(traj)
    with open(args.trajectory, newline="", encoding="utf-8") as fh:
        first = next(csv.DictReader(fh))["date"]
    return dt.date.fromisoformat(first), codes, np.column_stack([traj[c]["cum_Q"] for c in codes])


def _selected(codes, region):
    if region is None:
        return list(codes)
    if region.upper() not in codes:
        raise ScenarioError(f"unknown region code {region!r}")
    return [region.upper()]


def cmd_rt(args) -> int:
    start, codes, cum = _cumulative_source(args)
    si = rt.discretize_serial_interval(args.si_mean, args.si_sd)
    series = {}
    for code in _selected(codes, args.region):
        inc = rt.incidence_from_cumulative(cum[:, codes.index(code)])
        series[code] = rt.estimate_rt(inc, si, window=args.window)
    epio.write_rt(series, start, args.out if args.out else sys.stdout)
    return EXIT_OK


def cmd_forecast(args) -> int:
    start, codes, cum = _cumulative_source(args)
    rows = []
    for code in _selected(codes, args.region):
        path = metrics.forecast_cumulative(cum[:, codes.index(code)], args.horizon, args.lookback)
        n_obs = cum.shape[0]
        for t, v in enumerate(path):
            rows.append({
                "date": (start + dt.timedelta(days=t)).isoformat(),
                "region": code,
                "cumulative": float(v),
                "forecast": int(t >= n_obs),
            })
    _write_rows(rows, args.out, ["date", "region", "cumulative", "forecast"])
    return EXIT_OK


def cmd_attribute(args) -> int:
    from .attribution import build_attribution_model, concat_datasets, shapley_values

    data = concat_datasets(epio.load_attribution_dataset(d) for d in _report_dirs(args.reports))
    model = build_attribution_model(data, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    picks = rng.choice(len(data), size=min(args.instances, len(data)), replace=False)
    rows = []
    for inst in sorted(int(p) for p in picks):
        phi = shapley_values(model.predict_proba, data.features[inst], data.features)
        for name, v in zip(data.feature_names, phi):
            rows.append({"feature": name, "shapley_value": float(v), "instance_id": inst})
    _write_rows(rows, args.out, ["feature", "shapley_value", "instance_id"])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="epicoord", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one paradigm over a scenario and write a report directory")
    r.add_argument("--scenario", help="scenario TOML (default: the packaged synthetic5 scenario)")
    r.add_argument("--paradigm", required=True, choices=("agent", "ground_truth", "expert", "random"))
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", required=True)
    r.add_argument("--workers", type=int, default=1, help="concurrent decision calls per round")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="reductions vs ground truth across report directories")
    c.add_argument("--reports", nargs="+", required=True, help="report dirs, or one parent dir holding them")
    c.add_argument("--out", help="optional CSV of per-region reductions")
    c.set_defaults(func=cmd_compare)

    k = sub.add_parser("calibrate", help="fit epidemic rates to an epidemiological CSV")
    k.add_argument("--epi", required=True)
    k.add_argument("--flows", required=True)
    k.add_argument("--population", nargs="+", required=True, metavar="CODE=N")
    k.add_argument("--window-start", nargs="*", default=[], metavar="DATE")
    k.add_argument("--exposed-factor", type=float, default=2.0)
    k.add_argument("--method", choices=("least_squares", "nelder-mead"), default="least_squares")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_calibrate)

    for name, func, text in (("rt", cmd_rt, "R_t series from cumulative confirmed counts"),
                             ("forecast", cmd_forecast, "extend cumulative confirmed counts")):
        s = sub.add_parser(name, help=text)
        src = s.add_mutually_exclusive_group(required=True)
        src.add_argument("--epi", help="epidemiological CSV")
        src.add_argument("--trajectory", help="trajectory.csv from a report")
        s.add_argument("--region")
        s.add_argument("--out")
        if name == "rt":
            s.add_argument("--window", type=int, default=21)
            s.add_argument("--si-mean", type=float, default=5.0)
            s.add_argument("--si-sd", type=float, default=2.0)
        else:
            s.add_argument("--horizon", type=int, default=180)
            s.add_argument("--lookback", type=int, default=14)
        s.set_defaults(func=func)

    a = sub.add_parser("attribute", help="Shapley attribution of strict-first decisions")
    a.add_argument("--reports", nargs="+", required=True)
    a.add_argument("--instances", type=int, default=3)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out")
    a.set_defaults(func=cmd_attribute)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ScenarioError, CalibrationError, epio.DataError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
