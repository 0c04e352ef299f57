"""CSV ingestion of epidemiological, mobility, policy and parameter tables,
and report writing.

Dialect everywhere: comma separated, mandatory header row, UTF-8, ISO-8601
dates. Column orders are fixed by the ``*_COLUMNS`` constants below.
"""
from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .calibration import ObservedSeries
from .scenario import COMPARTMENTS, PARAM_NAMES, EpiParams, MobilitySchedule, ScenarioError, config_digest

log = logging.getLogger(__name__)

EPI_COLUMNS = ("date", "state", "lat", "lon", "confirmed", "deaths", "recovered", "active")
FLOW_COLUMNS = (
    "date", "origin", "destination", "origin_lat", "origin_lon",
    "destination_lat", "destination_lon", "visitors", "pop_flow",
)
POLICY_COLUMNS = ("date", "state", "category", "detail")
PARAM_COLUMNS = ("region", "window_start", "window_end", *PARAM_NAMES)
TRAJECTORY_COLUMNS = ("date", "region", *COMPARTMENTS, "cum_Q")
METRIC_COLUMNS = ("date", "region", "IR", "DR", "ACR")
RT_COLUMNS = ("date", "region", "rt_mean", "rt_lo", "rt_hi")
POLICY_LOG_COLUMNS = (
    "cycle", "start_date", "acting_region", "origin_region", "action_type",
    "parameters", "policy_type_label", "baseline_inflow", "repaired", "fallback",
)
SCHEMA_VERSION = 1
REPORT_FILES = ("trajectory.csv", "flows.csv", "policy_log.csv", "metrics.csv", "rt.csv", "summary.json")


class DataError(ValueError):
    """A data file violates its schema; messages carry the line number."""


def _num(x: float) -> str:
    return repr(float(x))


def _reader(path, required: Sequence[str]):
    fh = open(path, newline="", encoding="utf-8")
    reader = csv.DictReader(fh)
    if reader.fieldnames is None:
        fh.close()
        raise DataError(f"{path}: missing header row")
    missing = [c for c in required if c not in reader.fieldnames]
    if missing:
        fh.close()
        raise DataError(f"{path}: missing column(s) {missing}")
    return fh, reader


def _parse_date(value, path, line) -> dt.date:
    try:
        return dt.date.fromisoformat(value.strip())
    except (AttributeError, ValueError):
        raise DataError(f"{path}:{line}: unparseable date {value!r}") from None


def _parse_count(value, name, path, line, allow_blank=False):
    if value is None or value.strip() == "":
        if allow_blank:
            return None
        raise DataError(f"{path}:{line}: missing {name}")
    try:
        x = float(value)
    except ValueError:
        raise DataError(f"{path}:{line}: {name} is not a number ({value!r})") from None
    if not np.isfinite(x) or x < 0:
        raise DataError(f"{path}:{line}: {name} must be a nonnegative number, got {value!r}")
    return x


def _parse_float_opt(value):
    if value is None or value.strip() == "":
        return None
    return float(value)


# --------------------------------------------------------------------------
# Epidemiological series
# --------------------------------------------------------------------------


def load_epi(path, regions: Sequence[str] | None = None) -> ObservedSeries:
    """Per-region daily cumulative series.

    Dips in cumulative columns are repaired with a running maximum and gaps
    are forward-filled; both are counted on the returned object.
    """
    allowed = None if regions is None else {r.upper() for r in regions}
    fh, reader = _reader(path, EPI_COLUMNS[:2] + ("confirmed", "deaths", "recovered"))
    rows = {}
    seen = {}
    centroids = {}
    with fh:
        for row in reader:
            line = reader.line_num
            date = _parse_date(row["date"], path, line)
            code = (row["state"] or "").strip().upper()
            if not code or (allowed is not None and code not in allowed):
                raise DataError(f"{path}:{line}: unknown region code {row['state']!r}")
            key = (date, code)
            if key in seen:
                raise DataError(f"{path}:{line}: duplicate row for {code} on {date} (first on line {seen[key]})")
            seen[key] = line
            vals = tuple(_parse_count(row[c], c, path, line) for c in ("confirmed", "deaths", "recovered"))
            rows[key] = vals
            try:
                centroids.setdefault(code, (_parse_float_opt(row.get("lat")), _parse_float_opt(row.get("lon"))))
            except ValueError:
                raise DataError(f"{path}:{line}: unparseable centroid") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    codes = tuple(sorted({c for _, c in rows})) if regions is None else tuple(r.upper() for r in regions)
    start = min(d for d, _ in rows)
    end = max(d for d, _ in rows)
    n_days = (end - start).days + 1
    data = np.full((3, n_days, len(codes)), np.nan)
    for (date, code), vals in rows.items():
        data[:, (date - start).days, codes.index(code)] = vals

    filled = np.isnan(data[0])
    n_filled = 0
    for k in range(len(codes)):
        col = data[:, :, k]
        if np.isnan(col[0, 0]):
            first = np.flatnonzero(~np.isnan(col[0]))
            if first.size == 0:
                raise DataError(f"{path}: region {codes[k]} has no rows")
            col[:, : first[0]] = 0.0
        for t in range(1, n_days):
            if np.isnan(col[0, t]):
                col[:, t] = col[:, t - 1]
                n_filled += 1
    repaired = np.maximum.accumulate(data, axis=1)
    n_repairs = int(np.sum(repaired != data))
    if n_repairs:
        log.warning("%s: repaired %d cumulative dips with a running maximum", path, n_repairs)
    if n_filled:
        log.warning("%s: forward-filled %d missing region-days", path, n_filled)
    confirmed, deaths, recovered = repaired
    return ObservedSeries(
        start=start,
        codes=codes,
        confirmed=confirmed,
        deaths=deaths,
        recovered=recovered,
        filled=filled,
        n_repairs=n_repairs,
        n_filled=n_filled,
        centroids={c: centroids.get(c, (None, None)) for c in codes},
    )


def write_epi(series: ObservedSeries, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(EPI_COLUMNS)
        for t in range(series.n_days):
            date = (series.start + dt.timedelta(days=t)).isoformat()
            for k, code in enumerate(series.codes):
                lat, lon = series.centroids.get(code, (None, None))
                w.writerow([
                    date, code, "" if lat is None else lat, "" if lon is None else lon,
                    _num(series.confirmed[t, k]), _num(series.deaths[t, k]),
                    _num(series.recovered[t, k]), _num(series.active[t, k]),
                ])


# --------------------------------------------------------------------------
# Mobility
# --------------------------------------------------------------------------


def load_flows(path, regions: Sequence[str], start: dt.date | None = None, end: dt.date | None = None,
               ) -> MobilitySchedule:
    """Dense daily matrices from the ``pop_flow`` column.

    Rows touching regions outside ``regions`` are skipped; pairs without a
    row are zero. The schedule spans ``start`` (inclusive) to ``end``
    (exclusive), defaulting to the file's date range.
    """
    codes = tuple(r.upper() for r in regions)
    if not codes:
        raise DataError("region filter is empty")
    index = {c: k for k, c in enumerate(codes)}
    fh, reader = _reader(path, ("date", "origin", "destination", "pop_flow"))
    entries = []
    seen = {}
    with fh:
        for row in reader:
            line = reader.line_num
            date = _parse_date(row["date"], path, line)
            o = (row["origin"] or "").strip().upper()
            d = (row["destination"] or "").strip().upper()
            if o == d:
                raise DataError(f"{path}:{line}: origin equals destination ({o})")
            key = (date, o, d)
            if key in seen:
                raise DataError(f"{path}: duplicate flow {o}->{d} on {date} at lines {seen[key]} and {line}")
            seen[key] = line
            value = _parse_count(row["pop_flow"], "pop_flow", path, line)
            if row.get("visitors") not in (None, ""):
                _parse_count(row["visitors"], "visitors", path, line)
            if o in index and d in index:
                entries.append((date, index[o], index[d], value))
    dates = [e[0] for e in entries]
    if start is None:
        if not dates:
            raise DataError(f"{path}: no flows between the requested regions")
        start = min(dates)
    if end is None:
        end = (max(dates) if dates else start) + dt.timedelta(days=1)
    n_days = (end - start).days
    if n_days < 0:
        raise DataError("flow range end precedes start")
    flows = np.zeros((n_days, len(codes), len(codes)))
    for date, j, i, value in entries:
        t = (date - start).days
        if 0 <= t < n_days:
            flows[t, j, i] = value
    return MobilitySchedule(start, codes, flows)


def write_flows(schedule: MobilitySchedule, path, centroids: dict | None = None) -> None:
    centroids = centroids or {}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(FLOW_COLUMNS)
        flows = schedule.flows
        for t in range(flows.shape[0]):
            date = schedule.date(t).isoformat()
            for j, o in enumerate(schedule.codes):
                olat, olon = centroids.get(o, (None, None))
                for i, d in enumerate(schedule.codes):
                    v = flows[t, j, i]
                    if i == j or v == 0.0:
                        continue
                    dlat, dlon = centroids.get(d, (None, None))
                    w.writerow([
                        date, o, d,
                        "" if olat is None else olat, "" if olon is None else olon,
                        "" if dlat is None else dlat, "" if dlon is None else dlon,
                        "", _num(v),
                    ])


# --------------------------------------------------------------------------
# Policy records (provenance only)
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PolicyRecord:
    date: dt.date
    state: str
    category: str
    detail: str


def load_policies(path) -> list:
    fh, reader = _reader(path, POLICY_COLUMNS)
    out = []
    with fh:
        for row in reader:
            date = _parse_date(row["date"], path, reader.line_num)
            out.append(PolicyRecord(date, row["state"].strip().upper(), row["category"].strip(), row["detail"] or ""))
    return out


# --------------------------------------------------------------------------
# Fitted parameters
# --------------------------------------------------------------------------


def write_params(params: EpiParams, codes: Sequence[str], start: dt.date, n_days: int, path) -> None:
    bounds = list(params.starts) + [n_days]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(PARAM_COLUMNS)
        for k in range(len(params.starts)):
            ws = (start + dt.timedelta(days=bounds[k])).isoformat()
            we = (start + dt.timedelta(days=bounds[k + 1])).isoformat()
            for i, code in enumerate(codes):
                w.writerow([code, ws, we, *(_num(v) for v in params.values[k, i])])


def load_params(path, codes: Sequence[str], start: dt.date) -> EpiParams:
    """Re-load a parameter CSV; window starts are taken relative to ``start``."""
    codes = tuple(c.upper() for c in codes)
    fh, reader = _reader(path, PARAM_COLUMNS)
    table = {}
    with fh:
        for row in reader:
            line = reader.line_num
            code = row["region"].strip().upper()
            if code not in codes:
                raise DataError(f"{path}:{line}: unknown region code {code!r}")
            ws = _parse_date(row["window_start"], path, line)
            try:
                vals = [float(row[p]) for p in PARAM_NAMES]
            except ValueError:
                raise DataError(f"{path}:{line}: non-numeric parameter") from None
            table[(ws, code)] = vals
    starts = sorted({ws for ws, _ in table})
    if not starts:
        raise DataError(f"{path}: no parameter rows")
    values = np.empty((len(starts), len(codes), 6))
    for k, ws in enumerate(starts):
        for i, code in enumerate(codes):
            if (ws, code) not in table:
                raise DataError(f"{path}: no parameters for {code} in window starting {ws}")
            values[k, i] = table[(ws, code)]
    offsets = [(ws - start).days for ws in starts]
    if offsets[0] > 0:
        offsets[0] = 0
    if offsets[0] < 0:
        raise ScenarioError("parameter windows start before the scenario")
    return EpiParams(values, tuple(offsets))


# --------------------------------------------------------------------------
# Trajectories and reports
# --------------------------------------------------------------------------


def write_trajectory(traj, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        for t in range(traj.states.shape[0]):
            date = traj.date(t).isoformat()
            for k, code in enumerate(traj.codes):
                w.writerow([date, code, *(_num(v) for v in traj.states[t, k]), _num(traj.confirmed[t, k])])


def read_trajectory(path) -> dict:
    """``{region: {"S": array, ..., "cum_Q": array}}`` from a trajectory CSV."""
    fh, reader = _reader(path, TRAJECTORY_COLUMNS)
    out: dict = {}
    with fh:
        for row in reader:
            cols = out.setdefault(row["region"], {c: [] for c in (*COMPARTMENTS, "cum_Q")})
            for c in cols:
                cols[c].append(float(row[c]))
    return {r: {c: np.array(v) for c, v in cols.items()} for r, cols in out.items()}


def _write_metrics(report, path):
    traj = report.trajectory
    rates = report.rates
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for t in range(traj.n_days):
            date = traj.date(t).isoformat()
            for k, code in enumerate(traj.codes):
                w.writerow([date, code, _num(rates["IR"][t, k]), _num(rates["DR"][t, k]), _num(rates["ACR"][t, k])])


def write_rt(rts: dict, start: dt.date, path) -> None:
    """``path`` may also be an open text stream."""
    if hasattr(path, "write"):
        _rt_rows(rts, start, path)
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        _rt_rows(rts, start, fh)


def _rt_rows(rts, start, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(RT_COLUMNS)
    for code, series in rts.items():
        for t, m, lo, hi in zip(series.days, series.mean, series.lower, series.upper):
            date = (start + dt.timedelta(days=int(t))).isoformat()
            w.writerow([date, code, _num(m), _num(lo), _num(hi)])


def _write_policy_log(report, path):
    start = report.config.start_date
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(POLICY_LOG_COLUMNS)
        for e in report.policy_log:
            w.writerow([
                e.cycle, (start + dt.timedelta(days=e.start)).isoformat(), e.destination, e.origin or "",
                e.action_type, e.parameters, e.label, _num(e.baseline_inflow), int(e.repaired), int(e.fallback),
            ])


def report_summary(report) -> dict:
    codes = list(report.codes)
    cfg = report.config
    means = {k: v.mean(axis=0) for k, v in report.rates.items()}
    return {
        "schema_version": SCHEMA_VERSION,
        "scenario": cfg.name,
        "paradigm": report.paradigm,
        "seed": report.seed,
        "config_hash": config_digest(cfg),
        "regions": codes,
        "start_date": cfg.start_date.isoformat(),
        "end_date": cfg.end_date.isoformat(),
        "n_days": cfg.n_days,
        "strategy": cfg.strategy,
        "horizon_weeks": cfg.horizon_weeks,
        "total_infections": {c: float(v) for c, v in zip(codes, report.infections)},
        "total_deaths": {c: float(v) for c, v in zip(codes, report.deaths)},
        "aggregate_infections": float(np.sum(report.infections)),
        "aggregate_deaths": float(np.sum(report.deaths)),
        "mean_rates": {k: {c: float(v) for c, v in zip(codes, vals)} for k, vals in means.items()},
        "policy_types": dict(sorted(Counter(report.labels).items())),
        "decision_calls": report.transcript.decision_calls,
        "message_ingestions": report.transcript.message_ingestions,
        "degraded": bool(report.degraded),
        "capped_region_days": int(report.trajectory.n_capped),
    }


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_report(report, directory) -> dict:
    """Write all report artifacts plus ``manifest.json``; returns the manifest.

    Outputs depend only on the simulated content, so reruns with the same
    seed reproduce identical hashes.
    """
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_trajectory(report.trajectory, out / "trajectory.csv")
        centroids = {r.code: (r.lat, r.lon) for r in report.config.regions}
        write_flows(report.realized, out / "flows.csv", centroids)
        _write_policy_log(report, out / "policy_log.csv")
        _write_metrics(report, out / "metrics.csv")
        write_rt(report.rt, report.config.start_date, out / "rt.csv")
        (out / "summary.json").write_text(json.dumps(report_summary(report), indent=2, sort_keys=True) + "\n")
        files = list(REPORT_FILES)
        if report.transcript.records:
            report.transcript.write(out / "transcript.jsonl")
            files.append("transcript.jsonl")
        manifest = {"schema_version": SCHEMA_VERSION, "files": {f: _sha256(out / f) for f in files}}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    return manifest


def read_report_summary(directory):
    """Comparison-ready summary of a report directory."""
    from .orchestrator import ReportSummary

    d = Path(directory)
    s = json.loads((d / "summary.json").read_text())
    if s.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"{d}: unsupported summary schema {s.get('schema_version')}")
    codes = tuple(s["regions"])
    labels = []
    fh, reader = _reader(d / "policy_log.csv", POLICY_LOG_COLUMNS)
    with fh:
        labels = [row["policy_type_label"] for row in reader if row["policy_type_label"]]
    return ReportSummary(
        paradigm=s["paradigm"],
        scenario=s["scenario"],
        codes=codes,
        start=s["start_date"],
        n_days=int(s["n_days"]),
        infections=np.array([s["total_infections"][c] for c in codes]),
        deaths=np.array([s["total_deaths"][c] for c in codes]),
        labels=tuple(labels),
    )


def read_policy_log(directory) -> list:
    """Policy-log entries of a report directory (start days relative to the
    scenario start)."""
    from .orchestrator import PolicyLogEntry

    d = Path(directory)
    start = dt.date.fromisoformat(json.loads((d / "summary.json").read_text())["start_date"])
    fh, reader = _reader(d / "policy_log.csv", POLICY_LOG_COLUMNS)
    out = []
    with fh:
        for row in reader:
            out.append(PolicyLogEntry(
                cycle=int(row["cycle"]),
                start=(dt.date.fromisoformat(row["start_date"]) - start).days,
                destination=row["acting_region"],
                origin=row["origin_region"] or None,
                action_type=row["action_type"],
                parameters=row["parameters"],
                label=row["policy_type_label"],
                baseline_inflow=float(row["baseline_inflow"]),
                repaired=row["repaired"] == "1",
                fallback=row["fallback"] == "1",
            ))
    return out


def load_attribution_dataset(directory):
    """Attribution rows rebuilt from a written report."""
    from .attribution import dataset_from_log

    d = Path(directory)
    codes = json.loads((d / "summary.json").read_text())["regions"]
    traj = read_trajectory(d / "trajectory.csv")
    states = np.stack([np.column_stack([traj[c][k] for k in COMPARTMENTS]) for c in codes], axis=1)
    return dataset_from_log(codes, states, read_policy_log(d))
