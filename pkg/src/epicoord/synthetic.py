"""Synthetic five-region scenario with one planted high-risk origin.

Region ``CE`` starts with a fast outbreak that peaks shortly after the
warm-up, and sends the largest travel volumes to the other four regions,
whose own epidemics are slow. Travel follows a weekday/weekend rhythm with
seeded multiplicative jitter.
"""
from __future__ import annotations

import datetime as dt
from importlib import resources
from pathlib import Path

import numpy as np

from .scenario import (
    COMPARTMENTS,
    PARAM_NAMES,
    EpiParams,
    MobilitySchedule,
    RegionId,
    ScenarioConfig,
    validate_scenario,
)

CODES = ("NO", "EA", "CE", "WE", "SO")
HOT = "CE"
START = dt.date(2020, 3, 1)
WARMUP_DAYS = 21
HORIZON_WEEKS = 6

_POP = np.array([3.0e6, 2.5e6, 4.0e6, 2.0e6, 3.5e6])
_LATLON = ((44.0, -93.0), (40.5, -75.0), (39.0, -90.0), (37.0, -120.0), (31.0, -97.0))


def build_scenario(seed: int = 0, n_cycles: int = 1) -> ScenarioConfig:
    """The planted scenario; ``seed`` jitters rates, seeds and flows.

    Seed 0 is the variant shipped as ``data/synthetic5``.
    """
    rng = np.random.default_rng(seed)
    n = len(CODES)
    hot = CODES.index(HOT)
    n_days = WARMUP_DAYS + 7 * HORIZON_WEEKS * n_cycles

    beta_i = np.full(n, 0.30) * rng.uniform(0.9, 1.1, n)
    beta_i[hot] = 0.70 * rng.uniform(0.95, 1.05)
    values = np.column_stack([
        beta_i,
        0.2 * beta_i,
        np.full(n, 0.25),
        np.full(n, 0.12),
        np.full(n, 0.10),
        np.full(n, 0.004),
    ])
    values = np.round(values, 6)

    infected = np.round(_POP * 2e-5 * rng.uniform(0.5, 1.5, n))
    infected[hot] = round(_POP[hot] * 1e-3 * rng.uniform(0.9, 1.1))
    initial = np.zeros((n, 6))
    initial[:, 1] = 2 * infected
    initial[:, 2] = infected
    initial[:, 3] = np.round(0.5 * infected)
    initial[:, 0] = _POP - initial[:, 1:].sum(axis=1)

    # daily base volumes: the hot origin dominates every destination's inflow
    base = np.outer(_POP, np.ones(n)) * 5e-4
    base[hot] *= 6.0
    np.fill_diagonal(base, 0.0)
    weekday = np.array([1.0, 1.0, 1.0, 1.0, 1.1, 1.3, 0.8])
    days = np.arange(n_days)
    flows = base[None] * weekday[days % 7][:, None, None]
    flows = flows * rng.lognormal(0.0, 0.05, flows.shape)
    flows = np.round(flows, 1)
    for t in range(n_days):
        np.fill_diagonal(flows[t], 0.0)

    regions = tuple(RegionId(c, k, *_LATLON[k]) for k, c in enumerate(CODES))
    return validate_scenario(ScenarioConfig(
        regions=regions,
        initial=initial,
        params=EpiParams(values[None], (0,)),
        mobility=MobilitySchedule(START, CODES, flows),
        start_date=START,
        end_date=START + dt.timedelta(days=n_days),
        horizon_weeks=HORIZON_WEEKS,
        strategy="tir",
        warmup_days=WARMUP_DAYS,
        seed=seed,
        backends={c: "expert" for c in CODES},
        rounds=2,
        name="synthetic5" if seed == 0 else f"synthetic5-s{seed}",
    ))


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, dt.date):
        return v.isoformat()
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def write_scenario(config: ScenarioConfig, directory, flows_name: str = "flows.csv") -> Path:
    """Write ``scenario.toml`` plus the flow CSV; returns the TOML path.

    Only constant-rate scenarios are supported here.
    """
    from .io import write_flows

    if len(config.params.starts) != 1:
        raise ValueError("write_scenario handles constant parameters only")
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    iv = config.interventions
    lines = [
        "[scenario]",
        f"name = {_toml_value(config.name)}",
        f"start_date = {_toml_value(config.start_date)}",
        f"end_date = {_toml_value(config.end_date)}",
        f"horizon_weeks = {config.horizon_weeks}",
        f"strategy = {_toml_value(config.strategy)}",
        f"warmup_days = {config.warmup_days}",
        f"seed = {config.seed}",
        f"communication_rounds = {config.rounds}",
        f"eps = {_toml_value(config.eps)}",
        "",
        "[mobility]",
        f"file = {_toml_value(flows_name)}",
        "",
        "[interventions]",
        f"sis_factor = {_toml_value(iv.sis_factor)}",
        f"sis_redistribute = {_toml_value(iv.sis_redistribute)}",
        f"tis_eta = {_toml_value(iv.tis_eta)}",
        f"window_days = {iv.window_days}",
        "",
        "[calendar]",
        "cycle_starts = [" + ", ".join(_toml_value(config.date(s)) for s in config.cycle_starts) + "]",
    ]
    confirmed = config.confirmed0()
    for k, r in enumerate(config.regions):
        lines += ["", "[[regions]]", f"code = {_toml_value(r.code)}"]
        if r.lat is not None:
            lines += [f"lat = {_toml_value(float(r.lat))}", f"lon = {_toml_value(float(r.lon))}"]
        lines += [f"{c} = {_toml_value(config.initial[k, i])}" for i, c in enumerate(COMPARTMENTS)]
        if config.initial_confirmed is not None:
            lines.append(f"confirmed = {_toml_value(confirmed[k])}")
        lines += [f"{p} = {_toml_value(config.params.values[0, k, i])}" for i, p in enumerate(PARAM_NAMES)]
        if r.code in config.backends:
            lines.append(f"backend = {_toml_value(config.backends[r.code])}")
    path = out / "scenario.toml"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    centroids = {r.code: (r.lat, r.lon) for r in config.regions}
    write_flows(config.mobility, out / flows_name, centroids)
    return path


def shipped_scenario_path() -> Path:
    """Location of the packaged ``synthetic5`` scenario file."""
    return Path(str(resources.files("epicoord") / "data" / "synthetic5" / "scenario.toml"))
