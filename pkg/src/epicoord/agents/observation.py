"""Per-agent observations built from the simulated trajectory so far."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import rt as rtmod
from ..dynamics import Trajectory
from ..scenario import ScenarioConfig

HISTORY_DAYS = 21
TREND_DAYS = 7
RT_WINDOW = 21


@dataclass(frozen=True)
class RegionSummary:
    code: str
    state: tuple  # S, E, I, Q, R, D
    population: float
    ir: float  # mean over the last TREND_DAYS days
    dr: float
    acr: float
    ir_trend: float  # recent IR mean / preceding IR mean
    rt_mean: float | None

    @property
    def trend_sign(self) -> int:
        if self.ir_trend > 1.0 + 1e-9:
            return 1
        if self.ir_trend < 1.0 - 1e-9:
            return -1
        return 0


@dataclass(frozen=True)
class Observation:
    region: str
    cycle: int
    day: int
    strategy: str
    horizon_weeks: int
    cycle_days: int
    local: RegionSummary
    neighbors: tuple
    history_days: int
    hist_total: dict = field(default_factory=dict)
    hist_avg: dict = field(default_factory=dict)
    projected_weekly: dict = field(default_factory=dict)
    projected_avg: dict = field(default_factory=dict)

    @property
    def short_history(self) -> bool:
        return self.history_days < HISTORY_DAYS

    @property
    def origins(self) -> tuple:
        return tuple(self.projected_avg)

    def summary(self, code: str) -> RegionSummary:
        if code == self.region:
            return self.local
        for s in self.neighbors:
            if s.code == code:
                return s
        raise KeyError(code)


def _summarize(traj: Trajectory, k: int, day: int, eps: float) -> RegionSummary:
    x = traj.states[day, k]
    pop = float(x[:5].sum())
    conf = traj.confirmed[: day + 1, k]
    deaths = traj.states[: day + 1, k, 5]
    living = traj.states[: day + 1, k, :5].sum(axis=1)
    new_conf = np.diff(conf)
    ir_daily = new_conf / np.where(living[:-1] > 0, living[:-1], np.nan)
    dr_daily = np.diff(deaths) / np.where(living[:-1] > 0, living[:-1], np.nan)
    recent = ir_daily[-TREND_DAYS:]
    before = ir_daily[-2 * TREND_DAYS : -TREND_DAYS]
    ir = float(recent.mean()) if recent.size else 0.0
    dr = float(dr_daily[-TREND_DAYS:].mean()) if dr_daily.size else 0.0
    if recent.size and before.size:
        trend = (ir + eps) / (float(before.mean()) + eps)
    else:
        trend = 1.0
    rt_mean = None
    if new_conf.size:
        est = rtmod.estimate_rt(new_conf, window=min(RT_WINDOW, new_conf.size), eps=eps)
        rt_mean = float(est.mean[-1])
    return RegionSummary(
        code=traj.codes[k],
        state=tuple(float(v) for v in x),
        population=pop,
        ir=ir,
        dr=dr,
        acr=float(x[3] / pop) if pop > 0 else 0.0,
        ir_trend=float(trend),
        rt_mean=rt_mean,
    )


def summarize_all(traj: Trajectory, day: int, eps: float = 1e-9) -> dict:
    return {traj.codes[k]: _summarize(traj, k, day, eps) for k in range(len(traj.codes))}


def build_observation(
    traj: Trajectory,
    realized_flows,
    config: ScenarioConfig,
    region: str,
    cycle: int,
    day: int,
    summaries: dict | None = None,
) -> Observation:
    """Observation for ``region`` at the start of the cycle beginning on ``day``.

    History averages use the trailing 21 realized days (fewer if the run is
    younger); projections come from the not-yet-enacted schedule for the
    upcoming cycle.
    """
    if day > traj.n_days:
        raise ValueError(f"cycle start day {day} lies beyond the simulated trajectory ({traj.n_days})")
    i = config.index(region)
    codes = config.codes
    flows = np.asarray(realized_flows, dtype=float)
    summaries = summaries or summarize_all(traj, day, config.eps)

    lo = max(0, day - HISTORY_DAYS)
    hist = flows[lo:day, :, i]
    n_hist = day - lo
    length = config.cycle_days
    upcoming = flows[day : day + length, :, i]
    n_weeks = -(-length // 7)

    hist_total, hist_avg, proj_weekly, proj_avg = {}, {}, {}, {}
    for j, code in enumerate(codes):
        if j == i:
            continue
        total = float(hist[:, j].sum())
        hist_total[code] = total
        hist_avg[code] = total / n_hist if n_hist else 0.0
        series = upcoming[:, j]
        padded = np.zeros(n_weeks * 7)
        padded[: series.size] = series
        proj_weekly[code] = tuple(float(v) for v in padded.reshape(n_weeks, 7).sum(axis=1))
        proj_avg[code] = float(series.mean()) if series.size else 0.0

    return Observation(
        region=region,
        cycle=cycle,
        day=day,
        strategy=config.strategy,
        horizon_weeks=config.horizon_weeks,
        cycle_days=length,
        local=summaries[region],
        neighbors=tuple(summaries[c] for c in codes if c != region),
        history_days=n_hist,
        hist_total=hist_total,
        hist_avg=hist_avg,
        projected_weekly=proj_weekly,
        projected_avg=proj_avg,
    )
