"""Evaluation metrics: daily rates, equity of improvements, forecasting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import Trajectory
from .scenario import DEFAULT_EPS


class MetricRangeError(IndexError):
    pass


class EquityUndefined(ValueError):
    """All improvements are zero, so their dispersion is meaningless."""


def _population(traj: Trajectory, region: int, day: int) -> float:
    return float(traj.states[day, region, :5].sum())


def incidence_rate(traj: Trajectory, region: int, day: int) -> float:
    """New confirmed cases on ``day -> day + 1`` per living inhabitant.

    New confirmed counts come from the cumulative-confirmed counter, i.e.
    everyone entering Q, so the rate cannot go negative when Q drains.
    """
    if not 0 <= day < traj.n_days:
        raise MetricRangeError(f"IR undefined on day {day}: needs day + 1 <= {traj.n_days}")
    return float(traj.confirmed[day + 1, region] - traj.confirmed[day, region]) / _population(traj, region, day)


def death_rate(traj: Trajectory, region: int, day: int) -> float:
    if not 0 <= day < traj.n_days:
        raise MetricRangeError(f"DR undefined on day {day}: needs day + 1 <= {traj.n_days}")
    d = traj.states[:, region, 5]
    return float(d[day + 1] - d[day]) / _population(traj, region, day)


def active_case_rate(traj: Trajectory, region: int, day: int) -> float:
    if not 0 <= day <= traj.n_days:
        raise MetricRangeError(f"ACR undefined on day {day}")
    return float(traj.states[day, region, 3]) / _population(traj, region, day)


def rate_series(traj: Trajectory) -> dict[str, np.ndarray]:
    """IR, DR and ACR for every region; IR/DR are ``(T, N)``, ACR ``(T+1, N)``."""
    living = traj.living()
    safe = np.where(living > 0, living, np.nan)
    return {
        "IR": np.diff(traj.confirmed, axis=0) / safe[:-1],
        "DR": np.diff(traj.states[:, :, 5], axis=0) / safe[:-1],
        "ACR": traj.states[:, :, 3] / safe,
    }


def period_means(traj: Trajectory, start: int = 0, end: int | None = None) -> dict[str, np.ndarray]:
    end = traj.n_days if end is None else end
    series = rate_series(traj)
    return {k: v[start:end].mean(axis=0) for k, v in series.items()}


def total_infections(traj: Trajectory) -> np.ndarray:
    """Terminal cumulative confirmed count per region."""
    return traj.confirmed[-1].copy()


def total_deaths(traj: Trajectory) -> np.ndarray:
    return traj.states[-1, :, 5].copy()


@dataclass(frozen=True, eq=False)
class ImprovementVector:
    infections: np.ndarray
    deaths: np.ndarray

    @property
    def infections_clamped(self) -> np.ndarray:
        return np.maximum(self.infections, 0.0)

    @property
    def deaths_clamped(self) -> np.ndarray:
        return np.maximum(self.deaths, 0.0)


def relative_improvement(ground_truth, candidate, eps=DEFAULT_EPS) -> np.ndarray:
    g = np.asarray(ground_truth, dtype=float)
    a = np.asarray(candidate, dtype=float)
    return (g - a) / np.maximum(np.abs(g), eps)


def improvements(gt_inf, gt_dea, inf, dea, eps=DEFAULT_EPS) -> ImprovementVector:
    return ImprovementVector(relative_improvement(gt_inf, inf, eps), relative_improvement(gt_dea, dea, eps))


def gini(x) -> float:
    x = np.sort(np.asarray(x, dtype=float))
    if x.size == 0 or np.any(x < 0):
        raise ValueError("Gini needs a nonempty nonnegative vector")
    total = x.sum()
    if total <= 0:
        raise EquityUndefined("all improvements are zero")
    n = x.size
    r = np.arange(1, n + 1)
    return float(np.sum((2 * r - n - 1) * x) / (n * total))


@dataclass(frozen=True)
class Equity:
    infections: float | None
    deaths: float | None

    @property
    def infections_defined(self) -> bool:
        return self.infections is not None

    @property
    def deaths_defined(self) -> bool:
        return self.deaths is not None


def _equity(x):
    try:
        return 1.0 - gini(x)
    except EquityUndefined:
        return None


def equity_coefficient(improvement: ImprovementVector) -> Equity:
    """``1 - Gini`` of the clamped improvements; ``None`` where undefined."""
    return Equity(_equity(improvement.infections_clamped), _equity(improvement.deaths_clamped))


def forecast_cumulative(series, horizon: int = 180, lookback: int = 14) -> np.ndarray:
    """Extend a cumulative series by its mean increment over the last
    ``lookback`` days; returns the original series followed by the forecast."""
    c = np.asarray(series, dtype=float)
    if c.ndim != 1 or len(c) < lookback + 1:
        raise ValueError(f"series too short: need at least {lookback + 1} points")
    slope = (c[-1] - c[-1 - lookback]) / lookback
    ahead = c[-1] + slope * np.arange(1, horizon + 1)
    return np.concatenate([c, ahead])
