"""Discrete-time SEIQRD metapopulation simulator with mobility coupling."""
from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .scenario import COMPARTMENTS, CompartmentState, EpiParams, MobilitySchedule, ScenarioConfig

log = logging.getLogger(__name__)


class DegenerateRegionError(ValueError):
    """A region with zero living population was used as a divisor."""


class InstabilityError(RuntimeError):
    def __init__(self, message, day=None, region=None):
        super().__init__(message)
        self.day = day
        self.region = region


@dataclass(eq=False)
class Trajectory:
    """Daily snapshots of every region plus the flows actually applied.

    ``states`` is ``(T + 1, N, 6)``, ``confirmed`` the cumulative count of
    people who entered Q (detections plus screened travellers), and ``flows``
    the ``(T, N, N)`` realized mobility.
    """

    start: dt.date
    codes: tuple[str, ...]
    states: np.ndarray
    confirmed: np.ndarray
    flows: np.ndarray
    n_capped: int = 0

    @property
    def n_days(self) -> int:
        return self.states.shape[0] - 1

    def date(self, day: int) -> dt.date:
        return self.start + dt.timedelta(days=day)

    def state(self, day: int, region: int) -> CompartmentState:
        return CompartmentState.from_array(self.states[day, region])

    def compartment(self, name: str) -> np.ndarray:
        return self.states[:, :, COMPARTMENTS.index(name)]

    def living(self) -> np.ndarray:
        return self.states[:, :, :5].sum(axis=2)

    def totals(self) -> np.ndarray:
        """Whole-system population (all six compartments) per day."""
        return self.states.sum(axis=(1, 2))

    def extend(self, other: Trajectory) -> Trajectory:
        """Append a continuation whose first snapshot equals our last one."""
        return Trajectory(
            self.start,
            self.codes,
            np.concatenate([self.states, other.states[1:]]),
            np.concatenate([self.confirmed, other.confirmed[1:]]),
            np.concatenate([self.flows, other.flows]),
            self.n_capped + other.n_capped,
        )


def force_of_infection(state: CompartmentState, beta_I: float, beta_Q: float) -> float:
    n = state.living
    if n <= 0:
        raise DegenerateRegionError("living population is zero; force of infection undefined")
    return beta_I * state.I / n + beta_Q * state.Q / n


def _raise_for_status(status, codes, offset, start):
    code, day, region = (int(v) for v in status)
    if code == kernels.OK:
        return
    when = f"day {offset + day}"
    if start is not None:
        when += f" ({start + dt.timedelta(days=offset + day)})"
    if code == kernels.ERR_DEGENERATE:
        raise DegenerateRegionError(
            f"region {codes[region]} has zero living population but positive outflow on {when}"
        )
    raise InstabilityError(
        f"compartment of region {codes[region]} driven below zero on {when}", day=offset + day, region=region
    )


def run(
    x0,
    flows,
    params,
    screening=None,
    confirmed0=None,
    *,
    codes=None,
    start=None,
    day_offset=0,
    tol=1e-9,
):
    """Integrate from ``x0`` over ``len(flows)`` days.

    ``params`` is either an :class:`EpiParams` (indexed from ``day_offset``)
    or a ready ``(T, N, 6)`` array. Returns a :class:`Trajectory`.
    """
    x0 = np.asarray(x0, dtype=float)
    flows = np.asarray(flows, dtype=float)
    n_days, n = flows.shape[0], x0.shape[0]
    if codes is None:
        codes = tuple(str(k) for k in range(n))
    if isinstance(params, EpiParams):
        daily = params.daily(n_days, day_offset)
    else:
        daily = np.broadcast_to(np.asarray(params, dtype=float), (n_days, n, 6))
    if screening is None:
        screening = np.zeros_like(flows)
    if confirmed0 is None:
        confirmed0 = x0[:, 3]
    states, cum, status, n_capped = kernels.run_days(x0, confirmed0, flows, daily, screening, tol)
    _raise_for_status(status, codes, day_offset, start)
    if n_capped:
        log.warning("outflow capped on %d region-days to keep compartments nonnegative", n_capped)
    return Trajectory(start or dt.date(1970, 1, 1), tuple(codes), states, cum, flows.copy(), int(n_capped))


def step(states, flows, params, screening=None, tol=1e-9):
    """One synchronous day update of all regions.

    ``states`` is ``(N, 6)``, ``flows`` ``(N, N)`` and ``params`` ``(N, 6)``.
    Returns the next ``(N, 6)`` state.
    """
    flows = np.asarray(flows, dtype=float)[None]
    scr = None if screening is None else np.asarray(screening, dtype=float)[None]
    return run(states, flows, np.asarray(params, dtype=float)[None], scr, tol=tol).states[1]


def simulate(config: ScenarioConfig, realized_flows=None, screening=None) -> Trajectory:
    """Run the whole scenario date range under the given (or baseline) flows."""
    if realized_flows is None:
        flows = config.baseline_flows()
    elif isinstance(realized_flows, MobilitySchedule):
        lo = realized_flows.day_of(config.start_date)
        flows = realized_flows.flows[lo : lo + config.n_days]
    else:
        flows = np.asarray(realized_flows, dtype=float)
    if flows.shape[0] != config.n_days:
        raise ValueError(f"flows cover {flows.shape[0]} days, scenario has {config.n_days}")
    return run(
        config.initial,
        flows,
        config.params,
        screening,
        config.confirmed0(),
        codes=config.codes,
        start=config.start_date,
    )
