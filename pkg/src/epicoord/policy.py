"""Mobility interventions: temporal reallocation (TIR), inflow suppression
(SIS) and inbound screening (TIS), plus TIR policy-type labels."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .scenario import MobilitySchedule

log = logging.getLogger(__name__)

TIR_FLOOR = 1e-4
_SUM_TOL = 1e-12
_THRESHOLD_TOL = 1e-9


class ActionError(ValueError):
    """An action cannot be repaired into a valid one."""


class PolicyType(str, enum.Enum):
    STRICT_FIRST = "StrictFirst"
    RELAXED_FIRST = "RelaxedFirst"
    BALANCED = "Balanced"


@dataclass(frozen=True, eq=False)
class TirAllocation:
    fractions: np.ndarray
    repaired: bool = False

    @property
    def horizon(self) -> int:
        return len(self.fractions)

    def __eq__(self, other):
        return isinstance(other, TirAllocation) and np.array_equal(self.fractions, other.fractions)

    def tolist(self) -> list[float]:
        return [float(v) for v in self.fractions]


@dataclass(frozen=True)
class TirAction:
    """Weekly inbound allocations chosen by ``destination`` per origin code."""

    destination: str
    allocations: Mapping[str, TirAllocation]

    @property
    def repaired(self) -> bool:
        return any(a.repaired for a in self.allocations.values())


@dataclass(frozen=True)
class SisOrder:
    destination: str
    origin: str
    factor: float = 0.5
    start: int = 0
    window: int = 14
    redistribute: bool = True

    def __post_init__(self):
        if not 0 < self.factor <= 1:
            raise ActionError("suppression factor must lie in (0, 1]")
        if self.window < 1:
            raise ActionError("suppression window must be at least one day")


@dataclass(frozen=True)
class TisOrder:
    destination: str
    origin: str
    start: int = 0
    window: int = 14
    eta: float = 1.0

    def __post_init__(self):
        if not 0 <= self.eta <= 1:
            raise ActionError("screening efficacy must lie in [0, 1]")
        if self.window < 1:
            raise ActionError("screening window must be at least one day")


@dataclass(frozen=True)
class NoAction:
    destination: str
    reason: str = ""


PolicyAction = TirAction | SisOrder | TisOrder | NoAction


def normalize_tir(raw) -> TirAllocation:
    """Repair a raw fraction vector into a strictly positive simplex point.

    Nonpositive entries are floored at ``TIR_FLOOR`` and the vector is
    rescaled to sum to one. ``repaired`` records whether anything changed.
    """
    x = np.asarray(raw, dtype=float).ravel()
    if x.size == 0 or not np.all(np.isfinite(x)):
        raise ActionError("allocation must be a nonempty finite vector")
    if not np.any(x > 0):
        raise ActionError("allocation has no positive entry")
    repaired = False
    if np.any(x <= 0):
        x = np.where(x <= 0, TIR_FLOOR, x)
        repaired = True
    total = x.sum()
    if abs(total - 1.0) > _SUM_TOL:
        x = x / total
        repaired = True
        if np.any(x <= 0):  # tiny positives can underflow in the rescale
            x = np.maximum(x, TIR_FLOOR)
            x = x / x.sum()
    return TirAllocation(x, repaired)


def uniform_allocation(horizon: int) -> TirAllocation:
    return TirAllocation(np.full(horizon, 1.0 / horizon))


def _as_array(flows):
    if isinstance(flows, MobilitySchedule):
        return flows.flows
    return np.asarray(flows, dtype=float)


def _wrap_like(template, flows):
    if isinstance(template, MobilitySchedule):
        return MobilitySchedule(template.start, template.codes, flows)
    return flows


def apply_tir(baseline, destination: int, allocations: Mapping[int, TirAllocation], start: int, horizon_weeks: int):
    """Reshape inbound flows into ``destination`` over one reallocation cycle.

    For each origin the cycle total ``M`` is kept; week ``h`` receives
    ``p_h * M``, spread over its days in proportion to the baseline's own
    within-week profile (evenly if the baseline week is empty).
    """
    base = _as_array(baseline)
    n_days = 7 * horizon_weeks
    if start < 0 or start + n_days > base.shape[0]:
        raise ActionError(
            f"cycle window days {start}..{start + n_days} misaligned with schedule of {base.shape[0]} days"
        )
    out = base.copy()
    for origin, alloc in allocations.items():
        if origin == destination:
            continue
        p = alloc.fractions
        if len(p) != horizon_weeks:
            raise ActionError(f"allocation has {len(p)} weeks, horizon is {horizon_weeks}")
        series = base[start : start + n_days, origin, destination].reshape(horizon_weeks, 7)
        weekly = series.sum(axis=1)
        total = weekly.sum()
        target = p * total
        shaped = np.where(
            weekly[:, None] > 0,
            series * (target / np.where(weekly > 0, weekly, 1.0))[:, None],
            (target / 7.0)[:, None],
        )
        out[start : start + n_days, origin, destination] = shaped.ravel()
    return _wrap_like(baseline, out)


@dataclass
class SisStats:
    redistributed: float = 0.0
    dropped: float = 0.0
    full_coordination_days: list = field(default_factory=list)


def _check_one_per_destination(orders):
    by_dest = {}
    for o in orders:
        by_dest.setdefault(o.destination, []).append(o)
    for dest, group in by_dest.items():
        group = sorted(group, key=lambda o: o.start)
        for a, b in zip(group, group[1:]):
            if b.start < a.start + a.window:
                raise ActionError(f"overlapping contradictory orders for destination {dest}")


def apply_sis(baseline, orders: Iterable[SisOrder], index: Mapping[str, int], stats: SisStats | None = None):
    """Suppress targeted origin->destination flows, optionally spilling the
    removed volume over the origin's other, unrestricted destinations.

    ``index`` maps region codes to matrix positions. Redistribution is
    proportional to same-day baseline flows; when every destination with
    baseline flow from the origin also suppresses it, the volume is dropped.
    """
    orders = list(orders)
    _check_one_per_destination(orders)
    base = _as_array(baseline)
    out = base.copy()
    n_days = base.shape[0]
    stats = stats if stats is not None else SisStats()

    # day -> origin -> [(destination, factor, redistribute)]
    active: dict[int, dict[int, list]] = {}
    for o in orders:
        if o.start < 0 or o.start + o.window > n_days:
            raise ActionError(f"suppression window days {o.start}..{o.start + o.window} outside schedule")
        j, i = index[o.origin], index[o.destination]
        if i == j:
            raise ActionError("a region cannot suppress itself")
        for t in range(o.start, o.start + o.window):
            active.setdefault(t, {}).setdefault(j, []).append((i, o.factor, o.redistribute))

    for t, per_origin in sorted(active.items()):
        for j, targets in per_origin.items():
            restricted = {i for i, _, _ in targets}
            spill = 0.0
            for i, factor, redistribute in targets:
                removed = base[t, j, i] * (1.0 - factor)
                out[t, j, i] = base[t, j, i] * factor
                if redistribute:
                    spill += removed
                else:
                    stats.dropped += removed
            if spill <= 0.0:
                continue
            weights = base[t, j].copy()
            weights[j] = 0.0
            weights[list(restricted)] = 0.0
            wsum = weights.sum()
            if wsum > 0.0:
                out[t, j] += spill * weights / wsum
                stats.redistributed += spill
            else:
                stats.dropped += spill
                stats.full_coordination_days.append((t, j))
    if stats.full_coordination_days:
        log.info("suppressed volume dropped on %d origin-days (every alternative restricted)",
                 len(stats.full_coordination_days))
    return _wrap_like(baseline, out)


def compile_tis(orders: Iterable[TisOrder], index: Mapping[str, int], n_days: int, n_regions: int, out=None):
    """Screening calendar ``eta[t, origin, destination]`` for the simulator."""
    orders = list(orders)
    _check_one_per_destination(orders)
    eta = np.zeros((n_days, n_regions, n_regions)) if out is None else out
    for o in orders:
        if o.start < 0 or o.start + o.window > n_days:
            raise ActionError(f"screening window days {o.start}..{o.start + o.window} outside schedule")
        j, i = index[o.origin], index[o.destination]
        if i == j:
            raise ActionError("a region cannot screen itself")
        eta[o.start : o.start + o.window, j, i] = o.eta
    return eta


def phase_sums(fractions) -> np.ndarray:
    """Early/middle/late shares of a horizon split into thirds (larger first)."""
    p = np.asarray(fractions, dtype=float)
    if len(p) < 3:
        raise ActionError(f"horizon of {len(p)} weeks has no early/middle/late phase mapping")
    return np.array([chunk.sum() for chunk in np.array_split(p, 3)])


def classify_policy(allocation) -> PolicyType:
    fractions = allocation.fractions if isinstance(allocation, TirAllocation) else allocation
    early, _, late = phase_sums(fractions)
    if early <= 0.3 + _THRESHOLD_TOL and late >= 0.4 - _THRESHOLD_TOL:
        return PolicyType.STRICT_FIRST
    if early >= 0.4 - _THRESHOLD_TOL and late <= 0.3 + _THRESHOLD_TOL:
        return PolicyType.RELAXED_FIRST
    return PolicyType.BALANCED


def phase_template(horizon: int, shares=(0.1, 0.3, 0.6)) -> np.ndarray:
    """Allocation putting ``shares`` on the early/middle/late thirds, spread
    evenly inside each third. The default is back-loaded (strict-first)."""
    sizes = [len(c) for c in np.array_split(np.arange(horizon), 3)]
    if min(sizes) == 0:
        raise ActionError(f"horizon of {horizon} weeks has no early/middle/late phase mapping")
    return np.concatenate([np.full(k, s / k) for k, s in zip(sizes, shares)])
