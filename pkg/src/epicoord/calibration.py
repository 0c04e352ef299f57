"""Fitting piecewise-constant epidemic rates to observed cumulative series.

The fit minimizes squared errors of simulated daily new-confirmed and
new-death increments against the observed ones (deaths weighted x10), one
calibration window at a time, over the coupled multi-region simulation.
Rates live in an unconstrained (logit-transformed) space so bounds and
beta_Q < beta_I hold by construction.
"""
from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from . import kernels
from .scenario import EpiParams, MobilitySchedule

log = logging.getLogger(__name__)

MIN_WINDOW_DAYS = 14
DEATH_WEIGHT = 10.0


class CalibrationError(ValueError):
    pass


@dataclass(eq=False)
class ObservedSeries:
    """Per-region daily cumulative counts, arrays shaped ``(days, regions)``."""

    start: dt.date
    codes: tuple
    confirmed: np.ndarray
    deaths: np.ndarray
    recovered: np.ndarray
    filled: np.ndarray | None = None
    n_repairs: int = 0
    n_filled: int = 0
    centroids: dict = field(default_factory=dict)

    def __post_init__(self):
        self.codes = tuple(self.codes)
        for name in ("confirmed", "deaths", "recovered"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim == 1:
                arr = arr[:, None]
            setattr(self, name, arr)
        if self.filled is None:
            self.filled = np.zeros(self.confirmed.shape, dtype=bool)

    @property
    def n_days(self) -> int:
        return self.confirmed.shape[0]

    @property
    def active(self) -> np.ndarray:
        return np.maximum(self.confirmed - self.recovered - self.deaths, 0.0)

    def check(self) -> None:
        for name in ("confirmed", "deaths", "recovered"):
            arr = getattr(self, name)
            if arr.shape != (self.n_days, len(self.codes)):
                raise CalibrationError(f"{name} has shape {arr.shape}")
            if np.any(np.diff(arr, axis=0) < 0):
                raise CalibrationError(f"cumulative {name} series must be nondecreasing")

    @classmethod
    def from_trajectory(cls, traj) -> ObservedSeries:
        """What a surveillance system would report for a simulated run:
        cumulative confirmed, deaths, and recoveries inferred as the
        confirmed cases no longer in Q."""
        confirmed = traj.confirmed.copy()
        deaths = traj.compartment("D").copy()
        recovered = np.maximum.accumulate(np.maximum(confirmed - traj.compartment("Q") - deaths, 0.0), axis=0)
        return cls(traj.start, traj.codes, confirmed, deaths, recovered)


@dataclass(frozen=True)
class Bounds:
    beta: tuple = (0.0, 1.0)
    sigma: tuple = (1.0 / 14.0, 0.5)
    delta: tuple = (0.0, 1.0)
    gamma: tuple = (1.0 / 30.0, 1.0 / 3.0)
    mu: tuple = (0.0, 0.05)


DEFAULT_GUESS = np.array([0.3, 0.1, 0.2, 0.1, 0.1, 0.01])


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _logit(p):
    p = np.clip(p, 1e-9, 1 - 1e-9)
    return np.log(p / (1.0 - p))


def _scale(lo_hi, u):
    lo, hi = lo_hi
    return lo + (hi - lo) * u


def _unscale(lo_hi, x):
    lo, hi = lo_hi
    return (x - lo) / (hi - lo) if hi > lo else 0.5


def decode(z, bounds: Bounds = Bounds()) -> np.ndarray:
    """Unconstrained 6-vector to rates.

    beta_Q is ``r * beta_I`` with ``r`` in (0, 1), and delta is a share of the
    room left by gamma and mu so the daily exits from I never exceed one.
    """
    u = _sigmoid(np.asarray(z, dtype=float))
    beta_i = _scale(bounds.beta, u[0])
    beta_q = u[1] * beta_i
    sigma = _scale(bounds.sigma, u[2])
    gamma = _scale(bounds.gamma, u[4])
    mu = _scale(bounds.mu, u[5])
    room = min(bounds.delta[1], 1.0 - gamma - mu)
    delta = bounds.delta[0] + max(room - bounds.delta[0], 0.0) * u[3]
    return np.array([beta_i, beta_q, sigma, delta, gamma, mu])


def encode(p, bounds: Bounds = Bounds()) -> np.ndarray:
    beta_i, beta_q, sigma, delta, gamma, mu = (float(v) for v in p)
    room = min(bounds.delta[1], 1.0 - gamma - mu)
    u = [
        _unscale(bounds.beta, beta_i),
        beta_q / beta_i if beta_i > 0 else 0.5,
        _unscale(bounds.sigma, sigma),
        (delta - bounds.delta[0]) / (room - bounds.delta[0]) if room > bounds.delta[0] else 0.5,
        _unscale(bounds.gamma, gamma),
        _unscale(bounds.mu, mu),
    ]
    return _logit(np.array(u))


def initial_state(observed: ObservedSeries, population, exposed_factor=2.0, infected_factor=1.0, day=0):
    """Seed the unobserved compartments from the reported counts on ``day``.

    E is ``exposed_factor`` times the active cases and I ``infected_factor``
    times; Q, R and D come straight from the report.
    """
    pop = np.asarray(population, dtype=float)
    active = observed.active[day]
    x0 = np.zeros((len(observed.codes), 6))
    x0[:, 1] = exposed_factor * active
    x0[:, 2] = infected_factor * active
    x0[:, 3] = active
    x0[:, 4] = observed.recovered[day]
    x0[:, 5] = observed.deaths[day]
    x0[:, 0] = pop - x0[:, 1:].sum(axis=1)
    if np.any(x0[:, 0] < 0):
        bad = [c for c, v in zip(observed.codes, x0[:, 0]) if v < 0]
        raise CalibrationError(f"population too small for reported counts in {bad}")
    return x0


def _flow_array(flows, observed: ObservedSeries, n_days: int) -> np.ndarray:
    if isinstance(flows, MobilitySchedule):
        lo = flows.day_of(observed.start)
        arr = flows.flows[lo : lo + n_days]
    else:
        arr = np.asarray(flows, dtype=float)[:n_days]
    if arr.shape[0] < n_days:
        raise CalibrationError(f"flows cover {arr.shape[0]} days, need {n_days}")
    return arr


def _sse(x0, cum0, flows, daily, obs_dc, obs_dd, weight):
    states, cum, status, _ = kernels.run_days(x0, cum0, flows, daily, np.zeros_like(flows))
    if status[0] != kernels.OK:
        return np.inf, None
    dc = np.diff(cum, axis=0) - obs_dc
    dd = np.diff(states[:, :, 5], axis=0) - obs_dd
    return float(np.sum(dc * dc) + weight * np.sum(dd * dd)), states


def loss(params, observed: ObservedSeries, flows, population=None, *, x0=None, death_weight=DEATH_WEIGHT,
         exposed_factor=2.0) -> float:
    """Weighted SSE between simulated and observed daily increments.

    ``params`` is an :class:`EpiParams` or a per-region ``(N, 6)`` array.
    Either ``x0`` or ``population`` (to seed it) must be given.
    """
    n_days = observed.n_days - 1
    if n_days < 1:
        raise CalibrationError("window too short")
    if x0 is None:
        if population is None:
            raise CalibrationError("loss needs population or x0")
        x0 = initial_state(observed, population, exposed_factor)
    if isinstance(params, EpiParams):
        daily = params.daily(n_days)
    else:
        daily = np.broadcast_to(np.asarray(params, dtype=float), (n_days, len(observed.codes), 6))
    fl = _flow_array(flows, observed, n_days)
    value, _ = _sse(
        x0, observed.confirmed[0], fl, daily,
        np.diff(observed.confirmed, axis=0), np.diff(observed.deaths, axis=0), death_weight,
    )
    if not np.isfinite(value):
        raise CalibrationError("loss is not finite (simulation unstable for these parameters)")
    return value


@dataclass(eq=False)
class CalibrationResult:
    params: EpiParams
    loss: float
    window_losses: list
    degenerate: list  # (window index, region code)
    unconverged: list  # (window index, region code)
    x0: np.ndarray
    n_evals: int = 0

    @property
    def converged(self) -> bool:
        return not self.unconverged

    def export(self, path, codes, start, n_days) -> None:
        from .io import write_params

        write_params(self.params, codes, start, n_days, path)


def calibrate(
    observed: ObservedSeries,
    flows,
    windows: Sequence[int] = (0,),
    population=None,
    *,
    bounds: Bounds = Bounds(),
    exposed_factor: float = 2.0,
    infected_factor: float = 1.0,
    method: str = "least_squares",
    restarts: int = 3,
    sweeps: int = 2,
    maxiter: int = 2000,
    seed: int = 0,
    death_weight: float = DEATH_WEIGHT,
    x0=None,
) -> CalibrationResult:
    """Fit one rate vector per region and window.

    ``windows`` are day offsets (first must be 0) at which new rates start;
    each window needs at least 14 daily increments. ``method`` is
    ``"least_squares"`` (all regions of a window at once, trust-region on
    the residual vector) or ``"nelder-mead"`` (simplex per region, regions
    refined in turn for ``sweeps`` passes). Both try the default guess plus
    ``restarts`` random starts and keep the best. Fits that stop on the
    iteration cap are listed in ``unconverged`` instead of raising.
    """
    if method not in ("least_squares", "nelder-mead"):
        raise ValueError(f"unknown method {method!r}")
    observed.check()
    n_inc = observed.n_days - 1
    starts = [int(w) for w in windows]
    if not starts or starts[0] != 0 or any(b <= a for a, b in zip(starts, starts[1:])):
        raise CalibrationError("windows must start at 0 and increase strictly")
    ends = starts[1:] + [n_inc]
    for a, b in zip(starts, ends):
        if b - a < MIN_WINDOW_DAYS:
            raise CalibrationError(f"window too short: days {a}..{b} has {b - a} increments, need {MIN_WINDOW_DAYS}")
    n = len(observed.codes)
    if x0 is None:
        if population is None:
            raise CalibrationError("calibrate needs population or x0")
        x0 = initial_state(observed, population, exposed_factor, infected_factor)
    x0 = np.asarray(x0, dtype=float)
    fl_all = _flow_array(flows, observed, n_inc)
    obs_dc = np.diff(observed.confirmed, axis=0)
    obs_dd = np.diff(observed.deaths, axis=0)
    rng = np.random.default_rng(seed)

    values = np.empty((len(starts), n, 6))
    window_losses, degenerate, unconverged = [], [], []
    n_evals = 0
    state = x0.copy()
    cum = observed.confirmed[0].astype(float)
    for w, (a, b) in enumerate(zip(starts, ends)):
        fit = _Window(state, cum, fl_all[a:b], obs_dc[a:b], obs_dd[a:b], death_weight, bounds)
        current = values[w - 1].copy() if w else np.tile(DEFAULT_GUESS, (n, 1))
        dead = [k for k in range(n) if not np.any(fit.dc[:, k] > 0)]
        for k in dead:
            current[k, 0] = current[k, 1] = 0.0
            degenerate.append((w, observed.codes[k]))
            log.warning("window %d region %s: no new cases, transmission fixed at 0", w, observed.codes[k])
        free = [k for k in range(n) if k not in dead]
        if free:
            if method == "least_squares":
                current, evals, ok = fit.joint(current, free, rng, restarts, maxiter)
                if not ok:
                    unconverged.extend((w, observed.codes[k]) for k in free)
            else:
                current, evals, bad = fit.blockwise(current, free, rng, restarts, sweeps, maxiter)
                unconverged.extend((w, observed.codes[k]) for k in bad)
            n_evals += evals
        if any(u[0] == w for u in unconverged):
            log.warning("window %d: optimizer stopped at the iteration cap; keeping best-so-far", w)
        values[w] = current
        v, states, cum_path = fit.simulate(current)
        if not np.isfinite(v):
            raise CalibrationError(f"loss is not finite in window {w}")
        window_losses.append(v)
        state, cum = states[-1], cum_path[-1]

    return CalibrationResult(
        params=EpiParams(values, tuple(starts)),
        loss=float(sum(window_losses)),
        window_losses=window_losses,
        degenerate=degenerate,
        unconverged=unconverged,
        x0=x0,
        n_evals=n_evals,
    )


class _Window:
    """Objective plumbing for one calibration window."""

    def __init__(self, x0, cum0, flows, dc, dd, weight, bounds):
        self.x0, self.cum0, self.flows = x0, cum0, np.ascontiguousarray(flows)
        self.dc, self.dd = dc, dd
        self.weight, self.bounds = weight, bounds
        self.days, self.n = dc.shape
        self.zeros = np.zeros_like(self.flows)
        self.sqrt_w = np.sqrt(weight)

    def simulate(self, P):
        daily = np.ascontiguousarray(np.broadcast_to(P, (self.days, self.n, 6)))
        states, cum, status, _ = kernels.run_days(self.x0, self.cum0, self.flows, daily, self.zeros)
        if status[0] != kernels.OK:
            return np.inf, None, None
        r1 = np.diff(cum, axis=0) - self.dc
        r2 = np.diff(states[:, :, 5], axis=0) - self.dd
        return float(np.sum(r1 * r1) + self.weight * np.sum(r2 * r2)), states, cum

    def residuals(self, P):
        daily = np.ascontiguousarray(np.broadcast_to(P, (self.days, self.n, 6)))
        states, cum, status, _ = kernels.run_days(self.x0, self.cum0, self.flows, daily, self.zeros)
        if status[0] != kernels.OK:
            return None
        r1 = np.diff(cum, axis=0) - self.dc
        r2 = np.diff(states[:, :, 5], axis=0) - self.dd
        return np.concatenate([r1.ravel(), self.sqrt_w * r2.ravel()])

    def _decode_into(self, current, free, z):
        P = current.copy()
        for j, k in enumerate(free):
            P[k] = decode(z[6 * j : 6 * j + 6], self.bounds)
        return P

    def joint(self, current, free, rng, restarts, maxiter):
        from scipy.optimize import least_squares

        # penalty residuals for unstable trials, scaled to the data
        penalty = 1e3 * (1.0 + float(np.abs(self.dc).max()) + float(np.abs(self.dd).max()))
        size = 2 * self.days * self.n

        def fun(z):
            r = self.residuals(self._decode_into(current, free, z))
            return np.full(size, penalty) if r is None else r

        z0 = np.concatenate([encode(current[k], self.bounds) for k in free])
        best, evals = None, 0
        for attempt in range(restarts + 1):
            z = z0 if attempt == 0 else z0 + rng.normal(0.0, 1.0, z0.size)
            res = least_squares(fun, z, method="trf", xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=maxiter)
            evals += res.nfev
            if best is None or res.cost < best.cost:
                best = res
        return self._decode_into(current, free, best.x), evals, best.status > 0

    def blockwise(self, current, free, rng, restarts, sweeps, maxiter):
        norm = float(np.sum(self.dc ** 2) + self.weight * np.sum(self.dd ** 2)) + 1.0
        current = current.copy()
        evals, bad = 0, set()
        for sweep in range(sweeps):
            for k in free:
                def objective(z, k=k):
                    trial = current.copy()
                    trial[k] = decode(z, self.bounds)
                    v = self.simulate(trial)[0]
                    return v / norm if np.isfinite(v) else 1e30

                z_cur = encode(current[k], self.bounds)
                inits = [z_cur] + [z_cur + rng.normal(0.0, 1.0, 6) for _ in range(restarts if sweep == 0 else 0)]
                best = None
                for z in inits:
                    res = minimize(objective, z, method="Nelder-Mead",
                                   options={"maxiter": maxiter, "xatol": 1e-9, "fatol": 1e-16, "adaptive": True})
                    evals += res.nfev
                    if best is None or res.fun < best.fun:
                        best = res
                current[k] = decode(best.x, self.bounds)
                if sweep == sweeps - 1 and not best.success:
                    bad.add(k)
        return current, evals, sorted(bad)
