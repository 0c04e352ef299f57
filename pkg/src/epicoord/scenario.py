"""Shared domain types, scenario configuration and validation."""
from __future__ import annotations

import dataclasses
import datetime as dt
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

COMPARTMENTS = ("S", "E", "I", "Q", "R", "D")
PARAM_NAMES = ("beta_I", "beta_Q", "sigma", "delta", "gamma", "mu")
STRATEGIES = ("tir", "sis", "tis")
DEFAULT_EPS = 1e-9

# Transmission rates may exceed 1/day (calibration searches [0, 2]); all other
# rates are per-day probabilities.
# every rate is a daily probability; beta <= 1 also keeps the force of infection <= 1
PARAM_UPPER = {"beta_I": 1.0, "beta_Q": 1.0, "sigma": 1.0, "delta": 1.0, "gamma": 1.0, "mu": 1.0}


class ScenarioError(ValueError):
    """Raised when a scenario violates one of its invariants."""


@dataclass(frozen=True)
class RegionId:
    code: str
    index: int
    lat: float | None = None
    lon: float | None = None


@dataclass(frozen=True)
class CompartmentState:
    S: float
    E: float
    I: float
    Q: float
    R: float
    D: float

    @classmethod
    def from_array(cls, row) -> CompartmentState:
        return cls(*(float(v) for v in row))

    def as_array(self) -> np.ndarray:
        return np.array([self.S, self.E, self.I, self.Q, self.R, self.D], dtype=float)

    @property
    def living(self) -> float:
        return self.S + self.E + self.I + self.Q + self.R

    def check(self) -> None:
        for name in COMPARTMENTS:
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ScenarioError(f"compartment {name} must be finite and nonnegative, got {value}")


@dataclass(eq=False)
class EpiParams:
    """Piecewise-constant per-region epidemic rates.

    ``values[k, i, p]`` holds parameter ``p`` (in :data:`PARAM_NAMES` order)
    for region ``i`` from day ``starts[k]`` until the next start.
    """

    values: np.ndarray
    starts: tuple[int, ...] = (0,)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 2:
            self.values = self.values[None]
        self.starts = tuple(int(s) for s in self.starts)

    @classmethod
    def constant(cls, n_regions: int, **rates) -> EpiParams:
        missing = set(PARAM_NAMES) - set(rates)
        if missing:
            raise ScenarioError(f"missing epidemic parameters: {sorted(missing)}")
        values = np.empty((1, n_regions, 6))
        for p, name in enumerate(PARAM_NAMES):
            values[0, :, p] = np.broadcast_to(np.asarray(rates[name], dtype=float), (n_regions,))
        return cls(values, (0,))

    @property
    def n_regions(self) -> int:
        return self.values.shape[1]

    def segment(self, day: int) -> int:
        return int(np.searchsorted(self.starts, day, side="right")) - 1

    def at(self, day: int) -> np.ndarray:
        return self.values[self.segment(day)]

    def daily(self, n_days: int, offset: int = 0) -> np.ndarray:
        """Expand to a ``(n_days, N, 6)`` array for days ``offset ..``."""
        days = np.arange(offset, offset + n_days)
        seg = np.searchsorted(self.starts, days, side="right") - 1
        return self.values[seg]

    def get(self, name: str) -> np.ndarray:
        return self.values[..., PARAM_NAMES.index(name)]

    def check(self) -> None:
        if not self.starts or self.starts[0] != 0:
            raise ScenarioError("parameter steps must start at day 0")
        if any(b <= a for a, b in zip(self.starts, self.starts[1:])):
            raise ScenarioError("parameter step starts must be strictly increasing")
        if self.values.shape[0] != len(self.starts) or self.values.shape[2] != 6:
            raise ScenarioError(f"parameter array shape {self.values.shape} does not match steps")
        if not np.all(np.isfinite(self.values)):
            raise ScenarioError("epidemic parameters must be finite")
        for p, name in enumerate(PARAM_NAMES):
            col = self.values[..., p]
            if np.any(col < 0) or np.any(col > PARAM_UPPER[name]):
                raise ScenarioError(f"{name} outside [0, {PARAM_UPPER[name]}]")
        bi, bq = self.get("beta_I"), self.get("beta_Q")
        # both zero is a region with no transmission at all, which is allowed
        if np.any((bq >= bi) & ~((bi == 0.0) & (bq == 0.0))):
            raise ScenarioError("quarantined transmission must be strictly lower than beta_I")
        exits = self.get("delta") + self.get("gamma") + self.get("mu")
        if np.any(exits > 1.0 + 1e-12):
            raise ScenarioError("delta + gamma + mu must not exceed 1 per day")


@dataclass(eq=False)
class MobilitySchedule:
    """Dated origin->destination flows; ``flows[t, j, i]`` is j -> i on day t."""

    start: dt.date
    codes: tuple[str, ...]
    flows: np.ndarray

    def __post_init__(self):
        self.flows = np.asarray(self.flows, dtype=float)
        self.codes = tuple(self.codes)

    @property
    def n_days(self) -> int:
        return self.flows.shape[0]

    def date(self, day: int) -> dt.date:
        return self.start + dt.timedelta(days=day)

    def day_of(self, date: dt.date) -> int:
        return (date - self.start).days

    def copy(self) -> MobilitySchedule:
        return MobilitySchedule(self.start, self.codes, self.flows.copy())

    def check(self) -> None:
        n = len(self.codes)
        if self.flows.ndim != 3 or self.flows.shape[1:] != (n, n):
            raise ScenarioError(f"flow array shape {self.flows.shape} does not match {n} regions")
        if not np.all(np.isfinite(self.flows)) or np.any(self.flows < 0):
            raise ScenarioError("mobility flows must be finite and nonnegative")
        diag = self.flows[:, np.arange(n), np.arange(n)]
        if np.any(diag != 0):
            raise ScenarioError("mobility diagonal (self-flows) must be zero")


@dataclass(frozen=True)
class InterventionSettings:
    sis_factor: float = 0.5
    sis_redistribute: bool = True
    tis_eta: float = 1.0
    window_days: int = 14


@dataclass(eq=False)
class ScenarioConfig:
    regions: tuple[RegionId, ...]
    initial: np.ndarray
    params: EpiParams
    mobility: MobilitySchedule
    start_date: dt.date
    end_date: dt.date
    horizon_weeks: int = 6
    strategy: str = "tir"
    cycle_starts: tuple[int, ...] = ()
    warmup_days: int = 21
    seed: int = 0
    backends: Mapping[str, str] = field(default_factory=dict)
    rounds: int = 2
    eps: float = DEFAULT_EPS
    interventions: InterventionSettings = field(default_factory=InterventionSettings)
    initial_confirmed: np.ndarray | None = None
    name: str = "scenario"

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    @property
    def n_days(self) -> int:
        return (self.end_date - self.start_date).days

    @property
    def codes(self) -> tuple[str, ...]:
        return tuple(r.code for r in self.regions)

    @property
    def cycle_days(self) -> int:
        if self.strategy == "tir":
            return 7 * self.horizon_weeks
        return self.interventions.window_days

    def index(self, code: str) -> int:
        for r in self.regions:
            if r.code == code:
                return r.index
        raise ScenarioError(f"unknown region code {code!r}")

    def date(self, day: int) -> dt.date:
        return self.start_date + dt.timedelta(days=day)

    def baseline_flows(self) -> np.ndarray:
        """Baseline flows restricted to the simulated days, ``(n_days, N, N)``."""
        first = self.mobility.day_of(self.start_date)
        return self.mobility.flows[first : first + self.n_days]

    def confirmed0(self) -> np.ndarray:
        if self.initial_confirmed is None:
            return self.initial[:, 3].copy()
        return np.asarray(self.initial_confirmed, dtype=float)

    def replace(self, **changes) -> ScenarioConfig:
        return dataclasses.replace(self, **changes)


def default_calendar(n_days: int, warmup_days: int, cycle_days: int) -> tuple[int, ...]:
    return tuple(range(warmup_days, n_days, cycle_days))


def validate_scenario(config: ScenarioConfig) -> ScenarioConfig:
    """Check every scenario invariant; returns ``config`` itself when valid.

    A missing cycle calendar is filled in from the warm-up length, in which
    case a new config is returned. Validation is idempotent.
    """
    codes = config.codes
    if not codes:
        raise ScenarioError("scenario has no regions")
    if len(set(codes)) != len(codes):
        raise ScenarioError("region codes must be unique")
    for k, r in enumerate(config.regions):
        if r.index != k:
            raise ScenarioError(f"region {r.code} has index {r.index}, expected {k}")

    n = config.n_regions
    initial = np.asarray(config.initial, dtype=float)
    if initial.shape != (n, 6):
        raise ScenarioError(f"initial state shape {initial.shape}, expected {(n, 6)}")
    for r, row in zip(config.regions, initial):
        try:
            CompartmentState.from_array(row).check()
        except ScenarioError as exc:
            raise ScenarioError(f"region {r.code}: negative population or invalid state ({exc})") from None
    if config.initial_confirmed is not None and np.any(np.asarray(config.initial_confirmed) < 0):
        raise ScenarioError("initial confirmed counts must be nonnegative")

    config.params.check()
    if config.params.n_regions != n:
        raise ScenarioError(f"parameters cover {config.params.n_regions} regions, scenario has {n}")

    mob = config.mobility
    unknown = [c for c in mob.codes if c not in codes]
    if unknown:
        raise ScenarioError(f"unknown region code(s) in mobility schedule: {unknown}")
    if mob.codes != codes:
        raise ScenarioError("mobility schedule regions must follow the scenario region order")
    mob.check()
    if config.n_days < 0:
        raise ScenarioError("end date precedes start date")
    first = mob.day_of(config.start_date)
    if first < 0 or first + config.n_days > mob.n_days:
        raise ScenarioError("mobility schedule does not cover the simulation date range")

    for code in config.backends:
        if code not in codes:
            raise ScenarioError(f"unknown region code {code!r} in backend assignment")
    if config.horizon_weeks < 1:
        raise ScenarioError("planning horizon must be at least one week")
    if config.strategy not in STRATEGIES:
        raise ScenarioError(f"strategy must be one of {STRATEGIES}")
    if config.rounds < 1:
        raise ScenarioError("communication rounds must be >= 1")
    if not config.eps > 0:
        raise ScenarioError("eps must be positive")
    iv = config.interventions
    if not 0 < iv.sis_factor <= 1:
        raise ScenarioError("suppression factor must lie in (0, 1]")
    if not 0 <= iv.tis_eta <= 1:
        raise ScenarioError("screening efficacy must lie in [0, 1]")
    if iv.window_days < 1:
        raise ScenarioError("intervention window must be at least one day")
    if config.warmup_days < 0:
        raise ScenarioError("warm-up length must be nonnegative")

    starts = config.cycle_starts
    if not starts:
        starts = default_calendar(config.n_days, config.warmup_days, config.cycle_days)
        config = config.replace(cycle_starts=starts)
    _check_calendar(starts, config.n_days, config.cycle_days)
    return config


def _check_calendar(starts: Sequence[int], n_days: int, cycle_days: int) -> None:
    if not starts:
        raise ScenarioError("calendar gap: no reallocation cycles fit the simulation range")
    if starts[0] < 0:
        raise ScenarioError("reallocation cycle starts before the simulation")
    for a, b in zip(starts, starts[1:]):
        if b != a + cycle_days:
            raise ScenarioError(f"calendar gap between cycles starting on day {a} and day {b}")
    end = starts[-1] + cycle_days
    if end > n_days:
        raise ScenarioError(f"last reallocation cycle ends on day {end}, after the simulation end ({n_days})")
    if end < n_days:
        raise ScenarioError(f"calendar gap: cycles end on day {end} but the simulation runs to day {n_days}")


def config_digest(config: ScenarioConfig) -> str:
    """SHA-256 over a canonical JSON rendering of the scenario."""
    payload = {
        "name": config.name,
        "regions": [[r.code, r.index, r.lat, r.lon] for r in config.regions],
        "initial": np.asarray(config.initial, dtype=float).tolist(),
        "initial_confirmed": None if config.initial_confirmed is None else np.asarray(config.initial_confirmed).tolist(),
        "params": config.params.values.tolist(),
        "param_starts": list(config.params.starts),
        "mobility_start": config.mobility.start.isoformat(),
        "mobility_sha": hashlib.sha256(np.ascontiguousarray(config.mobility.flows).tobytes()).hexdigest(),
        "start": config.start_date.isoformat(),
        "end": config.end_date.isoformat(),
        "horizon_weeks": config.horizon_weeks,
        "strategy": config.strategy,
        "cycle_starts": list(config.cycle_starts),
        "warmup_days": config.warmup_days,
        "seed": config.seed,
        "backends": dict(sorted(config.backends.items())),
        "rounds": config.rounds,
        "eps": config.eps,
        "interventions": dataclasses.asdict(config.interventions),
    }
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


# --------------------------------------------------------------------------
# Scenario files
# --------------------------------------------------------------------------


def _date(value) -> dt.date:
    if isinstance(value, dt.date):
        return value
    return dt.date.fromisoformat(str(value))


def load_scenario(path) -> ScenarioConfig:
    """Read a TOML scenario file; relative data paths resolve next to it.

    The schema is documented in the README ("Scenario file").
    """
    from . import io as epio

    path = Path(path)
    with path.open("rb") as fh:
        doc = tomllib.load(fh)
    base = path.parent
    meta = doc.get("scenario", {})
    region_tables = doc.get("regions", [])
    if not region_tables:
        raise ScenarioError("scenario file defines no [[regions]]")
    regions = tuple(
        RegionId(str(t["code"]).upper(), k, t.get("lat"), t.get("lon")) for k, t in enumerate(region_tables)
    )
    codes = tuple(r.code for r in regions)
    n = len(regions)

    initial = np.zeros((n, 6))
    confirmed = np.zeros(n)
    has_confirmed = False
    for k, t in enumerate(region_tables):
        for c, name in enumerate(COMPARTMENTS):
            initial[k, c] = float(t.get(name, 0.0))
        if "confirmed" in t:
            confirmed[k] = float(t["confirmed"])
            has_confirmed = True
        else:
            confirmed[k] = initial[k, 3]

    start = _date(meta["start_date"])
    end = _date(meta["end_date"])

    ptable = doc.get("params", {})
    if "file" in ptable:
        params = epio.load_params(base / ptable["file"], codes, start)
    else:
        rates = {name: [float(t[name]) for t in region_tables] for name in PARAM_NAMES}
        params = EpiParams.constant(n, **rates)

    mtable = doc.get("mobility", {})
    if "file" not in mtable:
        raise ScenarioError("scenario file needs [mobility] file = <flows csv>")
    mobility = epio.load_flows(base / mtable["file"], codes, start=start, end=end)

    iv = doc.get("interventions", {})
    interventions = InterventionSettings(
        sis_factor=float(iv.get("sis_factor", 0.5)),
        sis_redistribute=bool(iv.get("sis_redistribute", True)),
        tis_eta=float(iv.get("tis_eta", 1.0)),
        window_days=int(iv.get("window_days", 14)),
    )
    cal = doc.get("calendar", {})
    cycle_starts = tuple((_date(d) - start).days for d in cal.get("cycle_starts", []))
    backends = {str(t["code"]).upper(): str(t["backend"]) for t in region_tables if "backend" in t}

    config = ScenarioConfig(
        regions=regions,
        initial=initial,
        params=params,
        mobility=mobility,
        start_date=start,
        end_date=end,
        horizon_weeks=int(meta.get("horizon_weeks", 6)),
        strategy=str(meta.get("strategy", "tir")).lower(),
        cycle_starts=cycle_starts,
        warmup_days=int(meta.get("warmup_days", 21)),
        seed=int(meta.get("seed", 0)),
        backends=backends,
        rounds=int(meta.get("communication_rounds", 2)),
        eps=float(meta.get("eps", DEFAULT_EPS)),
        interventions=interventions,
        initial_confirmed=confirmed if has_confirmed else None,
        name=str(meta.get("name", path.stem)),
    )
    return validate_scenario(config)
