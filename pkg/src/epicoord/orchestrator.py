"""Closed-loop episodes (simulate, observe, coordinate, enact) and
cross-paradigm comparison."""
from __future__ import annotations

import json
import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import dynamics, metrics
from . import rt as rtmod
from .agents import (
    DecisionContext,
    ExpertBackend,
    RandomBackend,
    Transcript,
    build_observation,
    coordinate_round,
    make_backend,
    summarize_all,
)
from .policy import (
    ActionError,
    NoAction,
    SisOrder,
    SisStats,
    TirAction,
    TisOrder,
    apply_sis,
    apply_tir,
    classify_policy,
    compile_tis,
)
from .scenario import MobilitySchedule, ScenarioConfig, validate_scenario

log = logging.getLogger(__name__)

PARADIGMS = ("agent", "ground_truth", "expert", "random")
RT_WINDOW = 21


@dataclass(frozen=True)
class PolicyLogEntry:
    cycle: int
    start: int
    destination: str
    origin: str | None
    action_type: str
    parameters: str
    label: str
    baseline_inflow: float = 0.0
    repaired: bool = False
    fallback: bool = False


@dataclass(eq=False)
class EpisodeReport:
    paradigm: str
    config: ScenarioConfig
    trajectory: dynamics.Trajectory
    realized: MobilitySchedule
    policy_log: list
    rates: dict
    rt: dict
    infections: np.ndarray
    deaths: np.ndarray
    seed: int
    wall_clock: float = 0.0
    transcript: Transcript = field(default_factory=Transcript)
    sis_stats: SisStats = field(default_factory=SisStats)

    @property
    def codes(self):
        return self.config.codes

    @property
    def degraded(self) -> bool:
        return self.transcript.degraded

    @property
    def labels(self) -> list:
        return [e.label for e in self.policy_log if e.label]


def _backends_for(config, paradigm, backends, seed, base_dir):
    codes = config.codes
    if paradigm == "expert":
        return {c: ExpertBackend() for c in codes}
    if paradigm == "random":
        seqs = np.random.SeedSequence(seed).spawn(len(codes))
        return {c: RandomBackend(int(s.generate_state(1)[0])) for c, s in zip(codes, seqs)}
    if backends is not None:
        missing = [c for c in codes if c not in backends]
        if missing:
            raise ValueError(f"no backend supplied for region(s) {missing}")
        return dict(backends)
    missing = [c for c in codes if c not in config.backends]
    if missing:
        raise ValueError(f"scenario assigns no backend to region(s) {missing}")
    return {c: make_backend(config.backends[c], seed=seed, base_dir=base_dir) for c in codes}


def _params_json(d: dict) -> str:
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def run_episode(
    config: ScenarioConfig,
    paradigm: str,
    backends: Mapping | None = None,
    seed: int | None = None,
    max_workers: int = 1,
    base_dir=None,
) -> EpisodeReport:
    """Run one paradigm over the scenario's reallocation calendar.

    ``ground_truth`` simulates the unmodified baseline. Other paradigms,
    at every cycle start, observe the trajectory so far, coordinate, enact
    the resulting actions on the upcoming cycle only, then simulate it.
    """
    if paradigm not in PARADIGMS:
        raise ValueError(f"paradigm must be one of {PARADIGMS}")
    t0 = time.perf_counter()
    config = validate_scenario(config)
    seed = config.seed if seed is None else int(seed)
    codes = config.codes
    index = {c: k for k, c in enumerate(codes)}
    base = config.baseline_flows()
    realized = base.copy()
    screening = np.zeros_like(base)
    iv = config.interventions
    L = config.cycle_days
    H = config.horizon_weeks
    agents = None if paradigm == "ground_truth" else _backends_for(config, paradigm, backends, seed, base_dir)
    transcript = Transcript()
    sis_stats = SisStats()
    policy_log: list[PolicyLogEntry] = []

    def advance(traj, lo, hi):
        try:
            seg = dynamics.run(
                traj.states[-1], realized[lo:hi], config.params, screening[lo:hi], traj.confirmed[-1],
                codes=codes, start=config.start_date, day_offset=lo,
            )
        except dynamics.InstabilityError as exc:
            raise dynamics.InstabilityError(f"{exc} (cycle starting day {lo})", exc.day, exc.region) from None
        return traj.extend(seg)

    first = config.cycle_starts[0]
    traj = dynamics.run(
        config.initial, realized[:first], config.params, screening[:first], config.confirmed0(),
        codes=codes, start=config.start_date,
    )
    for c, s in enumerate(config.cycle_starts):
        if agents is not None:
            summaries = summarize_all(traj, s, config.eps)
            obs = {code: build_observation(traj, realized, config, code, c, s, summaries) for code in codes}
            ctx = DecisionContext(config.strategy, H, s, L, iv.sis_factor, iv.sis_redistribute, iv.tis_eta)
            decisions = coordinate_round(agents, obs, config.rounds, ctx, transcript, max_workers)
            realized = _enact(decisions, config, index, realized, base, screening, s, c, policy_log, sis_stats)
        traj = advance(traj, s, s + L)

    if traj.n_days != config.n_days:
        raise RuntimeError("episode did not cover the scenario range")
    rates = metrics.rate_series(traj)
    rts = {}
    for k, code in enumerate(codes):
        inc = rtmod.incidence_from_cumulative(traj.confirmed[:, k])
        if inc.size >= RT_WINDOW:
            rts[code] = rtmod.estimate_rt(inc, eps=config.eps)
    return EpisodeReport(
        paradigm=paradigm,
        config=config,
        trajectory=traj,
        realized=MobilitySchedule(config.start_date, codes, realized),
        policy_log=policy_log,
        rates=rates,
        rt=rts,
        infections=metrics.total_infections(traj),
        deaths=metrics.total_deaths(traj),
        seed=seed,
        wall_clock=time.perf_counter() - t0,
        transcript=transcript,
        sis_stats=sis_stats,
    )


def _enact(decisions, config, index, realized, base, screening, s, cycle, policy_log, sis_stats):
    H = config.horizon_weeks
    L = config.cycle_days
    sis_orders, tis_orders = [], []
    for dest, d in decisions.items():
        action = d.action
        i = index[dest]
        if isinstance(action, TirAction):
            allocs = {index[o]: a for o, a in action.allocations.items()}
            realized = apply_tir(realized, i, allocs, s, H)
            for o, a in action.allocations.items():
                try:
                    label = classify_policy(a).value
                except ActionError:
                    label = ""
                policy_log.append(PolicyLogEntry(
                    cycle, s, dest, o, "tir", _params_json({"fractions": a.tolist()}), label,
                    float(base[s : s + L, index[o], i].sum()), bool(a.repaired or d.repaired), d.fallback,
                ))
        elif isinstance(action, SisOrder):
            sis_orders.append(action)
            policy_log.append(PolicyLogEntry(
                cycle, s, dest, action.origin, "sis",
                _params_json({"factor": action.factor, "window": action.window, "redistribute": action.redistribute}),
                "", float(base[s : s + L, index[action.origin], i].sum()), d.repaired, d.fallback,
            ))
        elif isinstance(action, TisOrder):
            tis_orders.append(action)
            policy_log.append(PolicyLogEntry(
                cycle, s, dest, action.origin, "tis",
                _params_json({"eta": action.eta, "window": action.window}),
                "", float(base[s : s + L, index[action.origin], i].sum()), d.repaired, d.fallback,
            ))
        elif isinstance(action, NoAction):
            policy_log.append(PolicyLogEntry(
                cycle, s, dest, None, "none", _params_json({"reason": action.reason}), "", 0.0, False, d.fallback,
            ))
    if sis_orders:
        realized = apply_sis(realized, sis_orders, index, sis_stats)
    if tis_orders:
        compile_tis(tis_orders, index, realized.shape[0], len(index), out=screening)
    return realized


# --------------------------------------------------------------------------
# Comparison
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ReportSummary:
    """What comparison needs from an episode (in memory or on disk)."""

    paradigm: str
    scenario: str
    codes: tuple
    start: str
    n_days: int
    infections: np.ndarray
    deaths: np.ndarray
    labels: tuple = ()

    @classmethod
    def of(cls, report) -> ReportSummary:
        if isinstance(report, ReportSummary):
            return report
        return cls(
            report.paradigm,
            report.config.name,
            tuple(report.codes),
            report.config.start_date.isoformat(),
            report.config.n_days,
            np.asarray(report.infections, dtype=float),
            np.asarray(report.deaths, dtype=float),
            tuple(report.labels),
        )


@dataclass
class ParadigmComparison:
    paradigm: str
    reduction_infections: dict
    reduction_deaths: dict
    aggregate_reduction_infections: float
    aggregate_reduction_deaths: float
    equity: metrics.Equity
    policy_types: dict


def compare_paradigms(reports, eps: float = 1e-9) -> dict:
    """Percentage reductions vs ``ground_truth`` for every other paradigm.

    ``reports`` is a list of episode reports or :class:`ReportSummary`;
    exactly one must be the ground-truth arm.
    """
    summaries = [ReportSummary.of(r) for r in reports]
    gts = [s for s in summaries if s.paradigm == "ground_truth"]
    if len(gts) != 1:
        raise ValueError("comparison needs exactly one ground_truth report")
    gt = gts[0]
    out = {}
    for s in summaries:
        if (s.scenario, s.codes, s.start, s.n_days) != (gt.scenario, gt.codes, gt.start, gt.n_days):
            raise ValueError(f"report {s.paradigm} does not share the ground-truth scenario and date range")
        imp = metrics.improvements(gt.infections, gt.deaths, s.infections, s.deaths, eps)
        agg_inf = (gt.infections.sum() - s.infections.sum()) / max(abs(gt.infections.sum()), eps)
        agg_dea = (gt.deaths.sum() - s.deaths.sum()) / max(abs(gt.deaths.sum()), eps)
        out[s.paradigm] = ParadigmComparison(
            paradigm=s.paradigm,
            reduction_infections={c: 100.0 * v for c, v in zip(s.codes, imp.infections)},
            reduction_deaths={c: 100.0 * v for c, v in zip(s.codes, imp.deaths)},
            aggregate_reduction_infections=100.0 * float(agg_inf),
            aggregate_reduction_deaths=100.0 * float(agg_dea),
            equity=metrics.equity_coefficient(imp),
            policy_types=dict(sorted(Counter(s.labels).items())),
        )
    return out


def comparison_rows(table: dict) -> list:
    """Flatten a comparison into CSV-ready dict rows (one per paradigm/region)."""
    rows = []
    for name, comp in table.items():
        for code in comp.reduction_infections:
            rows.append({
                "paradigm": name,
                "region": code,
                "reduction_infections_pct": comp.reduction_infections[code],
                "reduction_deaths_pct": comp.reduction_deaths[code],
            })
        rows.append({
            "paradigm": name,
            "region": "ALL",
            "reduction_infections_pct": comp.aggregate_reduction_infections,
            "reduction_deaths_pct": comp.aggregate_reduction_deaths,
        })
    return rows
