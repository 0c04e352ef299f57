"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are collected into ``RESULTS`` and echoed in pytest's terminal
summary (see conftest.py); running this file directly prints them too.
"""
import datetime as dt
import functools
import itertools
import time

import numpy as np
import pytest

from epicoord import dynamics, io as epio, metrics, rt
from epicoord.attribution import shapley_values
from epicoord.metrics import ImprovementVector
from epicoord.orchestrator import run_episode
from epicoord.policy import (
    PolicyType,
    SisOrder,
    SisStats,
    apply_sis,
    apply_tir,
    classify_policy,
    normalize_tir,
    phase_sums,
)
from epicoord.scenario import EpiParams, MobilitySchedule, RegionId, ScenarioConfig, load_scenario
from epicoord.synthetic import build_scenario, shipped_scenario_path

from oracles import renewal_forward, seiqrd_reference

RESULTS = {}


def criterion(number, title):
    def wrap(func):
        @functools.wraps(func)
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                detail = func(*args, **kwargs) or ""
            except BaseException as exc:
                line = f"criterion {number:>2} FAIL  {title}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
                RESULTS[number] = line
                print(line)
                raise
            line = f"criterion {number:>2} PASS  {title} ({time.perf_counter() - t0:.2f}s) {detail}".rstrip()
            RESULTS[number] = line
            print(line)

        return run

    return wrap


def _random_rates(rng, n):
    p = np.empty((n, 6))
    p[:, 0] = rng.uniform(0.0, 1.0, n)
    p[:, 1] = p[:, 0] * rng.uniform(0.0, 0.999, n)
    p[:, 2] = rng.uniform(1 / 14, 0.5, n)
    p[:, 4] = rng.uniform(1 / 30, 1 / 3, n)
    p[:, 5] = rng.uniform(0.0, 0.05, n)
    p[:, 3] = rng.uniform(0.0, 1.0, n) * (1.0 - p[:, 4] - p[:, 5])
    return p


@criterion(1, "SEIQRD matches straight-line reference")
def test_c01_seiqrd_oracle():
    rng = np.random.default_rng(2024)
    n, days = 3, 30
    x0 = np.zeros((n, 6))
    x0[:, 0] = rng.uniform(5e4, 5e5, n)
    x0[:, 1:4] = rng.uniform(10, 500, (n, 3))
    x0[:, 4:] = rng.uniform(0, 50, (n, 2))
    flows = rng.uniform(0, 800, (days, n, n))
    for t in range(days):
        np.fill_diagonal(flows[t], 0)
    rates = _random_rates(rng, n)
    codes = ("A", "B", "C")
    cfg = ScenarioConfig(
        regions=tuple(RegionId(c, k) for k, c in enumerate(codes)),
        initial=x0,
        params=EpiParams(rates[None], (0,)),
        mobility=MobilitySchedule(dt.date(2020, 1, 1), codes, flows),
        start_date=dt.date(2020, 1, 1),
        end_date=dt.date(2020, 1, 1) + dt.timedelta(days=days),
        warmup_days=0,
        horizon_weeks=1,
    )
    t0 = time.perf_counter()
    traj = dynamics.simulate(cfg)
    elapsed = time.perf_counter() - t0
    ref_states, ref_confirmed = seiqrd_reference(x0, flows, np.broadcast_to(rates, (days, n, 6)))
    err = float(np.max(np.abs(traj.states - np.asarray(ref_states))))
    err = max(err, float(np.max(np.abs(traj.confirmed - np.asarray(ref_confirmed)))))
    assert err <= 1e-9, f"max abs deviation {err:.3e}"
    assert elapsed < 1.0, f"simulation took {elapsed:.3f}s"
    return f"max |diff| {err:.1e}, {elapsed * 1e3:.1f} ms"


@criterion(2, "population conserved over 1000 random scenarios")
def test_c02_conservation():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(1000):
        n = int(rng.integers(2, 8))
        x0 = np.zeros((n, 6))
        x0[:, 0] = rng.uniform(1e3, 1e6, n)
        x0[:, 1:] = rng.uniform(0, 1e3, (n, 5))
        flows = rng.uniform(0, 0.05, (60, n, n)) * x0[:, 0][None, :, None]
        params = np.broadcast_to(_random_rates(rng, n), (60, n, 6))
        for screened in (False, True):
            screening = rng.uniform(0, 1, (60, n, n)) if screened else np.zeros((60, n, n))
            traj = dynamics.run(x0, flows, params, screening)
            tot = traj.totals()
            worst = max(worst, float(np.max(np.abs(tot - tot[0]) / tot[0])))
    elapsed = time.perf_counter() - t0
    assert worst <= 1e-6, f"relative drift {worst:.3e}"
    assert elapsed < 60.0, f"took {elapsed:.1f}s"
    return f"worst drift {worst:.1e}"


@criterion(3, "R_t recovered from constant-R renewal incidence")
def test_c03_rt_recovery():
    si = rt.default_serial_interval()
    notes = []
    for R in (0.8, 1.2, 1.5, 2.0):
        x = np.array(renewal_forward(R, si.weights, 120, seed_cases=1000.0 if R < 1 else 10.0, seed_days=1))
        est = rt.estimate_rt(x)
        late = est.days >= 60
        bias = float(np.max(np.abs(est.mean[late] - R)))
        cover = float(np.mean((est.lower[late] <= R) & (R <= est.upper[late])))
        assert bias <= 0.1, f"R={R}: max |mean - R| = {bias:.3f}"
        assert cover >= 0.9, f"R={R}: coverage {cover:.2f}"
        notes.append(f"R={R}: bias {bias:.3f} cov {cover:.2f}")
    return "; ".join(notes)


@criterion(4, "serial-interval defaults")
def test_c04_serial_interval():
    si = rt.default_serial_interval()
    assert abs(si.shape - 6.25) <= 1e-12 and abs(si.scale - 0.8) <= 1e-12
    assert abs(si.weights.sum() - 1.0) <= 1e-12
    return f"k={si.shape}, theta={si.scale}, sum-1={si.weights.sum() - 1:.1e}"


@criterion(5, "TIR preserves per-pair cycle inflow")
def test_c05_tir():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(500):
        n, H = int(rng.integers(2, 7)), int(rng.integers(1, 9))
        days = 7 * H + int(rng.integers(0, 20))
        base = rng.uniform(0, 1e4, (days, n, n))
        start = int(rng.integers(0, days - 7 * H + 1))
        dest = int(rng.integers(n))
        allocs = {j: normalize_tir(rng.dirichlet(np.ones(H))) for j in range(n) if j != dest}
        out = apply_tir(base, dest, allocs, start, H)
        b = base[start : start + 7 * H].sum(axis=0)
        o = out[start : start + 7 * H].sum(axis=0)
        worst = max(worst, float(np.max(np.abs(o - b) / np.maximum(b, 1e-300))))
    assert worst <= 1e-6
    base = np.zeros((56, 2, 2))
    base[:, 1, 0] = 10_000 / 7
    p = np.full(8, 0.125)
    p[0], p[3] = 1 / 16, 3 / 16
    p[4:] = (1 - p[:4].sum()) / 4
    weeks = apply_tir(base, 0, {1: normalize_tir(p)}, 0, 8)[:, 1, 0].reshape(8, 7).sum(axis=1)
    assert abs(weeks[0] - 5_000) <= 1e-9 and abs(weeks[3] - 15_000) <= 1e-9
    return f"worst relative change {worst:.1e}; weeks {weeks[0]:.6f}, {weeks[3]:.6f}"


@criterion(6, "policy classification")
def test_c06_classification():
    assert classify_policy([0.05, 0.05, 0.15, 0.15, 0.30, 0.30]) == PolicyType.STRICT_FIRST
    assert classify_policy(np.full(6, 1 / 6)) == PolicyType.BALANCED
    assert classify_policy([0.25, 0.25, 0.20, 0.10, 0.10, 0.10]) == PolicyType.RELAXED_FIRST
    counts = dict.fromkeys(PolicyType, 0)
    for combo in itertools.combinations(range(25), 5):
        p = (np.diff((-1, *combo, 25)) - 1) * 0.05
        early, _, late = phase_sums(p)
        strict = early <= 0.3 + 1e-9 and late >= 0.4 - 1e-9
        relaxed = early >= 0.4 - 1e-9 and late <= 0.3 + 1e-9
        assert not (strict and relaxed)
        want = PolicyType.STRICT_FIRST if strict else PolicyType.RELAXED_FIRST if relaxed else PolicyType.BALANCED
        got = classify_policy(p)
        assert got == want
        counts[got] += 1
    assert sum(counts.values()) == 53130
    return ", ".join(f"{k.value} {v}" for k, v in counts.items())


@criterion(7, "SIS spillover")
def test_c07_sis():
    index = {"O": 0, "A": 1, "B": 2}
    base = np.zeros((3, 3, 3))
    base[:, 0, 1] = base[:, 0, 2] = 100
    out = apply_sis(base, [SisOrder("A", "O", 0.5, 0, 3)], index)
    assert np.all(out[:, 0, 1] == 50) and np.all(out[:, 0, 2] == 150)
    assert np.all(out[:, 0].sum(axis=1) == base[:, 0].sum(axis=1))
    stats = SisStats()
    both = apply_sis(base, [SisOrder("A", "O", 0.5, 0, 3), SisOrder("B", "O", 0.5, 0, 3)], index, stats)
    assert np.all(both[:, 0].sum(axis=1) == 100) and stats.dropped == 300
    return "O->A 50, O->B 150; full coordination drops 300"


@criterion(8, "Shapley axioms and additive closed form")
def test_c08_shapley():
    rng = np.random.default_rng(8)
    worst_eff = worst_sym = 0.0
    for _ in range(100):
        m = int(rng.integers(2, 11))
        w = rng.normal(size=(m, 3))
        w[1] = w[0]
        x = rng.normal(size=m)
        base = rng.normal(size=m)
        x[1], base[1] = x[0], base[0]

        def f(X, w=w):
            return np.tanh(X @ w).sum(axis=1) + X[:, 0] * X[:, 1]

        phi = shapley_values(f, x, base)
        worst_eff = max(worst_eff, abs(phi.sum() - (f(x[None])[0] - f(base[None])[0])))
        worst_sym = max(worst_sym, abs(phi[0] - phi[1]))
    assert worst_eff <= 1e-9 and worst_sym <= 1e-9
    a = rng.normal(size=8)
    bg = rng.normal(size=(30, 8))
    x = rng.normal(size=8)
    phi = shapley_values(lambda X: X @ a, x, bg)
    closed = a * (x - bg.mean(axis=0))
    gap = float(np.max(np.abs(phi - closed)))
    assert gap <= 1e-12
    return f"efficiency {worst_eff:.1e}, symmetry {worst_sym:.1e}, additive {gap:.1e}"


@criterion(9, "Gini and equity")
def test_c09_gini():
    e = metrics.equity_coefficient(ImprovementVector(np.array([1.0, 0, 0]), np.array([0.2, 0.2, 0.2])))
    assert abs(e.infections - 1 / 3) <= 1e-12 and abs(e.deaths - 1) <= 1e-12
    rng = np.random.default_rng(9)
    for _ in range(200):
        x = rng.exponential(size=int(rng.integers(1, 40)))
        g = metrics.gini(x)
        assert abs(metrics.gini(rng.permutation(x)) - g) <= 1e-12
        assert abs(metrics.gini(np.tile(x, int(rng.integers(2, 5)))) - g) <= 1e-12
    return "E(1,0,0)=1/3, E(equal)=1"


@criterion(10, "expert beats ground truth on the planted scenario")
def test_c10_directional():
    t0 = time.perf_counter()
    shipped = load_scenario(shipped_scenario_path())
    rows = []
    for seed in range(5):
        cfg = shipped if seed == 0 else build_scenario(seed)
        totals = {p: float(run_episode(cfg, p, seed=seed).infections.sum())
                  for p in ("ground_truth", "expert", "random")}
        rows.append(totals)
    gt = np.array([r["ground_truth"] for r in rows])
    ex = np.array([r["expert"] for r in rows])
    rnd = np.array([r["random"] for r in rows])
    assert np.all(ex < gt), f"expert not below ground truth on seeds {np.flatnonzero(ex >= gt).tolist()}"
    assert rnd.mean() >= ex.mean(), "random better than expert on average"
    assert time.perf_counter() - t0 < 300
    red = 100 * (gt - ex) / gt
    return f"expert reduction {red.min():.1f}..{red.max():.1f}%, random mean {100 * (gt - rnd).mean() / gt.mean():+.1f}%"


@criterion(11, "byte-identical manifests for equal seeds")
def test_c11_determinism(tmp_path):
    cfg = load_scenario(shipped_scenario_path())
    for p in ("ground_truth", "expert", "random"):
        m1 = epio.write_report(run_episode(cfg, p, seed=3), tmp_path / f"{p}1")
        m2 = epio.write_report(run_episode(cfg, p, seed=3), tmp_path / f"{p}2")
        b1 = (tmp_path / f"{p}1" / "manifest.json").read_bytes()
        b2 = (tmp_path / f"{p}2" / "manifest.json").read_bytes()
        assert m1 == m2 and b1 == b2, f"{p} manifests differ"
    return "ground_truth, expert, random"


@criterion(12, "forecast arithmetic")
def test_c12_forecast():
    c = 1000.0 - 10.0 * np.arange(14, -1, -1)
    out = metrics.forecast_cumulative(c, 180)
    assert out[-1] == 2800.0
    assert np.all(np.diff(out[len(c) - 1 :]) == 10.0)
    return "C_T+180 = 2800"


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
