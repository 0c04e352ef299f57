import csv
import datetime as dt

import numpy as np
import pytest

from epicoord import dynamics, metrics
from epicoord import io as epio
from epicoord.agents import ScriptedBackend
from epicoord.orchestrator import ReportSummary, compare_paradigms, comparison_rows, run_episode
from epicoord.scenario import EpiParams

from conftest import make_config


def outbreak_config(n_days=63):
    """R0 carries a fast outbreak and most of the travel into R1 and R2."""
    pop = np.array([4e6, 2e6, 2e6])
    seed = np.array([4000.0, 40.0, 40.0])
    initial = np.zeros((3, 6))
    initial[:, 1] = 2 * seed
    initial[:, 2] = seed
    initial[:, 0] = pop - 3 * seed
    base = np.outer(pop, np.ones(3)) * 5e-4
    base[0] *= 6
    np.fill_diagonal(base, 0)
    values = np.tile([0.3, 0.06, 0.25, 0.12, 0.1, 0.004], (3, 1))
    values[0, :2] = (0.7, 0.14)
    cfg = make_config(3, n_days, flows=np.repeat(base[None], n_days, 0), initial=initial)
    return cfg.replace(params=EpiParams(values[None], (0,)))


def test_uniform_scripted_equals_ground_truth():
    cfg = make_config(3, 63)
    uniform = [{o: [1 / 6] * 6 for o in ("R0", "R1", "R2")}]
    agents = {c: ScriptedBackend(uniform) for c in ("R0", "R1", "R2")}
    a = run_episode(cfg, "agent", backends=agents)
    gt = run_episode(cfg, "ground_truth")
    np.testing.assert_allclose(a.trajectory.states, gt.trajectory.states, rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose(a.realized.flows, gt.realized.flows, rtol=1e-12)
    assert a.transcript.decision_calls == 3 * cfg.rounds
    assert a.transcript.message_ingestions == 3 * (cfg.rounds - 1)


def test_expert_beats_ground_truth_on_engineered_outbreak():
    cfg = outbreak_config()
    gt = run_episode(cfg, "ground_truth")
    ex = run_episode(cfg, "expert")
    assert ex.infections.sum() < gt.infections.sum()
    assert "StrictFirst" in ex.labels


def test_random_bit_identical():
    cfg = outbreak_config()
    a, b = run_episode(cfg, "random", seed=11), run_episode(cfg, "random", seed=11)
    assert np.array_equal(a.trajectory.states, b.trajectory.states)
    assert np.array_equal(a.realized.flows, b.realized.flows)
    assert a.policy_log == b.policy_log
    assert a.transcript.lines() == b.transcript.lines()
    c = run_episode(cfg, "random", seed=12)
    assert not np.array_equal(a.realized.flows, c.realized.flows)


def test_ground_truth_keeps_baseline_and_causality():
    cfg = outbreak_config()
    base = cfg.baseline_flows().copy()
    gt = run_episode(cfg, "ground_truth")
    np.testing.assert_array_equal(gt.realized.flows, base)
    np.testing.assert_array_equal(cfg.baseline_flows(), base)
    assert gt.policy_log == [] and gt.transcript.decision_calls == 0
    ex = run_episode(cfg, "expert")
    first = ex.config.cycle_starts[0]
    np.testing.assert_array_equal(ex.realized.flows[:first], base[:first])
    np.testing.assert_array_equal(ex.trajectory.states[: first + 1], gt.trajectory.states[: first + 1])
    assert gt.trajectory.n_days == ex.realized.flows.shape[0] == cfg.n_days


def test_multi_cycle_actions_touch_only_their_cycle():
    cfg = make_config(2, 21 + 42 * 2)
    scripts = [{"R1": [0.05, 0.05, 0.15, 0.15, 0.3, 0.3]}, {"R1": [1 / 6] * 6}]
    agents = {"R0": ScriptedBackend(scripts), "R1": ScriptedBackend([{"R0": [1 / 6] * 6}])}
    rep = run_episode(cfg, "agent", backends=agents)
    base = cfg.baseline_flows()
    np.testing.assert_allclose(rep.realized.flows[63:], base[63:], rtol=1e-12)
    assert not np.allclose(rep.realized.flows[21:63, 1, 0], base[21:63, 1, 0])
    assert rep.realized.flows[21:63, 1, 0].sum() == pytest.approx(base[21:63, 1, 0].sum())
    assert [e.cycle for e in rep.policy_log] == [0, 0, 1, 1]


def test_sis_and_tis_paradigms_run():
    for strategy in ("sis", "tis"):
        cfg = outbreak_config().replace(strategy=strategy, cycle_starts=())
        rep = run_episode(cfg, "expert")
        kinds = {e.action_type for e in rep.policy_log}
        assert kinds <= {strategy, "none"} and strategy in kinds
        gt = run_episode(cfg, "ground_truth")
        assert rep.infections.sum() != gt.infections.sum()


def test_outflow_cap_keeps_states_nonnegative():
    cfg = make_config(2, 63)
    flows = cfg.baseline_flows().copy()
    flows[30:, 0, 1] = 9_000.0  # drains nearly everyone from R0
    cfg = cfg.replace(mobility=cfg.mobility.__class__(cfg.mobility.start, cfg.mobility.codes, flows))
    rep = run_episode(cfg, "ground_truth")
    assert rep.trajectory.n_capped > 0
    assert np.all(rep.trajectory.states >= 0)


def test_instability_carries_cycle_context(monkeypatch):
    real = dynamics.run

    def flaky(*args, day_offset=0, **kw):
        if day_offset > 0:
            raise dynamics.InstabilityError("compartment of region R0 driven below zero on day 3", 3, 0)
        return real(*args, day_offset=day_offset, **kw)

    monkeypatch.setattr(dynamics, "run", flaky)
    with pytest.raises(dynamics.InstabilityError, match="cycle starting day 21") as info:
        run_episode(make_config(2, 63), "ground_truth")
    assert info.value.day == 3 and info.value.region == 0


def test_unknown_paradigm_and_missing_backend():
    cfg = make_config(2, 63)
    with pytest.raises(ValueError, match="paradigm"):
        run_episode(cfg, "oracle")
    with pytest.raises(ValueError, match="backend"):
        run_episode(cfg, "agent")


def _summary(paradigm, inf, dea, labels=()):
    return ReportSummary(paradigm, "s", ("A", "B"), "2020-01-01", 10, np.array(inf, float), np.array(dea, float), labels)


def test_compare_self_is_zero_and_undefined_equity():
    rep = run_episode(make_config(2, 63), "ground_truth")
    table = compare_paradigms([rep])
    comp = table["ground_truth"]
    assert comp.aggregate_reduction_infections == 0 and comp.aggregate_reduction_deaths == 0
    assert all(v == 0 for v in comp.reduction_infections.values())
    assert comp.equity.infections is None and comp.equity.deaths is None


def test_compare_half():
    table = compare_paradigms([_summary("ground_truth", [100, 300], [10, 20]),
                               _summary("agent", [50, 150], [5, 10], ("StrictFirst", "Balanced", "StrictFirst"))])
    agent = table["agent"]
    assert agent.aggregate_reduction_infections == pytest.approx(50.0)
    assert agent.reduction_deaths == {"A": pytest.approx(50.0), "B": pytest.approx(50.0)}
    assert agent.equity.infections == pytest.approx(1.0)
    assert agent.policy_types == {"Balanced": 1, "StrictFirst": 2}
    rows = comparison_rows(table)
    assert {r["region"] for r in rows} == {"A", "B", "ALL"}


def test_compare_rejects_mismatch():
    other = ReportSummary("agent", "s", ("A", "B"), "2020-01-02", 10, np.ones(2), np.ones(2))
    with pytest.raises(ValueError, match="date range"):
        compare_paradigms([_summary("ground_truth", [1, 1], [1, 1]), other])
    with pytest.raises(ValueError, match="exactly one"):
        compare_paradigms([_summary("agent", [1, 1], [1, 1])])


def test_compare_matches_csv_recomputation(tmp_path):
    from epicoord.synthetic import build_scenario

    cfg = build_scenario(3)
    reports = {p: run_episode(cfg, p, seed=3) for p in ("ground_truth", "expert", "random")}
    for p, r in reports.items():
        epio.write_report(r, tmp_path / p)
    table = compare_paradigms([epio.read_report_summary(tmp_path / p) for p in reports])

    def terminal(path, column):
        last = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                last[row["region"]] = float(row[column])
        return last

    gt_q = terminal(tmp_path / "ground_truth" / "trajectory.csv", "cum_Q")
    gt_d = terminal(tmp_path / "ground_truth" / "trajectory.csv", "D")
    for p in ("expert", "random"):
        q = terminal(tmp_path / p / "trajectory.csv", "cum_Q")
        d = terminal(tmp_path / p / "trajectory.csv", "D")
        for code in cfg.codes:
            assert table[p].reduction_infections[code] == pytest.approx(100 * (gt_q[code] - q[code]) / gt_q[code], rel=1e-12)
            assert table[p].reduction_deaths[code] == pytest.approx(100 * (gt_d[code] - d[code]) / gt_d[code], rel=1e-12)
        agg = 100 * (sum(gt_q.values()) - sum(q.values())) / sum(gt_q.values())
        assert table[p].aggregate_reduction_infections == pytest.approx(agg, rel=1e-12)
    in_memory = compare_paradigms(list(reports.values()))
    assert in_memory["expert"].aggregate_reduction_infections == pytest.approx(
        table["expert"].aggregate_reduction_infections, rel=1e-12)


def test_rates_and_rt_in_report():
    rep = run_episode(make_config(2, 63), "expert")
    np.testing.assert_array_equal(rep.rates["IR"], metrics.rate_series(rep.trajectory)["IR"])
    assert set(rep.rt) == {"R0", "R1"}
    assert rep.rt["R0"].mean.size == 63 - 21 + 1
    assert rep.trajectory.start == dt.date(2021, 1, 4)
