import json
import threading
from pathlib import Path

import numpy as np
import pytest

from epicoord import dynamics
from epicoord.agents import (
    Decision,
    DecisionContext,
    ExpertBackend,
    Message,
    Observation,
    ParseError,
    RandomBackend,
    RegionSummary,
    RemoteCompletion,
    ScriptedBackend,
    TextBackend,
    Transcript,
    build_observation,
    coordinate_round,
    make_backend,
    make_message,
    parse_action,
    render_prompt,
    summarize_all,
)
from epicoord.agents.backends import Backend
from epicoord.agents.observation import HISTORY_DAYS
from epicoord.scenario import validate_scenario
from epicoord.policy import NoAction, PolicyType, SisOrder, TirAction, TisOrder, classify_policy

from conftest import make_config

GOLDEN = Path(__file__).parent / "data" / "prompt_tir_3regions.txt"


def _observe(config, day=None, cycle=0):
    config = validate_scenario(config)
    day = config.cycle_starts[cycle] if day is None else day
    full = dynamics.simulate(config)
    traj = dynamics.Trajectory(full.start, full.codes, full.states[: day + 1], full.confirmed[: day + 1],
                               full.flows[:day])
    flows = config.baseline_flows()
    summaries = summarize_all(traj, day, config.eps)
    return {c: build_observation(traj, flows, config, c, cycle, day, summaries) for c in config.codes}


@pytest.fixture
def cfg3():
    rng = np.random.default_rng(0)
    flows = rng.uniform(20, 80, (63, 3, 3)).round(1)
    for t in range(63):
        np.fill_diagonal(flows[t], 0)
    return make_config(3, 63, flows=flows)


def test_observation_windows_and_sums(cfg3):
    obs = _observe(cfg3)
    o = obs["R0"]
    assert o.history_days == HISTORY_DAYS and not o.short_history
    flows = validate_scenario(cfg3).baseline_flows()
    for j, code in ((1, "R1"), (2, "R2")):
        assert o.hist_total[code] == pytest.approx(flows[0:21, j, 0].sum(), abs=1e-9)
        assert o.hist_avg[code] == pytest.approx(flows[0:21, j, 0].mean(), abs=1e-9)
        assert sum(o.projected_weekly[code]) == pytest.approx(flows[21:63, j, 0].sum(), abs=1e-9)
        assert len(o.projected_weekly[code]) == cfg3.horizon_weeks
    assert o.origins == ("R1", "R2")
    assert {s.code for s in o.neighbors} == {"R1", "R2"}


def test_short_history_clipped():
    cfg = make_config(2, 47, warmup=5, horizon=6)
    o = _observe(cfg)["R0"]
    assert o.history_days == 5 and o.short_history
    flows = cfg.baseline_flows()
    assert o.hist_avg["R1"] == pytest.approx(flows[:5, 1, 0].mean())
    assert "5-day (short history)" in render_prompt(o)


def test_prompt_golden_and_deterministic(cfg3):
    o = _observe(cfg3)["R0"]
    text = render_prompt(o)
    assert text == render_prompt(o)
    for field in ("# System Guidance", "# Inputs", "# Constraints", "# Final Output", "think_process",
                  "refined_solution", "six fractions", '"state_R1"', '"state_R2"', "Historical mobility"):
        assert field in text
    assert "# Peer Messages" not in text
    assert text == GOLDEN.read_text(encoding="utf-8")


def test_prompt_includes_peer_messages(cfg3):
    obs = _observe(cfg3)
    msg = make_message(obs["R1"], ExpertBackend().decide(obs["R1"], [], DecisionContext()).action)
    text = render_prompt(obs["R0"], [msg])
    assert "# Peer Messages" in text and "R1: R_t" in text


def _tir_response(fracs):
    body = ", ".join(f'"state_{o}": {json.dumps(v)}' for o, v in fracs.items())
    return f"think_process: reasons.\nrefined_solution: {{{body}}}"


def test_parse_well_formed():
    p = [0.05, 0.05, 0.15, 0.15, 0.3, 0.3]
    a = parse_action(_tir_response({"A": p, "B": [1 / 6] * 6}), "tir", "X", ("A", "B"), 6)
    assert isinstance(a, TirAction) and not a.repaired
    assert a.allocations["A"].tolist() == p


def test_parse_repairs_sum():
    p = [0.1, 0.1, 0.1, 0.2, 0.2, 0.28]
    a = parse_action(_tir_response({"A": p}), "tir", "X", ("A",), 6)
    assert a.repaired
    np.testing.assert_allclose(a.allocations["A"].fractions, np.array(p) / 0.98)


@pytest.mark.parametrize("text, match", [
    ("no answer here", "lacks refined_solution"),
    ('refined_solution: {"state_A": [0.5, 0.5]}', "2 fractions|expected 6"),
    ('refined_solution: {"state_Z": [1,1,1,1,1,1]}', "unknown region"),
    ('refined_solution: {"state_A": [1,1,1,1,1,1]}', "misses origin"),
    ("refined_solution: {not json}", "not valid JSON"),
    ('refined_solution: {"state_A": [0,0,0,0,0,0], "state_B": [1,1,1,1,1,1]}', "no positive"),
])
def test_parse_errors(text, match):
    with pytest.raises(ParseError, match=match):
        parse_action(text, "tir", "X", ("A", "B"), 6)


def test_parse_sis_tis():
    a = parse_action('refined_solution: {"origin": "state_b"}', "sis", "X", ("A", "B"), 6, window=10)
    assert a == SisOrder("X", "B", 0.5, 0, 10, True)
    b = parse_action('refined_solution: {"origin": "A"}', "tis", "X", ("A", "B"), 6, eta=0.7)
    assert b == TisOrder("X", "A", 0, 14, 0.7)
    with pytest.raises(ParseError):
        parse_action('refined_solution: {"origin": "X"}', "sis", "X", ("A", "B"), 6)


def test_message_roundtrip_and_bound():
    m = Message("A", 3, 1.234, -1, ("B", "C"))
    assert Message.deserialize(m.serialize()) == m
    assert Message.deserialize(Message("A", 0, None, 0, ()).serialize()).rt_mean is None
    long = Message("A", 0, 1.0, 1, tuple(f"R{k:04d}" for k in range(500)))
    assert len(long.serialize()) <= 512


def test_expert_ties_give_uniform():
    cfg = make_config(3, 63)
    for o in _observe(cfg).values():
        a = ExpertBackend().decide(o, [], DecisionContext()).action
        for alloc in a.allocations.values():
            np.testing.assert_allclose(alloc.fractions, 1 / 6)
            assert not alloc.repaired


def _summary(code, trend):
    return RegionSummary(code, (1e5, 0, 0, 0, 0, 0), 1e5, 1e-4, 0.0, 0.0, trend, 1.0)


def test_expert_targets_growing_origin():
    trends = {"R0": 1.0, "R1": 3.0, "R2": 1.0, "R3": 1.0}
    flat = {o: 50.0 for o in ("R1", "R2", "R3")}
    obs = Observation(
        "R0", 0, 21, "tir", 6, 42, _summary("R0", 1.0),
        tuple(_summary(c, t) for c, t in trends.items() if c != "R0"), 21,
        hist_avg=flat, projected_weekly={o: (350.0,) * 6 for o in flat}, projected_avg=flat,
    )
    backend = ExpertBackend()
    d = backend.decide(obs, [], DecisionContext())
    assert classify_policy(d.action.allocations["R1"]) == PolicyType.STRICT_FIRST
    for o in ("R2", "R3"):
        assert classify_policy(d.action.allocations[o]) == PolicyType.RELAXED_FIRST
    assert not d.action.repaired
    s = backend.decide(obs, [], DecisionContext(strategy="sis"))
    assert isinstance(s.action, SisOrder) and s.action.origin == "R1"


def test_random_backend_seeded(cfg3):
    o = _observe(cfg3)["R0"]
    a = RandomBackend(7).decide(o, [], DecisionContext()).action
    b = RandomBackend(7).decide(o, [], DecisionContext()).action
    assert a.allocations == b.allocations
    for alloc in a.allocations.values():
        assert np.all(alloc.fractions > 0) and alloc.fractions.sum() == pytest.approx(1, abs=1e-12)
    t = RandomBackend(1).decide(o, [], DecisionContext(strategy="tis")).action
    assert isinstance(t, TisOrder) and t.origin in o.origins


def test_scripted_passthrough(cfg3):
    obs = _observe(cfg3)
    script = {c: [{o: [1, 1, 1, 1, 2, 2] for o in obs[c].origins}] for c in obs}
    agents = {c: ScriptedBackend(s) for c, s in script.items()}
    t = Transcript()
    out = coordinate_round(agents, obs, 1, DecisionContext(), t)
    for c, d in out.items():
        for alloc in d.action.allocations.values():
            np.testing.assert_allclose(alloc.fractions, np.array([1, 1, 1, 1, 2, 2]) / 8)
        assert d.repaired
    assert t.decision_calls == 3 and t.message_ingestions == 0


class FollowPeers(Backend):
    """TIS: target whatever origin peers rank tightest, else the first origin."""

    name = "follow"

    def decide(self, obs, messages, ctx):
        for m in messages:
            for o in m.ranking:
                if o in obs.origins:
                    return Decision(ctx.order(obs.region, o))
        return Decision(ctx.order(obs.region, obs.origins[0]))


def test_two_rounds_react_to_messages(cfg3):
    obs = _observe(cfg3)
    ctx = DecisionContext(strategy="tis")
    agents = {"R0": ScriptedBackend(["R2"]), "R1": ScriptedBackend(["R2"]), "R2": FollowPeers()}
    one = coordinate_round(agents, obs, 1, ctx)
    two = coordinate_round(agents, obs, 2, ctx)
    # R2 cannot target itself, so it picks the next origin named by peers
    assert one["R2"].action.origin == "R0"
    assert two["R0"].action == one["R0"].action
    agents["R2"] = FollowPeers()
    agents["R0"] = ScriptedBackend(["R1"])
    t = Transcript()
    three = coordinate_round(agents, obs, 2, ctx, t)
    assert three["R2"].action.origin == "R1"
    assert t.decision_calls == 6 and t.message_ingestions == 3
    assert [r.round for r in t.records] == [1, 1, 1, 2, 2, 2]


class Boom(Backend):
    name = "boom"

    def decide(self, obs, messages, ctx):
        raise RuntimeError("backend down")


def test_fallback_keeps_action_set_complete(cfg3):
    obs = _observe(cfg3)
    agents = {"R0": Boom(), "R1": ExpertBackend(), "R2": TextBackend(lambda p: "garbage", sleep=lambda s: None)}
    t = Transcript()
    for strategy in ("tir", "sis"):
        out = coordinate_round(agents, obs, 2, DecisionContext(strategy=strategy), t)
        assert set(out) == {"R0", "R1", "R2"}
        assert out["R0"].fallback and out["R2"].fallback and not out["R1"].fallback
        if strategy == "tir":
            for d in out.values():
                assert set(d.action.allocations) == set(obs[d.action.destination].origins)
        else:
            assert isinstance(out["R0"].action, NoAction)
    assert t.degraded


def test_text_backend_retries_then_succeeds(cfg3):
    o = _observe(cfg3)["R0"]
    replies = iter(["nothing", _tir_response({"R1": [0.5]}), _tir_response({"R1": [1] * 6, "R2": [1] * 6})])
    sleeps = []
    d = TextBackend(lambda p: next(replies), sleep=sleeps.append).decide(o, [], DecisionContext())
    assert d.attempts == 3 and not d.fallback and d.repaired
    assert sleeps == [1.0, 2.0]


def test_text_backend_exhausts_budget(cfg3):
    o = _observe(cfg3)["R0"]
    calls = []
    sleeps = []
    d = TextBackend(lambda p: calls.append(p) or "nope", sleep=sleeps.append).decide(o, [], DecisionContext())
    assert d.fallback and len(calls) == 4 and sleeps == [1.0, 2.0, 4.0]
    for alloc in d.action.allocations.values():
        np.testing.assert_allclose(alloc.fractions, 1 / 6)


def test_remote_completion_request_shape():
    seen = {}

    class Resp:
        def __init__(self, body):
            self.body = body

        def read(self):
            return self.body

        def __enter__(self):
            return self

        def __exit__(self, *a):
            return False

    def opener(req, timeout):
        seen["url"], seen["timeout"] = req.full_url, timeout
        seen["body"] = json.loads(req.data)
        seen["auth"] = req.get_header("Authorization")
        return Resp(b'{"text": "hello"}')

    rc = RemoteCompletion("http://localhost:9/x", "m1", token="tok", opener=opener)
    assert rc("prompt") == "hello"
    assert seen["body"] == {"model": "m1", "prompt": "prompt", "max_tokens": 1024, "temperature": 0.0}
    assert seen["auth"] == "Bearer tok" and seen["timeout"] == 60.0
    bad = RemoteCompletion("http://localhost:9/x", "m1", opener=lambda r, timeout: Resp(b"[]"))
    with pytest.raises(ValueError):
        bad("p")


def test_remote_needs_url(monkeypatch):
    monkeypatch.delenv("EPICOORD_LLM_URL", raising=False)
    with pytest.raises(ValueError, match="EPICOORD_LLM_URL"):
        make_backend("remote")


def test_make_backend(tmp_path):
    assert isinstance(make_backend("expert"), ExpertBackend)
    assert isinstance(make_backend("random", seed=3), RandomBackend)
    (tmp_path / "s.json").write_text('["A"]')
    assert isinstance(make_backend("scripted:s.json", base_dir=tmp_path), ScriptedBackend)
    with pytest.raises(ValueError):
        make_backend("oracle")


class Slow(Backend):
    name = "slow"

    def __init__(self, barrier):
        self.barrier = barrier

    def decide(self, obs, messages, ctx):
        self.barrier.wait(timeout=5)
        return ExpertBackend().decide(obs, messages, ctx)


def test_concurrent_round_matches_serial(cfg3):
    obs = _observe(cfg3)
    barrier = threading.Barrier(3)
    par = coordinate_round({c: Slow(barrier) for c in obs}, obs, 2, DecisionContext(), max_workers=3)
    ser = coordinate_round({c: ExpertBackend() for c in obs}, obs, 2, DecisionContext())
    for c in obs:
        assert par[c].action.allocations == ser[c].action.allocations


def test_transcript_deterministic(cfg3, tmp_path):
    obs = _observe(cfg3)

    def once():
        t = Transcript()
        agents = {c: RandomBackend(k) for k, c in enumerate(obs)}
        coordinate_round(agents, obs, 2, DecisionContext(), t)
        return t.lines()

    assert once() == once()
