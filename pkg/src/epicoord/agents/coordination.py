"""Synchronized multi-round decision making with message passing."""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from ..policy import NoAction, SisOrder, TirAction, TisOrder
from .backends import Backend, Decision, DecisionContext, fallback_action
from .messages import Message, make_message
from .observation import Observation
from .prompt import render_prompt

log = logging.getLogger(__name__)


def action_to_json(action) -> dict:
    if isinstance(action, TirAction):
        return {"type": "tir", "destination": action.destination,
                "allocations": {o: a.tolist() for o, a in action.allocations.items()}}
    if isinstance(action, SisOrder):
        return {"type": "sis", "destination": action.destination, "origin": action.origin,
                "factor": action.factor, "start": action.start, "window": action.window,
                "redistribute": action.redistribute}
    if isinstance(action, TisOrder):
        return {"type": "tis", "destination": action.destination, "origin": action.origin,
                "start": action.start, "window": action.window, "eta": action.eta}
    if isinstance(action, NoAction):
        return {"type": "none", "destination": action.destination, "reason": action.reason}
    raise TypeError(f"not an action: {action!r}")


@dataclass(frozen=True)
class TranscriptRecord:
    cycle: int
    round: int
    region: str
    prompt_hash: str
    raw_response: str
    action: dict
    repaired: bool
    fallback: bool

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, separators=(",", ":"))


@dataclass
class Transcript:
    """Append-only decision log."""

    records: list = field(default_factory=list)
    decision_calls: int = 0
    message_ingestions: int = 0

    def append(self, record: TranscriptRecord) -> None:
        self.records.append(record)

    @property
    def degraded(self) -> bool:
        return any(r.fallback for r in self.records)

    def lines(self) -> list:
        return [r.to_json() for r in self.records]

    def write(self, path) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.lines()), encoding="utf-8")


def _decide(backend: Backend, obs: Observation, inbox, ctx) -> Decision:
    try:
        return backend.decide(obs, inbox, ctx)
    except Exception as exc:  # any backend failure degrades only this region
        log.warning("region %s backend %s failed: %s", obs.region, backend.name, exc)
        return Decision(fallback_action(obs, ctx), fallback=True, error=str(exc))


def coordinate_round(
    agents: Mapping[str, Backend],
    observations: Mapping[str, Observation],
    rounds: int,
    ctx: DecisionContext,
    transcript: Transcript | None = None,
    max_workers: int = 1,
):
    """Run ``rounds`` synchronized decision rounds and return the last
    round's ``{region: Decision}``.

    Round 1 decides from observations alone; later rounds see every peer's
    message from the previous round. A round completes for all regions
    before any of its messages are delivered.
    """
    if rounds < 1:
        raise ValueError("need at least one round")
    transcript = transcript if transcript is not None else Transcript()
    regions = list(observations)
    messages: dict[str, Message] = {}
    decisions: dict[str, Decision] = {}
    for k in range(1, rounds + 1):
        inboxes = {}
        for r in regions:
            inboxes[r] = [messages[p] for p in regions if p != r and p in messages]
            if k > 1:
                transcript.message_ingestions += 1

        def run(r):
            return _decide(agents[r], observations[r], inboxes[r], ctx)

        if max_workers > 1:
            with ThreadPoolExecutor(max_workers) as pool:
                results = list(pool.map(run, regions))
        else:
            results = [run(r) for r in regions]
        decisions = dict(zip(regions, results))
        transcript.decision_calls += len(regions)

        for r in regions:
            d = decisions[r]
            prompt = render_prompt(observations[r], inboxes[r], ctx.strategy)
            transcript.append(TranscriptRecord(
                cycle=observations[r].cycle,
                round=k,
                region=r,
                prompt_hash=hashlib.sha256(prompt.encode()).hexdigest(),
                raw_response=d.raw_response,
                action=action_to_json(d.action),
                repaired=bool(d.repaired),
                fallback=bool(d.fallback),
            ))
        messages = {r: make_message(observations[r], decisions[r].action) for r in regions}
    return decisions
