"""Inter-agent broadcast payloads."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ..policy import NoAction, SisOrder, TirAction, TisOrder
from .observation import Observation

MAX_MESSAGE_CHARS = 512


@dataclass(frozen=True)
class Message:
    sender: str
    cycle: int
    rt_mean: float | None
    ir_trend_sign: int
    ranking: tuple  # origin codes, tightest control first

    def serialize(self) -> str:
        payload = {
            "sender": self.sender,
            "cycle": self.cycle,
            "rt": self.rt_mean,
            "trend": self.ir_trend_sign,
            "ranking": list(self.ranking),
        }
        text = json.dumps(payload, separators=(",", ":"))
        while len(text) > MAX_MESSAGE_CHARS and payload["ranking"]:
            payload["ranking"].pop()
            text = json.dumps(payload, separators=(",", ":"))
        return text

    @classmethod
    def deserialize(cls, text: str) -> Message:
        d = json.loads(text)
        return cls(d["sender"], int(d["cycle"]), d["rt"], int(d["trend"]), tuple(d["ranking"]))

    def describe(self) -> str:
        rt = "n/a" if self.rt_mean is None else f"{self.rt_mean:.3f}"
        trend = {1: "rising", -1: "falling", 0: "flat"}[self.ir_trend_sign]
        ranking = ", ".join(self.ranking) if self.ranking else "none"
        return f"{self.sender}: R_t {rt}, incidence {trend}; tightest controls on: {ranking}"


def _ranking(obs: Observation, action) -> tuple:
    if isinstance(action, TirAction):
        early = {o: float(np.asarray(a.fractions)[: max(1, len(a.fractions) // 3)].sum())
                 for o, a in action.allocations.items()}
        return tuple(sorted(early, key=lambda o: (early[o], o)))
    if isinstance(action, (SisOrder, TisOrder)):
        rest = sorted((o for o in obs.origins if o != action.origin))
        return (action.origin, *rest)
    return ()


def make_message(obs: Observation, action) -> Message:
    """Extract the broadcast digest from an observation and a provisional action."""
    return Message(
        sender=obs.region,
        cycle=obs.cycle,
        rt_mean=obs.local.rt_mean,
        ir_trend_sign=obs.local.trend_sign,
        ranking=_ranking(obs, action) if not isinstance(action, NoAction) else (),
    )
