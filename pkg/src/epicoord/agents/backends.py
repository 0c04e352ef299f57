"""Decision backends: scripted replay, seeded random, expert heuristic and
text-in/text-out models (local callables or a remote HTTP endpoint)."""
from __future__ import annotations

import json
import logging
import os
import time
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..policy import (
    ActionError,
    NoAction,
    SisOrder,
    TirAction,
    TisOrder,
    normalize_tir,
    phase_template,
    uniform_allocation,
)
from .observation import Observation
from .prompt import ParseError, parse_action, render_prompt

log = logging.getLogger(__name__)

ENV_URL = "EPICOORD_LLM_URL"
ENV_TOKEN = "EPICOORD_LLM_TOKEN"
ENV_MODEL = "EPICOORD_LLM_MODEL"


@dataclass(frozen=True)
class DecisionContext:
    strategy: str = "tir"
    horizon_weeks: int = 6
    start: int = 0
    window: int = 14
    factor: float = 0.5
    redistribute: bool = True
    eta: float = 1.0

    def order(self, destination: str, origin: str):
        if self.strategy == "sis":
            return SisOrder(destination, origin, self.factor, self.start, self.window, self.redistribute)
        return TisOrder(destination, origin, self.start, self.window, self.eta)


@dataclass
class Decision:
    action: object
    raw_response: str = ""
    repaired: bool = False
    fallback: bool = False
    attempts: int = 1
    error: str = ""


def fallback_action(obs: Observation, ctx: DecisionContext):
    """Neutral action: uniform reallocation under TIR, nothing otherwise."""
    if ctx.strategy == "tir":
        return TirAction(obs.region, {o: uniform_allocation(ctx.horizon_weeks) for o in obs.origins})
    return NoAction(obs.region, "fallback")


class Backend:
    name = "backend"

    def decide(self, obs: Observation, messages: Sequence, ctx: DecisionContext) -> Decision:
        raise NotImplementedError


class ScriptedBackend(Backend):
    """Replays a fixed action per cycle; the last entry repeats.

    Entries may be ready actions, ``{origin: fractions}`` mappings (TIR) or an
    origin code (SIS/TIS).
    """

    name = "scripted"

    def __init__(self, script: Sequence):
        if not script:
            raise ValueError("empty script")
        self.script = list(script)

    @classmethod
    def from_file(cls, path) -> ScriptedBackend:
        return cls(json.loads(Path(path).read_text()))

    def decide(self, obs, messages, ctx):
        entry = self.script[min(obs.cycle, len(self.script) - 1)]
        if isinstance(entry, (TirAction, SisOrder, TisOrder, NoAction)):
            return Decision(entry)
        if ctx.strategy == "tir":
            allocs = {o: normalize_tir(entry[o]) for o in obs.origins}
            action = TirAction(obs.region, allocs)
            return Decision(action, repaired=action.repaired)
        if entry is None:
            return Decision(NoAction(obs.region, "scripted"))
        return Decision(ctx.order(obs.region, str(entry)))


class RandomBackend(Backend):
    """Symmetric Dirichlet(1) fractions per origin, or a uniformly drawn target."""

    name = "random"

    def __init__(self, seed: int = 0, alpha: float = 1.0):
        self.rng = np.random.default_rng(seed)
        self.alpha = alpha

    def decide(self, obs, messages, ctx):
        if ctx.strategy == "tir":
            allocs = {}
            for o in obs.origins:
                allocs[o] = normalize_tir(self.rng.dirichlet(np.full(ctx.horizon_weeks, self.alpha)))
            return Decision(TirAction(obs.region, allocs))
        if not obs.origins:
            return Decision(NoAction(obs.region, "no origins"))
        return Decision(ctx.order(obs.region, obs.origins[self.rng.integers(len(obs.origins))]))


class ExpertBackend(Backend):
    """Risk-ranked heuristic.

    An origin's risk is its incidence growth (recent over preceding 7-day
    IR) times its projected inflow. Relative to the mean risk over origins,
    scores above ``high`` get the back-loaded template, scores below ``low``
    the front-loaded mirror, the rest a uniform allocation. Under SIS/TIS
    the single riskiest origin is targeted.
    """

    name = "expert"

    def __init__(self, shares=(0.1, 0.3, 0.6), high=1.25, low=0.75):
        self.shares = tuple(shares)
        self.high = high
        self.low = low

    def risk(self, obs: Observation) -> dict:
        return {o: obs.summary(o).ir_trend * obs.projected_avg[o] for o in obs.origins}

    def decide(self, obs, messages, ctx):
        risk = self.risk(obs)
        if ctx.strategy != "tir":
            if not risk or max(risk.values()) <= 0:
                return Decision(NoAction(obs.region, "no risky origin"))
            target = max(sorted(risk), key=lambda o: risk[o])
            return Decision(ctx.order(obs.region, target))

        H = ctx.horizon_weeks
        strict = phase_template(H, self.shares)
        relaxed = strict[::-1].copy()
        uniform = np.full(H, 1.0 / H)
        mean = float(np.mean(list(risk.values()))) if risk else 0.0
        allocs = {}
        for o, r in risk.items():
            score = r / mean if mean > 0 else 1.0
            if score > self.high:
                p = strict
            elif score < self.low:
                p = relaxed
            else:
                p = uniform
            allocs[o] = normalize_tir(p)
        return Decision(TirAction(obs.region, allocs))


class TextBackend(Backend):
    """Wraps a ``complete(prompt) -> text`` callable with parsing, retries
    and a neutral fallback."""

    name = "text"

    def __init__(self, complete: Callable[[str], str], retries: int = 3, backoff=(1.0, 2.0, 4.0),
                 sleep: Callable[[float], None] = time.sleep):
        self.complete = complete
        self.retries = retries
        self.backoff = tuple(backoff)
        self.sleep = sleep

    def decide(self, obs, messages, ctx):
        prompt = render_prompt(obs, messages, ctx.strategy)
        error = ""
        raw = ""
        for attempt in range(self.retries + 1):
            if attempt:
                self.sleep(self.backoff[min(attempt - 1, len(self.backoff) - 1)])
            try:
                raw = self.complete(prompt)
                action = parse_action(
                    raw, ctx.strategy, obs.region, obs.origins, ctx.horizon_weeks,
                    start=ctx.start, window=ctx.window, factor=ctx.factor,
                    redistribute=ctx.redistribute, eta=ctx.eta,
                )
            except (ParseError, ActionError, OSError, ValueError) as exc:
                error = str(exc)
                log.info("region %s attempt %d rejected: %s", obs.region, attempt + 1, error)
                continue
            repaired = getattr(action, "repaired", False)
            return Decision(action, raw, repaired=repaired, attempts=attempt + 1)
        log.warning("region %s: backend degraded after %d attempts (%s)", obs.region, self.retries + 1, error)
        return Decision(fallback_action(obs, ctx), raw, fallback=True, attempts=self.retries + 1, error=error)


@dataclass
class RemoteCompletion:
    """``complete`` callable posting ``{model, prompt, max_tokens, temperature}``
    and reading ``{"text": ...}`` back."""

    url: str
    model: str
    token: str | None = None
    max_tokens: int = 1024
    temperature: float = 0.0
    timeout: float = 60.0
    opener: Callable = field(default=urllib.request.urlopen, repr=False)

    @classmethod
    def from_env(cls, model: str | None = None) -> RemoteCompletion:
        url = os.environ.get(ENV_URL)
        if not url:
            raise ValueError(f"remote backend needs {ENV_URL} to be set")
        return cls(url=url, model=model or os.environ.get(ENV_MODEL, "default"), token=os.environ.get(ENV_TOKEN))

    def __call__(self, prompt: str) -> str:
        body = json.dumps({
            "model": self.model,
            "prompt": prompt,
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
        }).encode()
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
        with self.opener(req, timeout=self.timeout) as resp:
            payload = json.loads(resp.read().decode())
        if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
            raise ValueError("remote response lacks a text field")
        return payload["text"]


def make_backend(spec: str, seed: int = 0, base_dir=None) -> Backend:
    """Backend from a spec string: ``expert``, ``random``, ``scripted:<json>``,
    ``remote`` or ``remote:<model id>``."""
    kind, _, arg = spec.partition(":")
    kind = kind.strip().lower()
    if kind == "expert":
        return ExpertBackend()
    if kind == "random":
        return RandomBackend(seed)
    if kind == "scripted":
        path = Path(arg)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        return ScriptedBackend.from_file(path)
    if kind == "remote":
        return TextBackend(RemoteCompletion.from_env(arg or None))
    raise ValueError(f"unknown backend spec {spec!r}")
