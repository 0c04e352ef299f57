"""Structured prompt rendering and response parsing for text backends."""
from __future__ import annotations

import json
import re
from typing import Sequence

from ..policy import ActionError, SisOrder, TirAction, TisOrder, normalize_tir
from .observation import Observation

_ORDINALS = {1: "one", 2: "two", 3: "three", 4: "four", 5: "five", 6: "six", 7: "seven", 8: "eight"}


class ParseError(ValueError):
    """The response does not follow the required output schema."""


def _fmt(v: float) -> str:
    return f"{v:,.1f}"


def _stats_line(s) -> str:
    S, E, I, Q, R, D = s.state
    rt = "n/a" if s.rt_mean is None else f"{s.rt_mean:.3f}"
    return (
        f"  - {s.code}: S={_fmt(S)}, E={_fmt(E)}, I={_fmt(I)}, Q={_fmt(Q)}, R={_fmt(R)}, D={_fmt(D)}; "
        f"IR(7d)={s.ir:.3e}, DR(7d)={s.dr:.3e}, ACR={s.acr:.3e}, IR trend x{s.ir_trend:.3f}, R_t={rt}"
    )


def render_prompt(obs: Observation, messages: Sequence = (), strategy: str | None = None) -> str:
    """Deterministic prompt with guidance, inputs, optional peer messages,
    constraints and the output schema (``think_process``/``refined_solution``)."""
    strategy = (strategy or obs.strategy).lower()
    H = obs.horizon_weeks
    days = obs.cycle_days
    region = obs.region
    lines = ["# System Guidance"]
    lines.append(f"You advise the epidemic-control and mobility authority of region {region}.")
    if strategy == "tir":
        lines.append(
            f"Goal: slow disease spread by timing inbound travel. For every origin region, decide how the "
            f"inbound volume into {region} is spread across the next {H} weeks. The {H}-week total per origin "
            f"is fixed to the baseline total; only the weekly proportions may change."
        )
    elif strategy == "sis":
        lines.append(
            f"Goal: slow disease spread by suppressing inbound travel. Pick one origin region whose flow into "
            f"{region} is cut by the configured factor for the next {days} days."
        )
    else:
        lines.append(
            f"Goal: slow disease spread by screening arrivals. Pick one origin region whose travellers into "
            f"{region} are screened for the next {days} days; detected exposed or infectious travellers are isolated."
        )
    lines.append("")
    lines.append("# Inputs")
    lines.append(
        f"- Pandemic statistics (persons per compartment: Susceptible S, Exposed E, Infected I, "
        f"Confirmed Q, Recovered R, Deaths D) for {region} and other regions:"
    )
    lines.append(_stats_line(obs.local))
    for s in obs.neighbors:
        lines.append(_stats_line(s))
    hist_note = f"{obs.history_days}-day" + (" (short history)" if obs.short_history else "")
    lines.append(f"- Historical mobility: past {hist_note} average daily inbound flow into {region}:")
    for origin in obs.origins:
        lines.append(f"  - from {origin}: {_fmt(obs.hist_avg[origin])}")
    lines.append(f"- Planning-horizon baseline: average daily inbound flow for the upcoming {days} days:")
    for origin in obs.origins:
        weekly = ", ".join(_fmt(v) for v in obs.projected_weekly[origin])
        lines.append(f"  - from {origin}: {_fmt(obs.projected_avg[origin])} (weekly totals: {weekly})")
    if messages:
        lines.append("")
        lines.append("# Peer Messages")
        for m in messages:
            lines.append(f"- {m.describe()}")
    lines.append("")
    lines.append("# Constraints")
    if strategy == "tir":
        n = _ORDINALS.get(H, str(H))
        vec = ", ".join(f"p_{{i,{h}}}" for h in range(1, H + 1))
        lines.append(f"- For each origin region i give {n} fractions [{vec}] that sum to 1, each strictly positive.")
        lines.append("- Week h inbound flow from origin i = total flow from i * p_{i,h}.")
        lines.append("- A small p_{i,h} means strict control in week h; a large one means relaxed control.")
    else:
        lines.append("- Name exactly one origin region from the list above; you cannot target yourself.")
    lines.append("")
    lines.append("# Final Output")
    lines.append("Answer in exactly this layout:")
    lines.append("- think_process: at most 200 words summarizing your reasoning.")
    if strategy == "tir":
        example = ", ".join(f'"state_{o}": [{", ".join(["p"] * H)}]' for o in obs.origins)
        lines.append(f"- refined_solution: {{{example}}}")
    else:
        lines.append('- refined_solution: {"origin": "<region code>"}')
    return "\n".join(lines) + "\n"


_KEY = re.compile(r"refined_solution", re.IGNORECASE)


def _extract_object(text: str) -> dict:
    m = _KEY.search(text)
    if not m:
        raise ParseError("response lacks refined_solution")
    start = text.find("{", m.end())
    if start < 0:
        raise ParseError("refined_solution has no JSON object")
    depth = 0
    for k in range(start, len(text)):
        ch = text[k]
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                try:
                    obj = json.loads(text[start : k + 1])
                except json.JSONDecodeError as exc:
                    raise ParseError(f"refined_solution is not valid JSON: {exc}") from None
                if not isinstance(obj, dict):
                    raise ParseError("refined_solution must be an object")
                return obj
    raise ParseError("refined_solution object is not closed")


def _code(key: str) -> str:
    key = str(key).strip()
    if key.lower().startswith("state_"):
        key = key[6:]
    return key.upper()


def parse_action(text: str, strategy: str, destination: str, origins: Sequence[str], horizon: int, *,
                 start: int = 0, window: int = 14, factor: float = 0.5, redistribute: bool = True, eta: float = 1.0):
    """Turn a backend response into a validated action; raises :class:`ParseError`."""
    obj = _extract_object(text)
    origins = tuple(origins)
    strategy = strategy.lower()
    if strategy == "tir":
        got = {}
        for key, value in obj.items():
            code = _code(key)
            if code not in origins:
                raise ParseError(f"unknown region {key!r} in refined_solution")
            if not isinstance(value, list) or len(value) != horizon:
                raise ParseError(f"origin {code}: expected {horizon} fractions")
            try:
                got[code] = normalize_tir([float(v) for v in value])
            except (TypeError, ValueError, ActionError) as exc:
                raise ParseError(f"origin {code}: {exc}") from None
        missing = [o for o in origins if o not in got]
        if missing:
            raise ParseError(f"refined_solution misses origin(s) {missing}")
        return TirAction(destination, {o: got[o] for o in origins})

    value = obj.get("origin")
    if not isinstance(value, str):
        raise ParseError('refined_solution must name one origin as {"origin": "<code>"}')
    code = _code(value)
    if code not in origins:
        raise ParseError(f"unknown region {value!r}")
    if strategy == "sis":
        return SisOrder(destination, code, factor=factor, start=start, window=window, redistribute=redistribute)
    if strategy == "tis":
        return TisOrder(destination, code, start=start, window=window, eta=eta)
    raise ParseError(f"unknown strategy {strategy!r}")
