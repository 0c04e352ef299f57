"""Observation building, prompts, message passing and decision backends."""
from .backends import (
    Backend,
    Decision,
    DecisionContext,
    ExpertBackend,
    RandomBackend,
    RemoteCompletion,
    ScriptedBackend,
    TextBackend,
    fallback_action,
    make_backend,
)
from .coordination import Transcript, TranscriptRecord, action_to_json, coordinate_round
from .messages import Message, make_message
from .observation import Observation, RegionSummary, build_observation, summarize_all
from .prompt import ParseError, parse_action, render_prompt

__all__ = [
    "Backend",
    "Decision",
    "DecisionContext",
    "ExpertBackend",
    "Message",
    "Observation",
    "ParseError",
    "RandomBackend",
    "RegionSummary",
    "RemoteCompletion",
    "ScriptedBackend",
    "TextBackend",
    "Transcript",
    "TranscriptRecord",
    "action_to_json",
    "build_observation",
    "coordinate_round",
    "fallback_action",
    "make_backend",
    "make_message",
    "parse_action",
    "render_prompt",
    "summarize_all",
]
