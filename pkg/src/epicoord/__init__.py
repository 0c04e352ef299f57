"""Metapopulation SEIQRD simulation with coordinated, agent-driven mobility
policies, plus calibration, R_t estimation and attribution tools."""
from .dynamics import Trajectory, run, simulate, step
from .scenario import (
    CompartmentState,
    EpiParams,
    MobilitySchedule,
    ScenarioConfig,
    ScenarioError,
    load_scenario,
    validate_scenario,
)

__version__ = "0.1.0"

__all__ = [
    "CompartmentState",
    "EpiParams",
    "MobilitySchedule",
    "ScenarioConfig",
    "ScenarioError",
    "Trajectory",
    "load_scenario",
    "run",
    "simulate",
    "step",
    "validate_scenario",
]
