"""Crowd simulation: SFM for open rooms, RVO where static obstacles matter."""

from .dynamics import rvo_step, sfm_step
from .runner import Frame, advance_goals, frames, initial_state, read_stream, run_scenario, write_stream
from .scenarios import (
    AgentSpec,
    RVOParams,
    Scenario,
    SFMParams,
    SpawnPair,
    load_scenario,
    make_scenario,
)
from .state import SimState

__all__ = [
    "AgentSpec",
    "Frame",
    "RVOParams",
    "SFMParams",
    "Scenario",
    "SimState",
    "SpawnPair",
    "advance_goals",
    "frames",
    "initial_state",
    "load_scenario",
    "make_scenario",
    "read_stream",
    "run_scenario",
    "rvo_step",
    "sfm_step",
    "write_stream",
]
