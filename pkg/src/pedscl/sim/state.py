from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import AgentState


@dataclass
class SimState:
    """Per-slot arrays for every pedestrian of an episode.

    ``routes[k]`` holds slot k's cyclic waypoints (None for point goals).

    Slots persist over the episode; a slot whose agent reached its goal gets a
    fresh ``id`` on respawn. Inactive slots are waiting for free spawn space.
    """

    tick: int
    ids: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    goal: np.ndarray
    v_pref: np.ndarray
    routes: tuple
    wp: np.ndarray
    active: np.ndarray
    next_id: int
    rng_state: dict | None = field(default=None, compare=False)

    def copy(self) -> SimState:
        return SimState(
            self.tick,
            self.ids.copy(),
            self.pos.copy(),
            self.vel.copy(),
            self.goal.copy(),
            self.v_pref.copy(),
            self.routes,
            self.wp.copy(),
            self.active.copy(),
            self.next_id,
            self.rng_state,
        )

    @property
    def agents(self) -> list[AgentState]:
        return [
            AgentState(int(self.ids[k]), self.pos[k].copy(), self.vel[k].copy(), self.tick)
            for k in np.flatnonzero(self.active)
        ]

    def snapshot(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(ids, positions, velocities) of the active agents."""
        act = self.active
        return self.ids[act].copy(), self.pos[act].copy(), self.vel[act].copy()
