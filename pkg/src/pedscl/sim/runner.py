"""Episode setup, goal bookkeeping and the seeded state stream."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .dynamics import _rect_closest, rvo_step, sfm_step
from .scenarios import AgentSpec, Scenario
from .state import SimState

SPAWN_GAP = 0.2  # extra clearance between a new agent and existing ones
WALL_GAP = 0.05


def _uniform(rng: np.random.Generator, box) -> np.ndarray:
    return np.array([rng.uniform(box[0], box[2]), rng.uniform(box[1], box[3])])


def _is_clear(p: np.ndarray, others: np.ndarray, scenario: Scenario) -> bool:
    if len(others) and np.min(np.hypot(*(others - p).T)) < 2 * scenario.radius + SPAWN_GAP:
        return False
    rects = scenario.obstacle_array
    if len(rects):
        _, d = _rect_closest(p[None], rects)
        if d.min() < scenario.radius + WALL_GAP:
            return False
    if scenario.map.occupied_at(p):
        return False
    return True


def _free_point(rng, box, others, scenario, tries=30) -> np.ndarray | None:
    for _ in range(tries):
        p = _uniform(rng, box)
        if _is_clear(p, others, scenario):
            return p
    return None


def _lane_route(route: np.ndarray, offset: float) -> np.ndarray:
    centroid = route.mean(axis=0)
    return route + offset * np.sign(centroid - route)


def _point_on_route(route: np.ndarray, s: float) -> tuple[np.ndarray, int]:
    """Position at arc length ``s`` along the closed route and the index of the next waypoint."""
    seg = np.roll(route, -1, axis=0) - route
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    s = s % lengths.sum()
    k = int(np.searchsorted(np.cumsum(lengths), s, side="right"))
    k = min(k, len(route) - 1)
    before = lengths[:k].sum()
    p = route[k] + seg[k] * ((s - before) / lengths[k])
    return p, (k + 1) % len(route)


def _empty_state(n: int) -> SimState:
    return SimState(
        tick=0,
        ids=np.full(n, -1, dtype=np.int64),
        pos=np.zeros((n, 2)),
        vel=np.zeros((n, 2)),
        goal=np.zeros((n, 2)),
        v_pref=np.zeros(n),
        routes=tuple([None] * n),
        wp=np.zeros(n, dtype=np.int64),
        active=np.zeros(n, dtype=bool),
        next_id=0,
    )


def initial_state(scenario: Scenario, rng: np.random.Generator) -> SimState:
    n = scenario.n_pedestrians
    st = _empty_state(n)
    routes = [None] * n
    lo, hi = scenario.speed_range
    x0, y0, x1, y1 = scenario.map.extent
    for k in range(n):
        placed = st.pos[st.active]
        st.v_pref[k] = rng.uniform(lo, hi)
        if scenario.mode == "cyclic":
            r = k % len(scenario.routes)
            base = scenario.routes[r]
            lane = scenario.route_lanes[r] if scenario.route_lanes else 0.0
            for _ in range(50):
                route = _lane_route(base, lane + rng.uniform(-scenario.lane_spread, scenario.lane_spread))
                total = np.hypot(*(np.roll(route, -1, 0) - route).T).sum()
                s = (k / n + rng.uniform(0.0, 0.5 / n)) * total
                p, nxt = _point_on_route(route, s)
                if _is_clear(p, placed, scenario):
                    break
            routes[k] = route
            st.pos[k], st.wp[k], st.goal[k] = p, nxt, route[nxt]
        else:
            pair = scenario.spawn_set[rng.integers(len(scenario.spawn_set))]
            box = pair.start if scenario.mode == "wander" else (x0, y0, x1, y1)
            p = _free_point(rng, box, placed, scenario, tries=200)
            if p is None:
                raise RuntimeError(f"could not place agent {k} in scenario {scenario.name!r}")
            st.pos[k] = p
            st.goal[k] = _uniform(rng, pair.goal)
        st.ids[k] = st.next_id
        st.next_id += 1
        st.active[k] = True
    st.routes = tuple(routes)
    st.rng_state = rng.bit_generator.state
    return st


def sample_initial_agents(scenario: Scenario, rng: np.random.Generator) -> list[AgentSpec]:
    st = initial_state(scenario, rng)
    specs = []
    for k in range(scenario.n_pedestrians):
        route = st.routes[k]
        wps = tuple(map(tuple, route)) if route is not None else (tuple(st.goal[k]),)
        specs.append(AgentSpec(tuple(st.pos[k]), wps, float(st.v_pref[k]), route is not None))
    return specs


def advance_goals(state: SimState, scenario: Scenario, rng: np.random.Generator) -> SimState:
    """Switch waypoints, retire agents at point goals and respawn waiting slots."""
    st = state.copy()
    for k in np.flatnonzero(st.active):
        dist = np.hypot(*(st.goal[k] - st.pos[k]))
        if scenario.mode == "cyclic":
            if dist < scenario.switch_radius:
                route = st.routes[k]
                st.wp[k] = (st.wp[k] + 1) % len(route)
                st.goal[k] = route[st.wp[k]]
        elif dist < scenario.arrive_radius:
            if scenario.mode == "wander":
                pair = scenario.spawn_set[rng.integers(len(scenario.spawn_set))]
                st.goal[k] = _uniform(rng, pair.goal)
            else:
                st.active[k] = False
    if scenario.mode == "point":
        lo, hi = scenario.speed_range
        for k in np.flatnonzero(~st.active):
            pair = scenario.spawn_set[rng.integers(len(scenario.spawn_set))]
            p = _free_point(rng, pair.start, st.pos[st.active], scenario)
            if p is None:
                continue
            st.ids[k] = st.next_id
            st.next_id += 1
            st.pos[k], st.vel[k] = p, 0.0
            st.goal[k] = _uniform(rng, pair.goal)
            st.v_pref[k] = rng.uniform(lo, hi)
            st.active[k] = True
    st.rng_state = rng.bit_generator.state
    return st


def step(state: SimState, scenario: Scenario, dt: float) -> SimState:
    if scenario.stepper == "sfm":
        return sfm_step(state, scenario, dt)
    return rvo_step(state, scenario, dt)


def run_scenario(scenario: Scenario, ticks: int, seed, dt: float = 0.2) -> Iterator[SimState]:
    """Yield ``ticks`` consecutive states starting at tick 0.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if ticks < 1:
        raise ValueError("ticks must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    state = initial_state(scenario, rng)
    yield state
    for _ in range(ticks - 1):
        state = advance_goals(step(state, scenario, dt), scenario, rng)
        yield state


@dataclass(frozen=True)
class Frame:
    """Observed agents at one tick: what a tracker would report."""

    tick: int
    ids: np.ndarray
    pos: np.ndarray
    vel: np.ndarray

    @classmethod
    def from_state(cls, state: SimState) -> Frame:
        return cls(state.tick, *state.snapshot())


def frames(states: Iterable[SimState]) -> Iterator[Frame]:
    for s in states:
        yield Frame.from_state(s)


STREAM_MAGIC = b"PSCLSTRM"
STREAM_VERSION = 1


def write_stream(frames_: Iterable[Frame], path: str | Path, scenario_name: str = "") -> int:
    """Length-prefixed binary records, one per tick. Returns the number of frames."""
    count = 0
    with open(path, "wb") as fh:
        fh.write(STREAM_MAGIC + struct.pack("<I", STREAM_VERSION))
        name = scenario_name.encode()
        fh.write(struct.pack("<I", len(name)) + name)
        for fr in frames_:
            n = len(fr.ids)
            body = (
                struct.pack("<qI", fr.tick, n)
                + np.asarray(fr.ids, "<i8").tobytes()
                + np.asarray(fr.pos, "<f8").tobytes()
                + np.asarray(fr.vel, "<f8").tobytes()
            )
            fh.write(struct.pack("<Q", len(body)) + body)
            count += 1
    return count


def read_stream(path: str | Path) -> tuple[str, list[Frame]]:
    out = []
    with open(path, "rb") as fh:
        if fh.read(len(STREAM_MAGIC)) != STREAM_MAGIC:
            raise ValueError(f"{path} is not a stream file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != STREAM_VERSION:
            raise ValueError(f"unsupported stream version {version}")
        (ln,) = struct.unpack("<I", fh.read(4))
        name = fh.read(ln).decode()
        while head := fh.read(8):
            (size,) = struct.unpack("<Q", head)
            body = fh.read(size)
            tick, n = struct.unpack("<qI", body[:12])
            off = 12
            ids = np.frombuffer(body, "<i8", n, off).copy()
            off += 8 * n
            pos = np.frombuffer(body, "<f8", 2 * n, off).reshape(n, 2).copy()
            off += 16 * n
            vel = np.frombuffer(body, "<f8", 2 * n, off).reshape(n, 2).copy()
            out.append(Frame(tick, ids, pos, vel))
    return name, out
