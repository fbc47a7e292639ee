"""Environment definitions: maps, routes, spawn sets and stepper choice."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..core import OccupancyMap, read_map
from ..config import load_toml

AGENT_RADIUS = 0.3
WALL = 0.2
MAP_RESOLUTION = 0.1


@dataclass(frozen=True)
class SFMParams:
    tau: float = 0.5
    a: float = 2.0
    b: float = 0.3
    wall_a: float = 10.0
    wall_b: float = 0.1
    wall_range: float = 3.0


@dataclass(frozen=True)
class RVOParams:
    time_horizon: float = 2.0
    obstacle_horizon: float = 1.0
    neighbor_dist: float = 5.0
    max_neighbors: int = 10
    safety_margin: float = 0.08
    tie_break: float = 1e-3
    fallback_rings: int = 12
    fallback_angles: int = 72


@dataclass(frozen=True)
class AgentSpec:
    spawn: tuple[float, float]
    waypoints: tuple[tuple[float, float], ...]
    v_pref: float
    cyclic: bool


@dataclass(frozen=True)
class SpawnPair:
    """Start region and goal region, each ``(xmin, ymin, xmax, ymax)``."""

    start: tuple[float, float, float, float]
    goal: tuple[float, float, float, float]


@dataclass
class Scenario:
    name: str
    map: OccupancyMap
    obstacles: list[tuple[float, float, float, float]]
    stepper: str
    n_pedestrians: int
    mode: str  # cyclic | point | wander
    routes: list[np.ndarray] = field(default_factory=list)
    route_lanes: list[float] = field(default_factory=list)  # lane offset per route, positive toward the route centre
    spawn_set: list[SpawnPair] = field(default_factory=list)
    speed_range: tuple[float, float] = (1.0, 1.4)
    radius: float = AGENT_RADIUS
    v_max: float = 2.5
    switch_radius: float = 1.0
    arrive_radius: float = 0.3
    lane_spread: float = 0.1
    sfm: SFMParams = field(default_factory=SFMParams)
    rvo: RVOParams = field(default_factory=RVOParams)

    def __post_init__(self):
        if self.stepper not in ("sfm", "rvo"):
            raise ValueError(f"unknown stepper {self.stepper!r}")
        if self.mode not in ("cyclic", "point", "wander"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.n_pedestrians < 1:
            raise ValueError("need at least one pedestrian")

    @property
    def obstacle_array(self) -> np.ndarray:
        if not self.obstacles:
            return np.zeros((0, 4))
        return np.asarray(self.obstacles, dtype=float)

    def sample_agents(self, rng: np.random.Generator) -> list[AgentSpec]:
        """Concrete initial agents for one episode (spawn, waypoints, preferred speed)."""
        from .runner import sample_initial_agents

        return sample_initial_agents(self, rng)


def _boundary_walls(w: float, h: float) -> list[tuple[float, float, float, float]]:
    return [
        (0.0, 0.0, w, WALL),
        (0.0, h - WALL, w, h),
        (0.0, 0.0, WALL, h),
        (w - WALL, 0.0, w, h),
    ]


def _build_map(w: float, h: float, rects) -> OccupancyMap:
    return OccupancyMap.empty(w, h, MAP_RESOLUTION).with_rectangles(rects)


def square(n_pedestrians: int = 6) -> Scenario:
    """10 m x 10 m loop around a 4 m x 4 m block; half the agents walk clockwise.

    Counterflow keeps right: clockwise walkers use the inner lane,
    anticlockwise walkers the outer one.
    """
    rects = _boundary_walls(10.0, 10.0) + [(3.0, 3.0, 7.0, 7.0)]
    lo, hi = 1.6, 8.4
    # counter-clockwise corner order (y up); reversed for clockwise walkers
    ccw = np.array([[lo, lo], [hi, lo], [hi, hi], [lo, hi]])
    return Scenario(
        name="square",
        map=_build_map(10.0, 10.0, rects),
        obstacles=rects,
        stepper="sfm",
        n_pedestrians=n_pedestrians,
        mode="cyclic",
        routes=[ccw[::-1].copy(), ccw],
        route_lanes=[0.4, -0.4],
    )


def obstacle(n_pedestrians: int = 6) -> Scenario:
    """10 m x 10 m room with three pillars; agents cross to the opposite side."""
    pillars = [(2.9, 5.9, 4.1, 7.1), (5.9, 5.9, 7.1, 7.1), (4.4, 2.6, 5.6, 3.8)]
    rects = _boundary_walls(10.0, 10.0) + pillars
    left, right = (0.8, 0.8, 1.3, 9.2), (8.7, 0.8, 9.2, 9.2)
    bottom, top = (0.8, 0.8, 9.2, 1.3), (0.8, 8.7, 9.2, 9.2)
    spawns = [SpawnPair(left, right), SpawnPair(right, left), SpawnPair(bottom, top), SpawnPair(top, bottom)]
    return Scenario(
        name="obstacle",
        map=_build_map(10.0, 10.0, rects),
        obstacles=rects,
        stepper="rvo",
        n_pedestrians=n_pedestrians,
        mode="point",
        spawn_set=spawns,
    )


def hall(n_pedestrians: int = 6) -> Scenario:
    """12 m x 6 m open room; agents cross end to end in both directions."""
    rects = _boundary_walls(12.0, 6.0)
    left, right = (0.8, 0.8, 1.4, 5.2), (10.6, 0.8, 11.2, 5.2)
    return Scenario(
        name="hall",
        map=_build_map(12.0, 6.0, rects),
        obstacles=rects,
        stepper="sfm",
        n_pedestrians=n_pedestrians,
        mode="point",
        spawn_set=[SpawnPair(left, right), SpawnPair(right, left)],
    )


def open_space(n_pedestrians: int = 6) -> Scenario:
    """Obstacle-free 40 m x 40 m area used for pre-training; agents wander between random goals.

    Goals are far apart, so most walking is straight and turns are rare within one horizon.
    """
    region = (5.0, 5.0, 35.0, 35.0)
    return Scenario(
        name="open",
        map=OccupancyMap.empty(40.0, 40.0, MAP_RESOLUTION),
        obstacles=[],
        stepper="sfm",
        n_pedestrians=n_pedestrians,
        mode="wander",
        spawn_set=[SpawnPair(region, region)],
    )


BUILTIN = {"square": square, "obstacle": obstacle, "hall": hall, "open": open_space}


def make_scenario(name: str, n_pedestrians: int = 6) -> Scenario:
    try:
        return BUILTIN[name](n_pedestrians)
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; expected one of {sorted(BUILTIN)}") from None


def rectangles_from_map(occ: OccupancyMap) -> list[tuple[float, float, float, float]]:
    """Cover occupied cells with axis-aligned boxes: horizontal runs merged across
    identical consecutive rows."""
    res = occ.resolution
    ox, oy = occ.origin
    open_runs: dict[tuple[int, int], int] = {}
    boxes = []
    for r in range(occ.height + 1):
        runs = set()
        if r < occ.height:
            row = occ.cells[r]
            c = 0
            while c < occ.width:
                if row[c]:
                    c0 = c
                    while c < occ.width and row[c]:
                        c += 1
                    runs.add((c0, c))
                else:
                    c += 1
        for run in list(open_runs):
            if run not in runs:
                r0 = open_runs.pop(run)
                boxes.append((ox + run[0] * res, oy + r0 * res, ox + run[1] * res, oy + r * res))
        for run in runs:
            open_runs.setdefault(run, r)
    return sorted(boxes)


def load_scenario(path: str | Path) -> Scenario:
    """Load a scenario definition file.

    Keys: ``base`` (builtin to start from) or ``map`` (map file, relative to the
    definition), ``stepper``, ``mode``, ``n_pedestrians``, ``speed_min``/``speed_max``,
    ``[[spawn]] start=[..] goal=[..]`` and ``[[route]] waypoints=[[x,y],..] lane=..`` tables, ``lane_spread``.
    """
    path = Path(path)
    cfg = load_toml(path)
    n = int(cfg.get("n_pedestrians", 6))
    if "base" in cfg:
        sc = make_scenario(cfg["base"], n)
    else:
        occ = read_map(path.parent / cfg["map"])
        sc = Scenario(
            name=cfg.get("name", path.stem),
            map=occ,
            obstacles=rectangles_from_map(occ),
            stepper=cfg.get("stepper", "sfm"),
            n_pedestrians=n,
            mode=cfg.get("mode", "point"),
        )
    if "map" in cfg and "base" in cfg:
        sc.map = read_map(path.parent / cfg["map"])
        sc.obstacles = rectangles_from_map(sc.map)
    if "name" in cfg:
        sc.name = cfg["name"]
    if "stepper" in cfg:
        sc.stepper = cfg["stepper"]
    if "mode" in cfg:
        sc.mode = cfg["mode"]
    if "speed_min" in cfg or "speed_max" in cfg:
        sc.speed_range = (float(cfg.get("speed_min", sc.speed_range[0])), float(cfg.get("speed_max", sc.speed_range[1])))
    if "spawn" in cfg:
        sc.spawn_set = [SpawnPair(tuple(s["start"]), tuple(s["goal"])) for s in cfg["spawn"]]
    if "route" in cfg:
        sc.routes = [np.asarray(r["waypoints"], dtype=float) for r in cfg["route"]]
        sc.route_lanes = [float(r.get("lane", 0.0)) for r in cfg["route"]]
    if "lane_spread" in cfg:
        sc.lane_spread = float(cfg["lane_spread"])
    sc.__post_init__()
    return sc
