"""Domain types and feature construction for the prediction model inputs.

Positions are meters and velocities m/s, both in the world frame. One tick
is ``TIME_STEP`` seconds.
"""

from __future__ import annotations

import io
import json
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

TIME_STEP = 0.2
V_MAX = 2.5
PATCH_GRID = 32
PATCH_RESOLUTION = 0.1
N_SOCIAL = 5
PRED_STEPS = 15
TBPTT_STEPS = 15


class DegenerateSceneWarning(UserWarning):
    """Raised (as a warning) when a query agent has no neighbors."""


@dataclass(frozen=True)
class AgentState:
    id: int
    p: np.ndarray
    v: np.ndarray
    t: int

    def __post_init__(self):
        if self.t < 0:
            raise ValueError(f"negative tick index {self.t}")
        if float(np.hypot(*np.asarray(self.v, dtype=float))) > V_MAX + 1e-9:
            raise ValueError(f"agent {self.id} speed exceeds {V_MAX} m/s")


@dataclass(frozen=True)
class OccupancyMap:
    """Static binary grid. ``cells[row, col]`` covers
    ``origin + (col, row) * resolution`` to one cell further; True is occupied."""

    origin: np.ndarray
    resolution: float
    cells: np.ndarray

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        cells = np.asarray(self.cells, dtype=bool)
        if cells.ndim != 2:
            raise ValueError("occupancy grid must be 2-D")
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(2))

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def extent(self) -> tuple[float, float, float, float]:
        x0, y0 = self.origin
        return x0, y0, x0 + self.width * self.resolution, y0 + self.height * self.resolution

    def occupied_at(self, points: np.ndarray) -> np.ndarray:
        """Occupancy at world points of shape (..., 2); outside the grid counts as occupied."""
        pts = np.asarray(points, dtype=float)
        rel = (pts - self.origin) / self.resolution
        # snap so that points on a cell boundary do not flip with rounding noise
        idx = np.floor(rel + 1e-9).astype(np.int64)
        col, row = idx[..., 0], idx[..., 1]
        inside = (col >= 0) & (col < self.width) & (row >= 0) & (row < self.height)
        out = np.ones(pts.shape[:-1], dtype=bool)
        out[inside] = self.cells[row[inside], col[inside]]
        return out

    @classmethod
    def empty(cls, width_m: float, height_m: float, resolution: float = 0.1, origin=(0.0, 0.0)):
        w = int(round(width_m / resolution))
        h = int(round(height_m / resolution))
        return cls(np.asarray(origin, dtype=float), resolution, np.zeros((h, w), dtype=bool))

    def with_rectangles(self, rects: Iterable[Sequence[float]]) -> OccupancyMap:
        """Mark every cell whose center lies in one of the ``(xmin, ymin, xmax, ymax)`` boxes."""
        cells = self.cells.copy()
        xs = self.origin[0] + (np.arange(self.width) + 0.5) * self.resolution
        ys = self.origin[1] + (np.arange(self.height) + 0.5) * self.resolution
        for x0, y0, x1, y1 in rects:
            cx = (xs >= x0) & (xs <= x1)
            cy = (ys >= y0) & (ys <= y1)
            cells |= np.outer(cy, cx)
        return OccupancyMap(self.origin.copy(), self.resolution, cells)

    def save(self, path: str | Path) -> None:
        write_map(self, path)

    @classmethod
    def load(cls, path: str | Path) -> OccupancyMap:
        return read_map(path)


def write_map(occ: OccupancyMap, path: str | Path) -> None:
    """Text format: a ``width height resolution origin_x origin_y`` header, then
    one line of 0/1 characters per row, top row (largest y) first."""
    lines = [f"{occ.width} {occ.height} {float(occ.resolution)!r} {float(occ.origin[0])!r} {float(occ.origin[1])!r}"]
    for row in occ.cells[::-1]:
        lines.append("".join("1" if c else "0" for c in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_map(path: str | Path) -> OccupancyMap:
    text = Path(path).read_text().split("\n")
    header = text[0].split()
    if len(header) != 5:
        raise ValueError(f"bad map header in {path}: {text[0]!r}")
    width, height = int(header[0]), int(header[1])
    resolution, ox, oy = (float(v) for v in header[2:])
    rows = [ln.strip() for ln in text[1:] if ln.strip()]
    if len(rows) != height or any(len(r) != width for r in rows):
        raise ValueError(f"map body in {path} does not match {width}x{height}")
    cells = np.array([[c == "1" for c in r] for r in rows], dtype=bool)[::-1]
    return OccupancyMap(np.array([ox, oy]), resolution, cells)


@dataclass(frozen=True)
class OccupancyPatch:
    cells: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.cells, dtype=bool)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError("patch must be square")
        object.__setattr__(self, "cells", c)


@dataclass(frozen=True)
class SocialVector:
    """``entries[k] = [dpx, dpy, dvx, dvy]`` of the k-th closest neighbor."""

    entries: np.ndarray
    lone: bool = False

    @property
    def distances(self) -> np.ndarray:
        return np.hypot(self.entries[:, 0], self.entries[:, 1])


@dataclass(frozen=True)
class ModelInput:
    ego_velocity: np.ndarray
    occ_patch: OccupancyPatch
    social: SocialVector


@dataclass(frozen=True)
class Example:
    input: ModelInput
    target: np.ndarray
    agent_id: int
    tick: int

    def __post_init__(self):
        if np.asarray(self.target).shape != (PRED_STEPS, 2):
            raise ValueError(f"target must have shape ({PRED_STEPS}, 2)")


_PATCH_OFFSETS: dict[int, np.ndarray] = {}


def _patch_offsets(grid: int) -> np.ndarray:
    # cell (grid//2, grid//2) sits exactly on the query agent
    if grid not in _PATCH_OFFSETS:
        k = np.arange(grid) - grid // 2
        _PATCH_OFFSETS[grid] = k.astype(float)
    return _PATCH_OFFSETS[grid]


def extract_occupancy_patch(
    occ: OccupancyMap, center, grid: int = PATCH_GRID, patch_resolution: float = PATCH_RESOLUTION
) -> OccupancyPatch:
    """Sample the map on a ``grid x grid`` lattice around ``center``.

    ``cells[r, c]`` samples ``center + ((c - grid//2), (r - grid//2)) * patch_resolution``.
    """
    return OccupancyPatch(extract_patches(occ, np.asarray(center, dtype=float)[None], grid, patch_resolution)[0])


def extract_patches(occ: OccupancyMap, centers: np.ndarray, grid: int, patch_resolution: float) -> np.ndarray:
    """Vectorized patch extraction for centers of shape (n, 2) -> (n, grid, grid) bool."""
    off = _patch_offsets(grid) * patch_resolution
    centers = np.asarray(centers, dtype=float)
    # map-relative coordinates keep the result translation-consistent
    rel = (centers - occ.origin) / occ.resolution
    step = off / occ.resolution
    cols = np.floor(rel[:, 0, None] + step[None, :] + 1e-9).astype(np.int64)
    rows = np.floor(rel[:, 1, None] + step[None, :] + 1e-9).astype(np.int64)
    col_ok = (cols >= 0) & (cols < occ.width)
    row_ok = (rows >= 0) & (rows < occ.height)
    cc = np.clip(cols, 0, occ.width - 1)
    rr = np.clip(rows, 0, occ.height - 1)
    vals = occ.cells[rr[:, :, None], cc[:, None, :]]
    inside = row_ok[:, :, None] & col_ok[:, None, :]
    return np.where(inside, vals, True)


def build_social_vector(
    query: AgentState,
    others: Sequence[AgentState],
    n_social: int = N_SOCIAL,
    allow_lone_agent: bool = True,
) -> SocialVector:
    others = [o for o in others if o.id != query.id]
    if not others:
        if not allow_lone_agent:
            raise ValueError(f"agent {query.id} has no neighbors at tick {query.t}")
        warnings.warn(f"agent {query.id} alone at tick {query.t}", DegenerateSceneWarning, stacklevel=2)
        return SocialVector(np.zeros((n_social, 4)), lone=True)
    rel = np.array([np.concatenate([o.p - query.p, o.v - query.v]) for o in others], dtype=float)
    return SocialVector(sort_and_pad(rel, n_social))


def sort_and_pad(rel: np.ndarray, n_social: int) -> np.ndarray:
    """Sort relative records by distance (ties broken on the record values) and
    repeat the nearest one when fewer than ``n_social`` exist.

    The copies sit next to the original so distances stay non-decreasing.
    """
    dist = np.hypot(rel[:, 0], rel[:, 1])
    keys = [rel[:, 3], rel[:, 2], rel[:, 1], rel[:, 0], dist]
    order = np.lexsort(keys)[:n_social]
    out = rel[order]
    if len(out) < n_social:
        out = np.concatenate([np.repeat(out[:1], n_social - len(out), axis=0), out])
    return out


def social_matrix(pos: np.ndarray, vel: np.ndarray, n_social: int) -> tuple[np.ndarray, np.ndarray]:
    """Social vectors for every agent of a scene at once.

    Returns (entries (n, n_social, 4), lone mask (n,)).
    """
    n = len(pos)
    out = np.zeros((n, n_social, 4))
    lone = np.zeros(n, dtype=bool)
    if n < 2:
        lone[:] = True
        return out, lone
    dp = pos[None, :, :] - pos[:, None, :]
    dv = vel[None, :, :] - vel[:, None, :]
    rel = np.concatenate([dp, dv], axis=-1)
    for i in range(n):
        out[i] = sort_and_pad(np.delete(rel[i], i, axis=0), n_social)
    return out, lone


def assemble_input(
    agents: Sequence[AgentState],
    agent_id: int,
    occ: OccupancyMap,
    grid: int = PATCH_GRID,
    patch_resolution: float = PATCH_RESOLUTION,
    n_social: int = N_SOCIAL,
) -> ModelInput | None:
    """Build the three input streams for one agent from the scene at a tick.

    Returns None (with a logged warning) when the agent is not in the scene.
    """
    query = next((a for a in agents if a.id == agent_id), None)
    if query is None:
        logger.warning("agent %s not present, skipping", agent_id)
        return None
    patch = extract_occupancy_patch(occ, query.p, grid, patch_resolution)
    social = build_social_vector(query, agents, n_social)
    return ModelInput(np.array(query.v, dtype=float), patch, social)


@dataclass
class ExampleSequence:
    """``length`` consecutive examples of one agent, stored column-wise.

    ``h0``/``c0`` are the recurrent state the live model held right before the
    first example; training treats them as constants.
    """

    ego: np.ndarray  # (L, 2)
    occ: np.ndarray  # (L, G, G) bool
    social: np.ndarray  # (L, n_social, 4)
    target: np.ndarray  # (L, P, 2) future velocities
    position: np.ndarray  # (L, 2) position at each example tick
    future: np.ndarray  # (L, P, 2) true future positions
    agent_id: int
    ticks: np.ndarray  # (L,)
    h0: np.ndarray
    c0: np.ndarray

    def __len__(self) -> int:
        return len(self.ticks)

    def example(self, k: int) -> Example:
        inp = ModelInput(self.ego[k], OccupancyPatch(self.occ[k]), SocialVector(self.social[k]))
        return Example(inp, self.target[k], self.agent_id, int(self.ticks[k]))

    @property
    def examples(self) -> list[Example]:
        return [self.example(k) for k in range(len(self))]

    _FIELDS = ("ego", "occ", "social", "target", "position", "future", "ticks", "h0", "c0")

    def to_arrays(self) -> dict[str, np.ndarray]:
        d = {f: getattr(self, f) for f in self._FIELDS}
        d["agent_id"] = np.array(self.agent_id)
        return d

    @classmethod
    def from_arrays(cls, d) -> ExampleSequence:
        kw = {f: np.asarray(d[f]) for f in cls._FIELDS}
        kw["occ"] = kw["occ"].astype(bool)
        return cls(agent_id=int(d["agent_id"]), **kw)


@dataclass
class Dataset:
    sequences: list[ExampleSequence] = field(default_factory=list)
    label: str = ""

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self) -> Iterator[ExampleSequence]:
        return iter(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]

    @property
    def n_examples(self) -> int:
        return sum(len(s) for s in self.sequences)

    def union(self, other: Dataset, label: str | None = None) -> Dataset:
        return Dataset(self.sequences + other.sequences, label if label is not None else self.label)


DATASET_MAGIC = b"PSCLDSET"
DATASET_VERSION = 1


def _write_record(fh: BinaryIO, payload: bytes) -> None:
    fh.write(struct.pack("<Q", len(payload)))
    fh.write(payload)


def _read_record(fh: BinaryIO) -> bytes:
    head = fh.read(8)
    if len(head) != 8:
        raise EOFError("truncated record header")
    (n,) = struct.unpack("<Q", head)
    payload = fh.read(n)
    if len(payload) != n:
        raise EOFError("truncated record")
    return payload


def save_dataset(data: Dataset, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", DATASET_VERSION))
        _write_record(fh, data.label.encode())
        fh.write(struct.pack("<Q", len(data.sequences)))
        for seq in data.sequences:
            buf = io.BytesIO()
            np.savez(buf, **seq.to_arrays())
            _write_record(fh, buf.getvalue())


def load_dataset(path: str | Path) -> Dataset:
    with open(path, "rb") as fh:
        if fh.read(len(DATASET_MAGIC)) != DATASET_MAGIC:
            raise ValueError(f"{path} is not a dataset file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        label = _read_record(fh).decode()
        (count,) = struct.unpack("<Q", fh.read(8))
        seqs = []
        for _ in range(count):
            with np.load(io.BytesIO(_read_record(fh))) as z:
                seqs.append(ExampleSequence.from_arrays(z))
    return Dataset(seqs, label)


def dataset_to_json(data: Dataset) -> str:
    """Human-readable dump for debugging; occupancy patches become row strings."""

    def enc(seq: ExampleSequence):
        d = {k: v.tolist() for k, v in seq.to_arrays().items() if k != "occ"}
        d["occ"] = [["".join("1" if c else "0" for c in row) for row in patch] for patch in seq.occ]
        return d

    return json.dumps({"label": data.label, "version": DATASET_VERSION, "sequences": [enc(s) for s in data]})
