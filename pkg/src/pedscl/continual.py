"""Online task aggregation, coreset rehearsal and the sequential adaptation loop."""

from __future__ import annotations

import logging
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .config import ExperimentConfig, rng_for
from .core import Dataset, ExampleSequence, OccupancyMap, extract_patches, social_matrix
from .learn import OptState, TaskAnchor, TrainLog, estimate_fim, train
from .metrics import MetricRecord, evaluate
from .model import Architecture, ParamVector, RecurrentState, forward_batch, init_params, save_checkpoint
from .sim import Frame, Scenario, frames, make_scenario, run_scenario

logger = logging.getLogger(__name__)

SCENARIO_IDS = {"open": 0, "square": 1, "obstacle": 2, "hall": 3}


def architecture_for(config: ExperimentConfig) -> Architecture:
    return Architecture(
        grid=config.grid,
        n_social=config.n_social,
        vel_width=config.vel_width,
        occ_width=config.occ_width,
        soc_width=config.soc_width,
        hidden=config.hidden,
        pred_steps=config.pred_steps,
    )


@dataclass
class _Entry:
    tick: int
    ego: np.ndarray
    occ: np.ndarray
    social: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    h: np.ndarray
    c: np.ndarray


class StreamBuffer:
    """Per-agent ring buffers of model inputs spanning ``pred_steps + tbptt_steps`` ticks.

    Once an agent's buffer is full (and the window start is on the stride
    grid) the first ``tbptt_steps`` inputs are paired with the velocities
    observed afterwards. Agents that leave the scene are flushed together with
    their recurrent state.
    """

    def __init__(
        self,
        occ_map: OccupancyMap,
        arch: Architecture,
        params: ParamVector | None = None,
        tbptt_steps: int = 15,
        patch_resolution: float = 0.1,
        stride: int | None = None,
    ):
        self.map = occ_map
        self.arch = arch
        self.params = params
        self.pred_steps = arch.pred_steps
        self.tbptt_steps = tbptt_steps
        self.window = arch.pred_steps + tbptt_steps
        self.stride = stride or tbptt_steps
        self.patch_resolution = patch_resolution
        self.buffers: dict[int, deque[_Entry]] = {}
        self.seen: dict[int, int] = {}
        self.states: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.lone_ticks = 0

    def _flush(self, aid: int) -> None:
        self.buffers.pop(aid, None)
        self.seen.pop(aid, None)
        self.states.pop(aid, None)

    def push(self, frame: Frame) -> list[ExampleSequence]:
        ids = [int(i) for i in frame.ids]
        for aid in list(self.buffers):
            if aid not in ids:
                self._flush(aid)
        for aid in ids:
            buf = self.buffers.get(aid)
            if buf and buf[-1].tick != frame.tick - 1:
                self._flush(aid)
        if not ids:
            return []

        occ = extract_patches(self.map, frame.pos, self.arch.grid, self.patch_resolution)
        soc, lone = social_matrix(frame.pos, frame.vel, self.arch.n_social)
        if lone.any():
            self.lone_ticks += 1
            warnings.warn(f"lone agent at tick {frame.tick}; social entries zeroed", stacklevel=2)
        H = self.arch.hidden
        h = np.stack([self.states.get(a, (np.zeros(H), np.zeros(H)))[0] for a in ids])
        c = np.stack([self.states.get(a, (np.zeros(H), np.zeros(H)))[1] for a in ids])
        if self.params is not None:
            _, new = forward_batch(self.params, frame.vel, occ, soc, RecurrentState(h, c))
            for k, aid in enumerate(ids):
                self.states[aid] = (new.h[k], new.c[k])

        emitted = []
        for k, aid in enumerate(ids):
            buf = self.buffers.setdefault(aid, deque(maxlen=self.window))
            buf.append(_Entry(frame.tick, frame.vel[k].copy(), occ[k], soc[k], frame.pos[k].copy(), frame.vel[k].copy(), h[k], c[k]))
            n = self.seen.get(aid, 0) + 1
            self.seen[aid] = n
            if n >= self.window and (n - self.window) % self.stride == 0:
                emitted.append(self._emit(aid, buf))
        return emitted

    def _emit(self, aid: int, buf: deque[_Entry]) -> ExampleSequence:
        entries = list(buf)
        L, P = self.tbptt_steps, self.pred_steps
        vel = np.stack([e.vel for e in entries])
        pos = np.stack([e.pos for e in entries])
        target = np.stack([vel[k + 1 : k + 1 + P] for k in range(L)])
        future = np.stack([pos[k + 1 : k + 1 + P] for k in range(L)])
        head = entries[:L]
        return ExampleSequence(
            ego=np.stack([e.ego for e in head]),
            occ=np.stack([e.occ for e in head]),
            social=np.stack([e.social for e in head]),
            target=target,
            position=pos[:L].copy(),
            future=future,
            agent_id=aid,
            ticks=np.array([e.tick for e in head], dtype=np.int64),
            h0=head[0].h.copy(),
            c0=head[0].c.copy(),
        )


def aggregate_task(
    stream: Iterable[Frame],
    occ_map: OccupancyMap,
    params: ParamVector | None,
    ticks: int,
    arch: Architecture,
    tbptt_steps: int = 15,
    patch_resolution: float = 0.1,
    label: str = "",
) -> Dataset:
    """Collect hindsight-labelled sequences from the first ``ticks`` frames of a stream."""
    buffer = StreamBuffer(occ_map, arch, params, tbptt_steps, patch_resolution)
    data = Dataset(label=label)
    count = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for frame in stream:
            if count >= ticks:
                break
            data.sequences.extend(buffer.push(frame))
            count += 1
    if count < ticks:
        raise ValueError(f"stream ended after {count} ticks, {ticks} required")
    if buffer.lone_ticks:
        logger.warning("%d ticks with lone agents in %s", buffer.lone_ticks, label)
    return data


@dataclass
class Coreset:
    capacity: int = 100
    sequences: list[ExampleSequence] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.sequences)

    def as_dataset(self) -> Dataset:
        return Dataset(list(self.sequences), "coreset")


def update_coreset(coreset: Coreset, task_data: Dataset, m: int, rng: np.random.Generator) -> Coreset:
    """Add ``m`` random task sequences, evicting random old members beyond capacity."""
    if m <= 0:
        return Coreset(coreset.capacity, list(coreset.sequences))
    if len(task_data) < m:
        warnings.warn(f"task has {len(task_data)} sequences, fewer than the update size {m}", stacklevel=2)
        m = len(task_data)
    m = min(m, coreset.capacity)
    picked = np.sort(rng.choice(len(task_data), size=m, replace=False))
    new = [task_data[int(i)] for i in picked]
    keep = list(coreset.sequences)
    overflow = len(keep) + m - coreset.capacity
    if overflow > 0:
        drop = set(rng.choice(len(keep), size=overflow, replace=False).tolist())
        keep = [s for i, s in enumerate(keep) if i not in drop]
    return Coreset(coreset.capacity, keep + new)


STRATEGIES = {
    "vanilla": (False, False),
    "ewc": (True, False),
    "coreset": (False, True),
    "scl": (True, True),
    "offline": (False, False),
    "cv": (False, False),
}


@dataclass(frozen=True)
class StrategyConfig:
    name: str
    use_ewc: bool
    use_coreset: bool

    @classmethod
    def named(cls, name: str) -> StrategyConfig:
        try:
            ewc, core = STRATEGIES[name]
        except KeyError:
            raise ValueError(f"unknown strategy {name!r}; expected one of {sorted(STRATEGIES)}") from None
        return cls(name, ewc, core)

    @property
    def online(self) -> bool:
        return self.name not in ("offline", "cv")


def task_stream(name: str, config: ExperimentConfig, seed: int, ticks: int, stream: str = "simulation", n: int | None = None):
    n = n or config.n_pedestrians
    sc = make_scenario(name, n)
    rng = rng_for(seed, stream, SCENARIO_IDS[name], n)
    return sc, frames(run_scenario(sc, ticks, rng, config.time_step))


def collect(name: str, params, config: ExperimentConfig, seed: int, stream: str = "simulation", ticks=None, n=None) -> Dataset:
    ticks = ticks or config.task_ticks
    sc, fr = task_stream(name, config, seed, ticks, stream, n)
    return aggregate_task(fr, sc.map, params, ticks, params.arch if params is not None else architecture_for(config),
                          config.tbptt_steps, config.patch_resolution, label=name)


def build_validation_set(name: str, params: ParamVector, config: ExperimentConfig, seed: int, n: int | None = None) -> Dataset:
    """``val_size`` sequences from a held-out stream, frozen before any adaptation."""
    ticks = max(config.task_ticks, 1000)
    while True:
        data = collect(name, params, config, seed, "validation", ticks, n)
        if len(data) >= config.val_size or ticks > 64 * 1000:
            break
        ticks *= 2
    if len(data) < config.val_size:
        raise RuntimeError(f"only {len(data)} validation sequences for {name}")
    rng = rng_for(seed, "validation", SCENARIO_IDS[name], n or config.n_pedestrians, 1)
    keep = np.sort(rng.choice(len(data), size=config.val_size, replace=False))
    return Dataset([data[int(i)] for i in keep], name)


def pretrain(theta_random: ParamVector, config: ExperimentConfig, seed: int, log: TrainLog | None = None) -> ParamVector:
    """Fit the initial model on a long stream from the obstacle-free open environment."""
    if config.pretrain_epochs == 0:
        return theta_random.copy()
    ticks = int(round(config.pretrain_length / config.time_step))
    data = collect("open", theta_random, config, seed, "pretrain", ticks, config.pretrain_pedestrians)
    opt = OptState.create(theta_random.size, config.lr, config.l2)
    return train(theta_random, data, [], opt, config.pretrain_epochs, rng_for(seed, "pretrain", 1),
                 0.0, config.batch_size, log)


def initial_params(config: ExperimentConfig, seed: int) -> ParamVector:
    return init_params(architecture_for(config), rng_for(seed, "init"))


@dataclass
class SCLResult:
    params: ParamVector
    anchors: list[TaskAnchor]
    records: list[MetricRecord]
    coreset: Coreset
    coreset_sizes: list[int] = field(default_factory=list)
    task_sizes: list[int] = field(default_factory=list)
    checkpoints: list[ParamVector] = field(default_factory=list)
    logs: list[TrainLog] = field(default_factory=list)


def evaluate_all(params, strategy: str, phase: int, validation: dict[str, Dataset], dt: float) -> list[MetricRecord]:
    model = None if strategy == "cv" else params
    return [evaluate(model, data, strategy, phase, env, dt) for env, data in validation.items()]


def run_scl(
    sequence: Sequence[str],
    theta0: ParamVector,
    config: ExperimentConfig,
    seed: int,
    strategy: str | StrategyConfig,
    validation: dict[str, Dataset],
    task_data: Callable[[str, ParamVector, int], Dataset] | None = None,
    out_dir: str | Path | None = None,
) -> SCLResult:
    """Aggregate, adapt, consolidate and rehearse over a sequence of environments.

    ``task_data(name, live_params, phase)`` overrides data collection (tests use it).
    After every phase every validation set is evaluated.
    """
    strat = strategy if isinstance(strategy, StrategyConfig) else StrategyConfig.named(strategy)
    params = theta0.copy()
    anchors: list[TaskAnchor] = []
    coreset = Coreset(config.coreset_size)
    result = SCLResult(params, anchors, [], coreset)
    opt_rng_seed = seed
    if strat.name == "cv":
        for k in range(len(sequence)):
            result.records += evaluate_all(params, "cv", k, validation, config.time_step)
        return result
    if strat.name == "offline":
        union = Dataset(label="offline")
        for k, name in enumerate(sequence):
            d = task_data(name, theta0, k) if task_data else collect(name, theta0, config, seed)
            union = union.union(d)
        opt = OptState.create(params.size, config.lr, config.l2)
        log = TrainLog()
        params = train(params, union, [], opt, config.epochs, rng_for(seed, "shuffle", 99), 0.0, config.batch_size, log)
        result.params, result.logs = params, [log]
        result.task_sizes = [len(union)]
        result.records += evaluate_all(params, "offline", len(sequence) - 1, validation, config.time_step)
        return result

    for k, name in enumerate(sequence):
        d_k = task_data(name, params, k) if task_data else collect(name, params, config, seed)
        d_hat = d_k.union(coreset.as_dataset()) if strat.use_coreset else d_k
        opt = OptState.create(params.size, config.lr, config.l2)
        log = TrainLog()
        params = train(
            params,
            d_hat,
            anchors if strat.use_ewc else [],
            opt,
            config.epochs,
            rng_for(opt_rng_seed, "shuffle", k),
            config.ewc_lambda,
            config.batch_size,
            log,
        )
        if strat.use_ewc:
            anchors.append(TaskAnchor(k, params.flat.copy(), estimate_fim(params, d_k)))
        if strat.use_coreset:
            coreset = update_coreset(coreset, d_k, config.coreset_update, rng_for(seed, "coreset", k))
        result.task_sizes.append(len(d_k))
        result.coreset_sizes.append(len(coreset))
        result.checkpoints.append(params.copy())
        result.logs.append(log)
        result.records += evaluate_all(params, strat.name, k, validation, config.time_step)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            save_checkpoint(params, out / f"phase{k}_{name}.ckpt", {"strategy": strat.name, "phase": k, "task": name})
            log.write_csv(out / f"phase{k}_{name}_train.csv")
        del d_k, d_hat
    result.params, result.anchors, result.coreset = params, anchors, coreset
    return result
