"""Seeded experiment grids: shared pre-training and validation, per-cell runs, reports."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .continual import SCLResult, build_validation_set, initial_params, pretrain, run_scl
from .core import Dataset, load_dataset, save_dataset
from .learn import TrainLog
from .metrics import (
    final_values,
    forgotten_values,
    mann_whitney_u,
    read_records,
    sequence_end,
    write_records,
)
from .model import ParamVector, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

DEFAULT_EWC_LAMBDA = ExperimentConfig.__dataclass_fields__["ewc_lambda"].default


@dataclass(frozen=True)
class Cell:
    strategy: str
    sequence: tuple[str, ...]
    n: int
    seed: int
    base_n: int = 6

    @property
    def label(self) -> str:
        return self.strategy if self.n == self.base_n else f"{self.strategy}-{self.n}"

    @property
    def key(self) -> str:
        return f"{self.label}__{'-'.join(self.sequence)}__s{self.seed}"


@dataclass
class Workspace:
    """Everything cells of one seed share: the pre-trained model and frozen validation sets."""

    config: ExperimentConfig
    seed: int
    theta0: ParamVector
    validation: dict[tuple[str, int], Dataset] = field(default_factory=dict)
    pretrain_log: TrainLog | None = None

    def validation_for(self, sequence: Sequence[str], n: int) -> dict[str, Dataset]:
        out = {}
        for env in sequence:
            if (env, n) not in self.validation:
                self.validation[(env, n)] = build_validation_set(env, self.theta0, self.config, self.seed, n)
            out[env] = self.validation[(env, n)]
        return out

    def save(self, root: str | Path) -> None:
        root = Path(root)
        (root / "validation").mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.theta0, root / "theta0.ckpt", {"seed": self.seed, "config": self.config.digest()})
        if self.pretrain_log is not None:
            self.pretrain_log.write_csv(root / "pretrain_train.csv")
        for (env, n), data in sorted(self.validation.items()):
            save_dataset(data, root / "validation" / f"{env}_n{n}.dset")

    @classmethod
    def load(cls, config: ExperimentConfig, seed: int, root: str | Path) -> Workspace:
        root = Path(root)
        theta0, _ = load_checkpoint(root / "theta0.ckpt")
        ws = cls(config, seed, theta0)
        for path in sorted((root / "validation").glob("*.dset")):
            env, n = path.stem.rsplit("_n", 1)
            ws.validation[(env, int(n))] = load_dataset(path)
        return ws


def prepare(config: ExperimentConfig, seed: int, theta0: ParamVector | None = None) -> Workspace:
    """Pre-train (unless ``theta0`` is given) for one seed."""
    log = TrainLog()
    if theta0 is None:
        theta0 = pretrain(initial_params(config, seed), config, seed, log)
    return Workspace(config, seed, theta0, pretrain_log=log)


def plan_cells(config: ExperimentConfig) -> list[Cell]:
    cells = []
    for seed in config.seeds:
        for seq in config.sequences:
            for strat in config.strategies:
                cells.append(Cell(strat, tuple(seq), config.n_pedestrians, seed, config.n_pedestrians))
            for n in config.dense_pedestrians:
                for strat in config.dense_strategies:
                    cells.append(Cell(strat, tuple(seq), n, seed, config.n_pedestrians))
    return cells


def run_cell(ws: Workspace, cell: Cell, out_dir: str | Path | None = None) -> SCLResult:
    config = ws.config.replace(n_pedestrians=cell.n)
    validation = ws.validation_for(cell.sequence, cell.n)
    result = run_scl(list(cell.sequence), ws.theta0, config, cell.seed, cell.strategy, validation, out_dir=out_dir)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_records(result.records, out / "records.csv")
        if result.anchors:
            np.savez(
                out / "anchors.npz",
                **{f"theta_{a.task}": a.theta for a in result.anchors},
                **{f"fisher_{a.task}": a.fisher for a in result.anchors},
            )
        if len(result.coreset):
            save_dataset(result.coreset.as_dataset(), out / "coreset.dset")
        if cell.strategy == "offline":
            save_checkpoint(result.params, out / "offline.ckpt", {"strategy": "offline"})
            result.logs[0].write_csv(out / "offline_train.csv")
    return result


def code_version() -> str:
    digest = hashlib.sha256()
    for path in sorted(Path(__file__).parent.rglob("*.py")):
        digest.update(path.relative_to(Path(__file__).parent).as_posix().encode())
        digest.update(path.read_bytes())
    return f"{__version__}+{digest.hexdigest()[:12]}"


def deviations(config: ExperimentConfig) -> dict:
    out = {}
    if config.ewc_lambda != DEFAULT_EWC_LAMBDA:
        out["ewc_lambda"] = {"default": DEFAULT_EWC_LAMBDA, "used": config.ewc_lambda}
    return out


def _cell_worker(args) -> tuple[str, str | None]:
    config_dict, cell, seed_dir, cell_dir = args
    config = ExperimentConfig(**config_dict)
    try:
        ws = Workspace.load(config, cell.seed, seed_dir)
        run_cell(ws, cell, cell_dir)
        return cell.key, None
    except Exception:  # isolate one cell's failure from the rest of the grid
        return cell.key, traceback.format_exc()


def run_grid(config: ExperimentConfig, out_dir: str | Path, workers: int = 1) -> dict:
    """Run every planned cell; returns the manifest (also written to ``manifest.json``)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = plan_cells(config)
    workspaces = {}
    for seed in config.seeds:
        ws = prepare(config, seed)
        for cell in cells:
            if cell.seed == seed:
                ws.validation_for(cell.sequence, cell.n)
        ws.save(out / f"seed{seed}")
        workspaces[seed] = ws

    status: dict[str, str | None] = {}
    jobs = [(config.to_dict(), c, out / f"seed{c.seed}", out / f"seed{c.seed}" / "cells" / c.key) for c in cells]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for key, err in pool.map(_cell_worker, jobs):
                status[key] = err
    else:
        for _, cell, _, cell_dir in jobs:
            try:
                run_cell(workspaces[cell.seed], cell, cell_dir)
                status[cell.key] = None
            except Exception:
                status[cell.key] = traceback.format_exc()
    for key, err in status.items():
        if err:
            logger.error("cell %s failed:\n%s", key, err)

    manifest = {
        "code_version": code_version(),
        "config": config.to_dict(),
        "config_digest": config.digest(),
        "seeds": list(config.seeds),
        "deviations": deviations(config),
        "std_convention": "across validation examples",
        "cells": [
            {
                "key": c.key,
                "strategy": c.strategy,
                "label": c.label,
                "sequence": list(c.sequence),
                "n_pedestrians": c.n,
                "seed": c.seed,
                "path": str(Path(f"seed{c.seed}") / "cells" / c.key),
                "status": "ok" if status[c.key] is None else "failed",
                "error": status[c.key],
            }
            for c in cells
        ],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


@dataclass
class SummaryRow:
    label: str
    sequence: tuple[str, ...]
    forgotten: tuple[float, float, float, float] | None
    seq_end: tuple[float, float, float, float]
    seeds: int


def _pooled(stats: list[np.ndarray]) -> tuple[float, float]:
    v = np.concatenate(stats)
    return float(v.mean()), float(v.std())


def summarize(cell_records: dict[Cell, list], config: ExperimentConfig) -> list[SummaryRow]:
    """Summary rows: forgotten and sequence-end statistics pooled over seeds."""
    groups: dict[tuple[str, tuple[str, ...]], list] = {}
    for cell, recs in cell_records.items():
        groups.setdefault((cell.label, cell.sequence), []).append((cell, recs))
    rows = []
    for (label, seq), items in groups.items():
        end_a, end_f, fa, ff = [], [], [], []
        for cell, recs in items:
            for env in seq:
                a, f = final_values(recs, seq, env)
                end_a.append(a)
                end_f.append(f)
            if cell.strategy != "offline":
                _, da, df = forgotten_values(recs, seq)
                fa.append(da)
                ff.append(df)
        forgotten = (*_pooled(fa), *_pooled(ff)) if fa else None
        rows.append(SummaryRow(label, seq, forgotten, (*_pooled(end_a), *_pooled(end_f)), len(items)))
    return rows


def significance(cell_records: dict[Cell, list], sequence: Sequence[str], reference: str = "scl") -> list[dict]:
    """Pairwise U tests of the reference strategy against every other one, per environment."""
    seq = tuple(sequence)

    def values(label):
        cells = [c for c in cell_records if c.label == label and c.sequence == seq]
        out = {}
        for env in seq:
            pairs = [final_values(cell_records[c], seq, env) for c in cells]
            out[env] = (np.concatenate([p[0] for p in pairs]), np.concatenate([p[1] for p in pairs]))
        return out

    labels = sorted({c.label for c in cell_records if c.sequence == seq and c.n == c.base_n})
    if reference not in labels:
        raise KeyError(f"no {reference!r} cell for sequence {'-'.join(seq)}")
    ref = values(reference)
    rows = []
    for label in labels:
        if label == reference:
            continue
        other = values(label)
        row = {"strategy": label}
        for env in seq:
            for k, metric in enumerate(("ade", "fde")):
                u, p = mann_whitney_u(ref[env][k], other[env][k])
                row[f"{env}_{metric}_u"] = u
                row[f"{env}_{metric}_p"] = p
        rows.append(row)
    return rows


def load_results(results_dir: str | Path) -> tuple[ExperimentConfig, dict[Cell, list]]:
    root = Path(results_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    config = ExperimentConfig(**manifest["config"])
    out = {}
    gaps = []
    for entry in manifest["cells"]:
        cell = Cell(entry["strategy"], tuple(entry["sequence"]), entry["n_pedestrians"], entry["seed"], config.n_pedestrians)
        path = root / entry["path"] / "records.csv"
        if entry["status"] != "ok" or not path.exists():
            gaps.append((cell.label, "-".join(cell.sequence), cell.seed))
            continue
        out[cell] = read_records(path)
    if gaps:
        raise KeyError(f"missing result cells (strategy, sequence, seed): {gaps}")
    return config, out


def report(results_dir: str | Path) -> tuple[list[SummaryRow], list[dict]]:
    """Write ``forgetting.csv`` and ``significance.csv`` next to the manifest."""
    root = Path(results_dir)
    config, cells = load_results(root)
    rows = summarize(cells, config)
    with open(root / "forgetting.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([
            "strategy", "sequence", "forgotten_ade_mean", "forgotten_ade_std", "forgotten_fde_mean",
            "forgotten_fde_std", "end_ade_mean", "end_ade_std", "end_fde_mean", "end_fde_std", "seeds",
        ])
        for r in rows:
            forgotten = [f"{v:.6f}" for v in r.forgotten] if r.forgotten else [""] * 4
            w.writerow([r.label, "-".join(r.sequence), *forgotten, *(f"{v:.6f}" for v in r.seq_end), r.seeds])
    sig = []
    if any(c.sequence == tuple(config.significance_sequence) for c in cells):
        sig = significance(cells, config.significance_sequence)
        if sig:
            with open(root / "significance.csv", "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(sig[0]))
                w.writeheader()
                w.writerows(sig)
    return rows, sig
