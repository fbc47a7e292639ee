"""Displacement errors, the forgotten metric and the Mann-Whitney U test."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Dataset
from .model import ParamVector, SequenceBatch, integrate, run_sequences


def _displacements(pred_positions, true_positions) -> np.ndarray:
    a = np.asarray(pred_positions, dtype=float)
    b = np.asarray(true_positions, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"trajectory shapes differ: {a.shape} vs {b.shape}")
    if a.ndim < 2 or a.shape[-2] == 0:
        raise ValueError("trajectories must hold at least one position")
    d = a - b
    return np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2)


def ade(pred_positions, true_positions):
    """Mean Euclidean distance over the horizon (last axis but one)."""
    return _displacements(pred_positions, true_positions).mean(axis=-1)


def fde(pred_positions, true_positions):
    return _displacements(pred_positions, true_positions)[..., -1]


@dataclass
class MetricRecord:
    strategy: str
    phase: int
    env: str
    ade_mean: float
    ade_std: float
    fde_mean: float
    fde_std: float
    n: int
    ade_values: np.ndarray = field(default=None, repr=False, compare=False)
    fde_values: np.ndarray = field(default=None, repr=False, compare=False)

    FIELDS = ("strategy", "phase", "env", "ade_mean", "ade_std", "fde_mean", "fde_std", "n")

    @classmethod
    def from_values(cls, strategy, phase, env, ade_values, fde_values) -> MetricRecord:
        a = np.asarray(ade_values, dtype=float)
        f = np.asarray(fde_values, dtype=float)
        return cls(strategy, phase, env, float(a.mean()), float(a.std()), float(f.mean()), float(f.std()), len(a), a, f)


def evaluate_errors(params: ParamVector | None, data: Dataset, dt: float, chunk: int = 64):
    """Per-sequence ADE/FDE (each the mean over the sequence's examples).

    ``params=None`` evaluates the constant-velocity baseline.
    """
    ades, fdes = [], []
    seqs = data.sequences
    for start in range(0, len(seqs), chunk):
        part = seqs[start : start + chunk]
        if params is None:
            ego = np.stack([s.ego for s in part])
            vel = np.repeat(ego[:, :, None, :], part[0].target.shape[1], axis=2)
        else:
            vel = run_sequences(params, SequenceBatch.from_sequences(part))
        pos = integrate(vel, np.stack([s.position for s in part]), dt)
        truth = np.stack([s.future for s in part])
        ades.append(ade(pos, truth).mean(axis=1))
        fdes.append(fde(pos, truth).mean(axis=1))
    return np.concatenate(ades), np.concatenate(fdes)


def evaluate(params, data: Dataset, strategy: str, phase: int, env: str, dt: float) -> MetricRecord:
    a, f = evaluate_errors(params, data, dt)
    return MetricRecord.from_values(strategy, phase, env, a, f)


@dataclass
class Forgotten:
    per_env: dict[str, tuple[float, float]]
    ade_mean: float
    ade_std: float
    fde_mean: float
    fde_std: float


def _index(log: Sequence[MetricRecord], sequence: Sequence[str]):
    table = {(r.phase, r.env): r for r in log}
    gaps = [(j, e) for j in range(len(sequence)) for e in sequence if (j, e) not in table]
    if gaps:
        raise KeyError(f"missing metric records (phase, env): {gaps}")
    return table


def forgotten_values(log: Sequence[MetricRecord], sequence: Sequence[str]) -> tuple[dict, np.ndarray, np.ndarray]:
    """Per-environment mean increases plus the pooled per-example increases."""
    table = _index(log, sequence)
    per_env = {}
    pooled_a, pooled_f = [], []
    for j, env in enumerate(sequence):
        later = range(j + 1, len(sequence))
        if not later:
            per_env[env] = (0.0, 0.0)
            continue
        base = table[(j, env)]
        da = np.mean([table[(k, env)].ade_mean - base.ade_mean for k in later])
        df = np.mean([table[(k, env)].fde_mean - base.fde_mean for k in later])
        per_env[env] = (float(da), float(df))
        if base.ade_values is not None:
            pooled_a.append(np.mean([table[(k, env)].ade_values - base.ade_values for k in later], axis=0))
            pooled_f.append(np.mean([table[(k, env)].fde_values - base.fde_values for k in later], axis=0))
        else:
            pooled_a.append(np.array([da]))
            pooled_f.append(np.array([df]))
    if not pooled_a:
        return per_env, np.zeros(1), np.zeros(1)
    return per_env, np.concatenate(pooled_a), np.concatenate(pooled_f)


def forgotten_metric(log: Sequence[MetricRecord], sequence: Sequence[str]) -> Forgotten:
    """Average increase of each environment's error over all phases after its own.

    Summary statistics pool the per-example increases of every environment
    that has later phases; the last environment contributes 0 by definition.
    """
    per_env, a, f = forgotten_values(log, sequence)
    return Forgotten(per_env, float(a.mean()), float(a.std()), float(f.mean()), float(f.std()))


def final_values(log: Sequence[MetricRecord], sequence: Sequence[str], env: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-example ADE and FDE on ``env`` after the last phase."""
    for r in log:
        if r.phase == len(sequence) - 1 and r.env == env:
            if r.ade_values is None:
                raise ValueError(f"record for {env} carries no per-example values")
            return r.ade_values, r.fde_values
    raise KeyError(f"no final-phase record for {env}")


def sequence_end(log: Sequence[MetricRecord], sequence: Sequence[str]) -> tuple[float, float, float, float]:
    """Mean and std of ADE and FDE over every environment after the final phase."""
    final = len(sequence) - 1
    table = {r.env: r for r in log if r.phase == final}
    gaps = [e for e in sequence if e not in table]
    if gaps:
        raise KeyError(f"missing final-phase records for {gaps}")
    last = [table[e] for e in sequence]
    if all(r.ade_values is not None for r in last):
        a = np.concatenate([r.ade_values for r in last])
        f = np.concatenate([r.fde_values for r in last])
    else:
        a = np.array([r.ade_mean for r in last])
        f = np.array([r.fde_mean for r in last])
    return float(a.mean()), float(a.std()), float(f.mean()), float(f.std())


def midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing the mean of their positions."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def mann_whitney_u(sample_a, sample_b) -> tuple[float, float]:
    """U statistic of ``sample_a`` (pairs where a beats b, ties counting half)
    and the two-sided p-value from the tie-corrected normal approximation
    with continuity correction."""
    a = np.asarray(sample_a, dtype=float).ravel()
    b = np.asarray(sample_b, dtype=float).ravel()
    na, nb = len(a), len(b)
    if na == 0 or nb == 0:
        raise ValueError("both samples must be non-empty")
    ranks = midranks(np.concatenate([a, b]))
    u = float(ranks[:na].sum() - na * (na + 1) / 2.0)
    n = na + nb
    _, counts = np.unique(np.concatenate([a, b]), return_counts=True)
    tie_term = float((counts**3 - counts).sum())
    var = na * nb / 12.0 * ((n + 1) - tie_term / (n * (n - 1))) if n > 1 else 0.0
    if var <= 0.0:
        return u, 1.0
    z = max(abs(u - na * nb / 2.0) - 0.5, 0.0) / math.sqrt(var)
    return u, min(1.0, math.erfc(z / math.sqrt(2.0)))


def write_records(records: Sequence[MetricRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MetricRecord.FIELDS)
        for r in records:
            w.writerow([r.strategy, r.phase, r.env, repr(r.ade_mean), repr(r.ade_std), repr(r.fde_mean), repr(r.fde_std), r.n])
    values = {f"{r.phase}/{r.env}/{k}": getattr(r, f"{k}_values") for r in records for k in ("ade", "fde") if r.ade_values is not None}
    if values:
        np.savez(Path(path).with_suffix(".npz"), **values)


def read_records(path: str | Path) -> list[MetricRecord]:
    path = Path(path)
    values = {}
    npz = path.with_suffix(".npz")
    if npz.exists():
        with np.load(npz) as z:
            values = {k: z[k] for k in z.files}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            r = MetricRecord(
                row["strategy"], int(row["phase"]), row["env"], float(row["ade_mean"]), float(row["ade_std"]),
                float(row["fde_mean"]), float(row["fde_std"]), int(row["n"]),
            )
            r.ade_values = values.get(f"{r.phase}/{r.env}/ade")
            r.fde_values = values.get(f"{r.phase}/{r.env}/fde")
            out.append(r)
    return out
