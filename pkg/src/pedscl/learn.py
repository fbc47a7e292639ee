"""Losses, diagonal Fisher estimation, the Adam optimizer and epoch training."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Dataset
from .model import ParamVector, SequenceBatch, sequence_gradients, step_gradients

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


class TrainingDiverged(RuntimeError):
    pass


def pred_loss(pred, target) -> float:
    """Mean over horizon steps of the squared velocity error norm."""
    pred = np.asarray(getattr(pred, "velocities", pred), dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    return float(((pred - target) ** 2).sum(axis=-1).mean(axis=-1))


@dataclass(frozen=True)
class TaskAnchor:
    task: int
    theta: np.ndarray
    fisher: np.ndarray

    def __post_init__(self):
        if self.theta.shape != self.fisher.shape:
            raise ValueError("anchor parameters and importances differ in shape")
        if np.any(self.fisher < 0):
            raise ValueError("importances must be non-negative")


def ewc_loss(theta, anchors: Sequence[TaskAnchor], lam: float) -> tuple[float, np.ndarray]:
    """Quadratic pull toward every stored anchor, weighted by its importances."""
    theta = np.asarray(getattr(theta, "flat", theta), dtype=float)
    value = 0.0
    grad = np.zeros_like(theta)
    for a in anchors:
        if a.theta.shape != theta.shape:
            raise ValueError(f"anchor {a.task} has {a.theta.size} parameters, model has {theta.size}")
        d = theta - a.theta
        fd = a.fisher * d
        value += 0.5 * lam * float(fd @ d)
        grad += lam * fd
    return value, grad


def estimate_fim(params: ParamVector, data: Dataset, chunk: int = 32) -> np.ndarray:
    """Empirical Fisher diagonal: mean over examples of the squared prediction-loss gradient.

    Each example's gradient flows back through the earlier steps of its
    training window, the same truncation used for training.
    """
    seqs = list(data.sequences if isinstance(data, Dataset) else data)
    if not seqs:
        raise ValueError("cannot estimate importances from an empty dataset")
    total = np.zeros(params.size)
    count = 0
    for start in range(0, len(seqs), chunk):
        batch = SequenceBatch.from_sequences(seqs[start : start + chunk])
        for _, grads in step_gradients(params, batch):
            total += (grads * grads).sum(axis=0)
            count += len(grads)
    return total / count


@dataclass
class OptState:
    """Adam moments plus decoupled weight decay."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 2e-3
    l2: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, size: int, lr: float = 2e-3, l2: float = 5e-4) -> OptState:
        return cls(np.zeros(size), np.zeros(size), 0, lr, l2)

    def update(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if grad.shape != self.m.shape:
            raise ValueError("gradient does not match optimizer state")
        self.step += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.step)
        v_hat = self.v / (1 - self.beta2**self.step)
        return theta - self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.l2 * theta)


@dataclass
class EpochRecord:
    epoch: int
    total: float
    pred: float
    ewc: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "total", "pred", "ewc"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.total), repr(r.pred), repr(r.ewc)])


def train(
    params: ParamVector,
    data: Dataset,
    anchors: Sequence[TaskAnchor],
    opt: OptState,
    epochs: int,
    rng: np.random.Generator,
    ewc_lambda: float = 0.0,
    batch_size: int = 16,
    log: TrainLog | None = None,
) -> ParamVector:
    """Minibatch training on shuffled sequences; returns a new ParamVector.

    Per batch the objective is mean prediction loss + l2 * ||theta||^2 + EWC
    penalty. The L2 part is applied as decoupled weight decay by ``opt``.
    """
    seqs = list(data.sequences if isinstance(data, Dataset) else data)
    if not seqs:
        raise ValueError("cannot train on an empty dataset")
    theta = params.flat.copy()
    if epochs == 0:
        return params.like(theta)
    work = params.like(theta)
    full = SequenceBatch.from_sequences(seqs)
    n = len(full)
    for epoch in range(epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, batch_size):
            idx = np.sort(order[start : start + batch_size])
            losses, grad = sequence_gradients(work, full.take(idx))
            pred = float(losses.mean())
            if not np.isfinite(pred) or pred > DIVERGENCE_LIMIT:
                raise TrainingDiverged(
                    f"prediction loss {pred} at epoch {epoch}, batch {start // batch_size}; "
                    f"|theta|max={np.abs(work.flat).max():.3g}, |grad|max={np.abs(grad).max():.3g}"
                )
            ewc_val, ewc_grad = ewc_loss(work.flat, anchors, ewc_lambda) if anchors else (0.0, 0.0)
            l2_val = opt.l2 * float(work.flat @ work.flat)
            work.flat = opt.update(work.flat, grad + ewc_grad)
            w = len(idx)
            sums += w * np.array([pred + l2_val + ewc_val, pred, ewc_val])
        mean = sums / n
        if log is not None:
            log.records.append(EpochRecord(epoch, *map(float, mean)))
        logger.debug("epoch %d total %.5g pred %.5g ewc %.5g", epoch, *mean)
    return work
