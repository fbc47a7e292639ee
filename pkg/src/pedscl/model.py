"""Recurrent velocity-sequence predictor with analytic truncated-BPTT gradients.

Three tanh encoders (ego velocity, flattened occupancy patch, flattened social
vector) feed one LSTM cell; an affine decoder emits the whole future velocity
sequence at every tick. Everything is float64 numpy.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .core import TIME_STEP, ExampleSequence, ModelInput


@dataclass(frozen=True)
class Architecture:
    grid: int = 32
    n_social: int = 5
    vel_width: int = 16
    occ_width: int = 32
    soc_width: int = 32
    hidden: int = 64
    pred_steps: int = 15

    @property
    def occ_in(self) -> int:
        return self.grid * self.grid

    @property
    def soc_in(self) -> int:
        return 4 * self.n_social

    @property
    def cell_in(self) -> int:
        return self.vel_width + self.occ_width + self.soc_width

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        H = self.hidden
        return [
            ("enc_vel.W", (self.vel_width, 2)),
            ("enc_vel.b", (self.vel_width,)),
            ("enc_occ.W", (self.occ_width, self.occ_in)),
            ("enc_occ.b", (self.occ_width,)),
            ("enc_soc.W", (self.soc_width, self.soc_in)),
            ("enc_soc.b", (self.soc_width,)),
            ("rnn.W_ih", (4 * H, self.cell_in)),
            ("rnn.W_hh", (4 * H, H)),
            ("rnn.b", (4 * H,)),
            ("dec.W", (2 * self.pred_steps, H)),
            ("dec.b", (2 * self.pred_steps,)),
        ]


class ParamVector:
    """Named tensors backed by one flat float64 array.

    Gradients and Fisher diagonals use the same layout, so optimizer and
    penalty arithmetic works on ``.flat`` directly.
    """

    def __init__(self, arch: Architecture, flat: np.ndarray | None = None):
        self.arch = arch
        self._slices: dict[str, tuple[slice, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in arch.shapes():
            n = int(np.prod(shape))
            self._slices[name] = (slice(offset, offset + n), shape)
            offset += n
        self.size = offset
        if flat is None:
            flat = np.zeros(offset)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (offset,):
            raise ValueError(f"expected {offset} parameters, got shape {flat.shape}")
        self.flat = flat

    def __getitem__(self, name: str) -> np.ndarray:
        sl, shape = self._slices[name]
        return self.flat[sl].reshape(shape)

    def __setitem__(self, name: str, value) -> None:
        sl, shape = self._slices[name]
        self.flat[sl] = np.asarray(value, dtype=np.float64).reshape(-1)

    @property
    def names(self) -> list[str]:
        return list(self._slices)

    def shape_of(self, name: str) -> tuple[int, ...]:
        return self._slices[name][1]

    def slice_of(self, name: str) -> slice:
        return self._slices[name][0]

    def copy(self) -> ParamVector:
        return ParamVector(self.arch, self.flat.copy())

    def like(self, flat: np.ndarray) -> ParamVector:
        return ParamVector(self.arch, flat)

    def __repr__(self) -> str:
        return f"ParamVector({self.size} parameters)"


def init_params(arch: Architecture, rng: np.random.Generator) -> ParamVector:
    """Glorot-uniform weights, zero biases, forget-gate bias 1."""
    p = ParamVector(arch)
    for name in p.names:
        shape = p.shape_of(name)
        if len(shape) == 2:
            fan_out, fan_in = shape
            if name == "rnn.W_ih" or name == "rnn.W_hh":
                fan_out //= 4
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            p[name] = rng.uniform(-lim, lim, size=shape)
    H = arch.hidden
    b = p["rnn.b"]
    b[H : 2 * H] = 1.0
    p["rnn.b"] = b
    return p


@dataclass
class RecurrentState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, arch: Architecture, batch: int | None = None) -> RecurrentState:
        shape = (arch.hidden,) if batch is None else (batch, arch.hidden)
        return cls(np.zeros(shape), np.zeros(shape))


@dataclass(frozen=True)
class Prediction:
    velocities: np.ndarray


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite activations in layer {name}")


def encode(params: ParamVector, ego, occ, soc) -> np.ndarray:
    """Encoder outputs concatenated, shape (..., cell_in). Inputs are flattened per stream."""
    ev = np.tanh(ego @ params["enc_vel.W"].T + params["enc_vel.b"])
    eo = np.tanh(occ @ params["enc_occ.W"].T + params["enc_occ.b"])
    es = np.tanh(soc @ params["enc_soc.W"].T + params["enc_soc.b"])
    _check("enc_vel", ev)
    _check("enc_occ", eo)
    _check("enc_soc", es)
    return np.concatenate([ev, eo, es], axis=-1)


def lstm_cell(params: ParamVector, x, h, c):
    H = params.arch.hidden
    z = x @ params["rnn.W_ih"].T + h @ params["rnn.W_hh"].T + params["rnn.b"]
    i = _sigmoid(z[..., :H])
    f = _sigmoid(z[..., H : 2 * H])
    o = _sigmoid(z[..., 2 * H : 3 * H])
    g = np.tanh(z[..., 3 * H :])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    _check("rnn", h_new)
    return h_new, c_new, (i, f, o, g, tc)


def decode(params: ParamVector, h) -> np.ndarray:
    y = h @ params["dec.W"].T + params["dec.b"]
    _check("dec", y)
    return y.reshape(*y.shape[:-1], params.arch.pred_steps, 2)


def flatten_inputs(ego, occ, soc):
    """Cast stored streams to the network's flat float layout."""
    occ = np.asarray(occ)
    soc = np.asarray(soc)
    return (
        np.asarray(ego, dtype=np.float64),
        occ.reshape(*occ.shape[:-2], -1).astype(np.float64),
        soc.reshape(*soc.shape[:-2], -1).astype(np.float64),
    )


def forward_batch(params: ParamVector, ego, occ, soc, state: RecurrentState):
    """One tick for a batch of agents. ``occ`` (N, G, G), ``soc`` (N, n_social, 4)."""
    x = encode(params, *flatten_inputs(ego, occ, soc))
    h, c, _ = lstm_cell(params, x, state.h, state.c)
    return decode(params, h), RecurrentState(h, c)


def forward(params: ParamVector, inp: ModelInput, state: RecurrentState) -> tuple[Prediction, RecurrentState]:
    pred, new = forward_batch(
        params,
        np.asarray(inp.ego_velocity, dtype=float)[None],
        inp.occ_patch.cells[None],
        inp.social.entries[None],
        RecurrentState(np.atleast_2d(state.h), np.atleast_2d(state.c)),
    )
    return Prediction(pred[0]), RecurrentState(new.h[0], new.c[0])


@dataclass
class SequenceBatch:
    """Stacked sequences, all the same length L."""

    ego: np.ndarray  # (B, L, 2)
    occ: np.ndarray  # (B, L, G*G) float
    soc: np.ndarray  # (B, L, 4 n_social)
    target: np.ndarray  # (B, L, P, 2)
    h0: np.ndarray  # (B, H)
    c0: np.ndarray

    @classmethod
    def from_sequences(cls, seqs: Sequence[ExampleSequence]) -> SequenceBatch:
        if not seqs:
            raise ValueError("empty batch")
        lengths = {len(s) for s in seqs}
        if len(lengths) != 1:
            raise ValueError(f"sequences of different lengths {sorted(lengths)}")
        ego, occ, soc = flatten_inputs(
            np.stack([s.ego for s in seqs]), np.stack([s.occ for s in seqs]), np.stack([s.social for s in seqs])
        )
        return cls(
            ego,
            occ,
            soc,
            np.stack([s.target for s in seqs]).astype(np.float64),
            np.stack([s.h0 for s in seqs]).astype(np.float64),
            np.stack([s.c0 for s in seqs]).astype(np.float64),
        )

    def __len__(self) -> int:
        return self.ego.shape[0]

    def take(self, idx) -> SequenceBatch:
        return SequenceBatch(self.ego[idx], self.occ[idx], self.soc[idx], self.target[idx], self.h0[idx], self.c0[idx])


def run_sequences(params: ParamVector, batch: SequenceBatch) -> np.ndarray:
    """Predictions (B, L, P, 2) starting from each sequence's stored state."""
    x = encode(params, batch.ego, batch.occ, batch.soc)
    h, c = batch.h0, batch.c0
    hs = []
    for t in range(x.shape[1]):
        h, c, _ = lstm_cell(params, x[:, t], h, c)
        hs.append(h)
    return decode(params, np.stack(hs, axis=1))


def _outer(d: np.ndarray, x: np.ndarray, per_example: bool) -> np.ndarray:
    """Sum over time (and batch unless per_example) of d_t x_t^T."""
    if per_example:
        return np.einsum("blo,bli->boi", d, x)
    return np.tensordot(d, x, axes=([0, 1], [0, 1]))


def _bias(d: np.ndarray, per_example: bool) -> np.ndarray:
    return d.sum(axis=1) if per_example else d.sum(axis=(0, 1))


@dataclass
class _Trace:
    """Forward activations kept for the backward pass."""

    ev: np.ndarray
    eo: np.ndarray
    es: np.ndarray
    x: np.ndarray
    hs: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    gates: list
    err: np.ndarray  # (B, L, P, 2) prediction minus target


def _trace(params: ParamVector, batch: SequenceBatch) -> _Trace:
    arch = params.arch
    H, P = arch.hidden, arch.pred_steps
    B, L = batch.ego.shape[:2]
    if batch.target.shape != (B, L, P, 2):
        raise ValueError(f"target shape {batch.target.shape} does not match ({B}, {L}, {P}, 2)")

    ev = np.tanh(batch.ego @ params["enc_vel.W"].T + params["enc_vel.b"])
    eo = np.tanh(batch.occ @ params["enc_occ.W"].T + params["enc_occ.b"])
    es = np.tanh(batch.soc @ params["enc_soc.W"].T + params["enc_soc.b"])
    x = np.concatenate([ev, eo, es], axis=-1)

    h, c = batch.h0, batch.c0
    hs = np.empty((B, L, H))
    h_prev = np.empty((B, L, H))
    c_prev = np.empty((B, L, H))
    gates = []
    for t in range(L):
        h_prev[:, t], c_prev[:, t] = h, c
        h, c, cache = lstm_cell(params, x[:, t], h, c)
        hs[:, t] = h
        gates.append(cache)

    y = (hs @ params["dec.W"].T + params["dec.b"]).reshape(B, L, P, 2)
    return _Trace(ev, eo, es, x, hs, h_prev, c_prev, gates, y - batch.target)


def _backward(params: ParamVector, batch: SequenceBatch, tr: _Trace, dy: np.ndarray, per_example: bool) -> np.ndarray:
    """Gradient for output sensitivities ``dy`` (B, L', 2P) covering the first L' steps."""
    arch = params.arch
    H = arch.hidden
    B, L = dy.shape[:2]
    hs, h_prev, c_prev, x = tr.hs[:, :L], tr.h_prev[:, :L], tr.c_prev[:, :L], tr.x[:, :L]
    ev, eo, es = tr.ev[:, :L], tr.eo[:, :L], tr.es[:, :L]

    g = {}
    g["dec.W"] = _outer(dy, hs, per_example)
    g["dec.b"] = _bias(dy, per_example)
    dH = dy @ params["dec.W"]

    W_hh = params["rnn.W_hh"]
    W_ih = params["rnn.W_ih"]
    dZ = np.empty((B, L, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in reversed(range(L)):
        i, f, o, gg, tc = tr.gates[t]
        dh = dH[:, t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = dZ[:, t]
        dz[:, :H] = dc * gg * i * (1.0 - i)
        dz[:, H : 2 * H] = dc * c_prev[:, t] * f * (1.0 - f)
        dz[:, 2 * H : 3 * H] = dh * tc * o * (1.0 - o)
        dz[:, 3 * H :] = dc * i * (1.0 - gg * gg)
        dc_next = dc * f
        dh_next = dz @ W_hh

    g["rnn.W_ih"] = _outer(dZ, x, per_example)
    g["rnn.W_hh"] = _outer(dZ, h_prev, per_example)
    g["rnn.b"] = _bias(dZ, per_example)

    dx = dZ @ W_ih
    v, o_ = arch.vel_width, arch.vel_width + arch.occ_width
    d_ev = dx[..., :v] * (1.0 - ev * ev)
    d_eo = dx[..., v:o_] * (1.0 - eo * eo)
    d_es = dx[..., o_:] * (1.0 - es * es)
    g["enc_vel.W"] = _outer(d_ev, batch.ego[:, :L], per_example)
    g["enc_vel.b"] = _bias(d_ev, per_example)
    g["enc_occ.W"] = _outer(d_eo, batch.occ[:, :L], per_example)
    g["enc_occ.b"] = _bias(d_eo, per_example)
    g["enc_soc.W"] = _outer(d_es, batch.soc[:, :L], per_example)
    g["enc_soc.b"] = _bias(d_es, per_example)

    if per_example:
        return np.concatenate([g[name].reshape(B, -1) for name in params.names], axis=1)
    return np.concatenate([g[name].reshape(-1) for name in params.names])


def sequence_gradients(params: ParamVector, batch: SequenceBatch, per_example: bool = False):
    """Prediction loss and its gradient through every step of each window.

    The stored initial state is a constant (truncation). Returns
    ``(losses (B,), grad)`` where ``grad`` is (B, size) per sequence or, with
    ``per_example=False``, the gradient of the batch-mean loss (size,).
    """
    tr = _trace(params, batch)
    B, L, P = tr.err.shape[:3]
    losses = (tr.err**2).sum(axis=(2, 3)).sum(axis=1) / (L * P)
    if not np.all(np.isfinite(losses)):
        raise FloatingPointError("non-finite prediction loss")
    scale = 2.0 / (L * P)
    if not per_example:
        scale /= B
    return losses, _backward(params, batch, tr, (scale * tr.err).reshape(B, L, 2 * P), per_example)


def step_gradients(params: ParamVector, batch: SequenceBatch) -> Iterator[tuple[int, np.ndarray]]:
    """Per-sequence gradients of each single example's loss, one step at a time.

    Yields ``(t, grads (B, size))`` where row b is the gradient of the loss of
    example t of sequence b, back-propagated through steps 0..t of its window.
    """
    tr = _trace(params, batch)
    B, L, P = tr.err.shape[:3]
    if not np.all(np.isfinite(tr.err)):
        raise FloatingPointError("non-finite predictions")
    for t in range(L):
        dy = np.zeros((B, t + 1, 2 * P))
        dy[:, t] = (2.0 / P) * tr.err[:, t].reshape(B, 2 * P)
        yield t, _backward(params, batch, tr, dy, per_example=True)


def tbptt_gradient(params: ParamVector, seqs, l2: float = 0.0) -> tuple[float, np.ndarray]:
    """Mean prediction loss over the window(s) plus ``l2 * ||theta||^2``, and its gradient.

    ``seqs`` is one ExampleSequence, a list of them, or a SequenceBatch; a
    batch is reduced by the mean over sequences.
    """
    if isinstance(seqs, ExampleSequence):
        seqs = [seqs]
    batch = seqs if isinstance(seqs, SequenceBatch) else SequenceBatch.from_sequences(seqs)
    losses, grad = sequence_gradients(params, batch)
    theta = params.flat
    loss = float(losses.mean()) + l2 * float(theta @ theta)
    return loss, grad + 2.0 * l2 * theta


def predict_trajectory(params: ParamVector, inp: ModelInput, state: RecurrentState, start_position, dt: float = TIME_STEP):
    """Integrate the predicted velocities from ``start_position``; returns (P, 2) positions."""
    pred, _ = forward(params, inp, state)
    return integrate(pred.velocities, start_position, dt)


def integrate(velocities, start_position, dt: float = TIME_STEP) -> np.ndarray:
    v = np.asarray(velocities, dtype=float)
    return np.asarray(start_position, dtype=float)[..., None, :] + np.cumsum(v, axis=-2) * dt


def cv_predict(inp: ModelInput, pred_steps: int = 15) -> Prediction:
    """Constant-velocity baseline: the current velocity held over the horizon."""
    v = np.asarray(inp.ego_velocity, dtype=float)
    return Prediction(np.repeat(v[None], pred_steps, axis=0))


CHECKPOINT_MAGIC = b"PSCLCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: ParamVector, path: str | Path, meta: dict | None = None) -> None:
    """Header, architecture JSON, then (name, shape, little-endian float64 values) per tensor."""
    header = json.dumps({"arch": asdict(params.arch), "meta": meta or {}}).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)) + header)
        fh.write(struct.pack("<I", len(params.names)))
        for name in params.names:
            arr = params[name]
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path, arch: Architecture | None = None) -> tuple[ParamVector, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n))
        stored = Architecture(**header["arch"])
        if arch is not None and arch != stored:
            raise ValueError(f"checkpoint architecture {stored} does not match {arch}")
        params = ParamVector(stored)
        (count,) = struct.unpack("<I", fh.read(4))
        seen = set()
        for _ in range(count):
            (ln,) = struct.unpack("<I", fh.read(4))
            name = fh.read(ln).decode()
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            if name not in params.names or tuple(shape) != params.shape_of(name):
                raise ValueError(f"tensor {name} with shape {shape} does not fit the architecture")
            vals = np.frombuffer(fh.read(8 * int(np.prod(shape))), dtype="<f8")
            params[name] = vals
            seen.add(name)
        missing = set(params.names) - seen
        if missing:
            raise ValueError(f"checkpoint lacks tensors {sorted(missing)}")
    return params, header.get("meta", {})
