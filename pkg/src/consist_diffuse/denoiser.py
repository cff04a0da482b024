"""Conditional MLP noise predictor with low-rank adapters.

The network maps ``[z_t, time_embedding(t), condition_embedding]`` through two
SiLU hidden layers to a noise estimate of the latent's shape. Every linear
layer ``y = x W^T + b`` can carry a low-rank delta, making it
``y = x (W + s B A)^T + b``. With no delta the same function is the frozen
reference model.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Rng, ShapeError, Tensor

TIME_DIM = 8
COND_DIM = 8
HIDDEN = 128
LORA_RANK = 4


@dataclass(frozen=True)
class ConditionToken:
    """A prompt: a class name, optionally prefixed by the subject token ``[V]``."""

    cls: str
    subject: bool = False

    def __str__(self) -> str:
        return f"[V] {self.cls}" if self.subject else self.cls

    @classmethod
    def parse(cls, text: str) -> "ConditionToken":
        text = text.strip()
        if text.startswith("[V]"):
            return cls(text[3:].strip(), subject=True)
        return cls(text)


@dataclass
class ConditionTable:
    """Class embedding rows plus at most one subject (``[V]``) row."""

    names: list[str]
    class_rows: Tensor
    subject_row: Tensor | None = None

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown class token {name!r}; known: {self.names}") from None

    def with_subject(self, row: np.ndarray | None = None, rng: Rng | None = None) -> "ConditionTable":
        """Copy sharing the (frozen) class rows, with a trainable ``[V]`` row.

        The row is ``row`` if given; else a rare-token draw from ``rng`` at the
        RMS scale of the class rows; else zeros.
        """
        d = self.class_rows.shape[1]
        if row is not None:
            init = np.asarray(row, dtype=np.float64)
        elif rng is not None:
            init = rng.normal(d, 0.0, float(np.sqrt(np.mean(self.class_rows.data**2))))
        else:
            init = np.zeros(d)
        return ConditionTable(self.names, self.class_rows, nx.parameter(init, name="subject_row"))

    def embed(self, cond: ConditionToken | list[ConditionToken], n: int) -> Tensor:
        """(n, d_c) embeddings for one token repeated, or one token per row."""
        tokens = [cond] * n if isinstance(cond, ConditionToken) else list(cond)
        if len(tokens) != n:
            raise ShapeError(f"{len(tokens)} condition tokens for a batch of {n}")
        rows = nx.index_select(self.class_rows, [self.index(c.cls) for c in tokens])
        subject = np.array([c.subject for c in tokens])
        if subject.any():
            if self.subject_row is None:
                raise KeyError("subject token requested but the table has no [V] row")
            if subject.all():
                rows = nx.add(rows, self.subject_row)
            else:
                mask = np.repeat(subject[:, None].astype(np.float64), rows.shape[1], axis=1)
                rows = nx.add(rows, nx.mul(nx.constant(mask), self.subject_row))
        return rows


@dataclass
class BaseParams:
    """Pretrained MLP weights ``W_i`` (out x in), biases and class embeddings."""

    weights: list[Tensor]
    biases: list[Tensor]
    conditions: ConditionTable
    latent_dim: int
    time_dim: int = TIME_DIM
    max_period: float = 100.0

    @property
    def hidden(self) -> int:
        return self.weights[0].shape[0]

    def leaves(self) -> list[Tensor]:
        return [*self.weights, *self.biases, self.conditions.class_rows]

    def frozen(self) -> "BaseParams":
        """Deep copy with ``requires_grad=False`` everywhere."""
        cond = self.conditions
        return BaseParams(
            weights=[w.copy(requires_grad=False) for w in self.weights],
            biases=[b.copy(requires_grad=False) for b in self.biases],
            conditions=ConditionTable(list(cond.names), cond.class_rows.copy(requires_grad=False)),
            latent_dim=self.latent_dim,
            time_dim=self.time_dim,
            max_period=self.max_period,
        )


@dataclass
class LoraDelta:
    """Per-layer factors ``A`` (r x in) and ``B`` (out x r); ``None`` where a layer is not adapted."""

    A: list[Tensor | None]
    B: list[Tensor | None]
    rank: int = LORA_RANK
    scaling: float = 1.0

    def delta_weight(self, i: int) -> np.ndarray | None:
        if self.A[i] is None:
            return None
        return self.scaling * (self.B[i].data @ self.A[i].data)

    def leaves(self) -> list[Tensor]:
        return [t for pair in zip(self.A, self.B) for t in pair if t is not None]


def init_base(
    rng: Rng,
    class_names: list[str],
    latent_dim: int,
    hidden: int = HIDDEN,
    time_dim: int = TIME_DIM,
    cond_dim: int = COND_DIM,
    max_period: float = 100.0,
) -> BaseParams:
    """Randomly initialised, trainable parameters (the starting point of pretraining)."""
    sizes = [latent_dim + time_dim + cond_dim, hidden, hidden, latent_dim]
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        std = 1.0 / np.sqrt(n_in)
        weights.append(nx.parameter(rng.normal((n_out, n_in), 0.0, std), name=f"W{i}"))
        biases.append(nx.parameter(np.zeros(n_out), name=f"b{i}"))
    rows = nx.parameter(rng.normal((len(class_names), cond_dim)), name="class_rows")
    return BaseParams(weights, biases, ConditionTable(list(class_names), rows), latent_dim, time_dim, max_period)


def init_delta(base: BaseParams, rng: Rng, rank: int = LORA_RANK, scaling: float = 1.0,
               init_std: float | None = None, layers: list[int] | None = None) -> LoraDelta:
    """``B = 0`` so the adapted model starts equal to the base.

    ``A ~ N(0, init_std^2)``, with ``init_std`` defaulting to ``1/sqrt(fan_in)``.
    """
    layers = list(range(len(base.weights))) if layers is None else layers
    A: list[Tensor | None] = []
    B: list[Tensor | None] = []
    for i, w in enumerate(base.weights):
        if i not in layers:
            A.append(None)
            B.append(None)
            continue
        m, n = w.shape
        std = 1.0 / np.sqrt(n) if init_std is None else init_std
        A.append(nx.parameter(rng.normal((rank, n), 0.0, std), name=f"A{i}"))
        B.append(nx.parameter(np.zeros((m, rank)), name=f"B{i}"))
    return LoraDelta(A, B, rank=rank, scaling=scaling)


def time_embedding(t, dim: int = TIME_DIM, max_period: float = 100.0) -> np.ndarray:
    """Sinusoidal features ``[sin(t w_k), cos(t w_k)]`` with geometric frequencies ``w_0 = 1``."""
    ts = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = max_period ** (-np.arange(half) / half)
    ang = ts[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _linear(x: Tensor, w: Tensor, b: Tensor, A: Tensor | None, B: Tensor | None, scaling: float) -> Tensor:
    y = nx.matmul(x, nx.transpose(w))
    if A is not None:
        low = nx.matmul(nx.matmul(x, nx.transpose(A)), nx.transpose(B))
        y = nx.add(y, nx.scalar_mul(low, scaling) if scaling != 1.0 else low)
    return nx.add(y, b)


def predict_noise(
    params: BaseParams,
    delta: LoraDelta | None,
    z_t: Tensor,
    t,
    cond: ConditionToken,
    table: ConditionTable | None = None,
) -> Tensor:
    """Noise estimate for a batch ``z_t`` of shape (n, d) at timesteps ``t``."""
    if z_t.ndim != 2 or z_t.shape[1] != params.latent_dim:
        raise ShapeError(f"z_t must have shape (n, {params.latent_dim}), got {z_t.shape}")
    n = z_t.shape[0]
    ts = np.broadcast_to(np.asarray(t), (n,))
    table = params.conditions if table is None else table
    temb = nx.constant(time_embedding(ts, params.time_dim, params.max_period))
    h = nx.concat([z_t, temb, table.embed(cond, n)], axis=1)
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        A = delta.A[i] if delta is not None else None
        B = delta.B[i] if delta is not None else None
        h = _linear(h, w, b, A, B, delta.scaling if delta is not None else 1.0)
        if i < last:
            h = nx.silu(h)
    return h


def merge_delta(params: BaseParams, delta: LoraDelta) -> BaseParams:
    """Fold ``s B A`` into each adapted weight; returns new frozen parameters."""
    if len(delta.A) != len(params.weights):
        raise ShapeError(f"delta has {len(delta.A)} layers, base has {len(params.weights)}")
    merged = params.frozen()
    for i, w in enumerate(merged.weights):
        dw = delta.delta_weight(i)
        if dw is None:
            continue
        if dw.shape != w.shape:
            raise ShapeError(f"layer {i}: delta shape {dw.shape} vs weight shape {w.shape}")
        merged.weights[i] = nx.constant(w.data + dw)
    return merged


def trainable_leaves(delta: LoraDelta, table: ConditionTable) -> list[Tensor]:
    """The adapter factors plus the ``[V]`` row; never a base tensor."""
    leaves = delta.leaves()
    if table.subject_row is not None:
        leaves.append(table.subject_row)
    return leaves


@dataclass
class Denoiser:
    """Bundles base, optional adapter and condition table behind ``predict``."""

    base: BaseParams
    delta: LoraDelta | None = None
    table: ConditionTable | None = None

    def predict(self, z_t: Tensor, t, cond: ConditionToken) -> Tensor:
        return predict_noise(self.base, self.delta, z_t, t, cond, self.table)


# -- checkpoints -----------------------------------------------------------------------
#
# layout: b"CDCK" | uint32 version | uint32 kind | uint32 json-length | json meta |
#         then per tensor: uint32 ndim, ndim x uint64 dims, float64 LE data

MAGIC = b"CDCK"
VERSION = 1
KIND_BASE, KIND_DELTA = 1, 2


def _write_blob(f, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.tobytes())


def _read_blob(buf: memoryview, pos: int) -> tuple[np.ndarray, int]:
    (ndim,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
    return arr, pos + 8 * count


def _write_checkpoint(path, kind: int, meta: dict, arrays: list[np.ndarray]) -> None:
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", VERSION, kind, len(blob)))
        f.write(blob)
        for a in arrays:
            _write_blob(f, a)


def _read_checkpoint(path, kind: int) -> tuple[dict, list[np.ndarray]]:
    raw = memoryview(Path(path).read_bytes())
    if bytes(raw[:4]) != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, got_kind, n = struct.unpack_from("<III", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    if got_kind != kind:
        raise ValueError(f"{path}: checkpoint kind {got_kind}, expected {kind}")
    pos = 16
    meta = json.loads(bytes(raw[pos:pos + n]))
    pos += n
    arrays = []
    while pos < len(raw):
        arr, pos = _read_blob(raw, pos)
        arrays.append(arr)
    return meta, arrays


def save_base(path, base: BaseParams) -> None:
    meta = {
        "layers": len(base.weights),
        "latent_dim": base.latent_dim,
        "time_dim": base.time_dim,
        "max_period": base.max_period,
        "class_names": base.conditions.names,
    }
    arrays = [w.data for w in base.weights] + [b.data for b in base.biases] + [base.conditions.class_rows.data]
    _write_checkpoint(path, KIND_BASE, meta, arrays)


def load_base(path) -> BaseParams:
    """Load as frozen parameters."""
    meta, arrays = _read_checkpoint(path, KIND_BASE)
    k = meta["layers"]
    return BaseParams(
        weights=[nx.constant(a) for a in arrays[:k]],
        biases=[nx.constant(a) for a in arrays[k:2 * k]],
        conditions=ConditionTable(list(meta["class_names"]), nx.constant(arrays[2 * k])),
        latent_dim=meta["latent_dim"],
        time_dim=meta["time_dim"],
        max_period=meta["max_period"],
    )


def save_delta(path, delta: LoraDelta, table: ConditionTable) -> None:
    adapted = [i for i, a in enumerate(delta.A) if a is not None]
    meta = {
        "layers": len(delta.A),
        "adapted": adapted,
        "rank": delta.rank,
        "scaling": delta.scaling,
        "has_subject_row": table.subject_row is not None,
    }
    arrays = []
    for i in adapted:
        arrays += [delta.A[i].data, delta.B[i].data]
    if table.subject_row is not None:
        arrays.append(table.subject_row.data)
    _write_checkpoint(path, KIND_DELTA, meta, arrays)


def load_delta(path, base: BaseParams) -> tuple[LoraDelta, ConditionTable]:
    meta, arrays = _read_checkpoint(path, KIND_DELTA)
    A: list[Tensor | None] = [None] * meta["layers"]
    B: list[Tensor | None] = [None] * meta["layers"]
    for j, i in enumerate(meta["adapted"]):
        A[i] = nx.parameter(arrays[2 * j], name=f"A{i}")
        B[i] = nx.parameter(arrays[2 * j + 1], name=f"B{i}")
    delta = LoraDelta(A, B, rank=meta["rank"], scaling=meta["scaling"])
    row = arrays[-1] if meta["has_subject_row"] else None
    table = base.conditions.with_subject(row) if row is not None else base.conditions
    return delta, table
