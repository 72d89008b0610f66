"""Top-rho% gradient sparsification with momentum correction and residual buffering.

Per worker and round:

    g <- clip(g, C)
    u <- m*u + g          (momentum buffer)
    v <- v + u            (residual buffer)
    Thr = |v| value at rank ceil(rho% * dim), ranking by descending |v|
    emit every nonzero v_i with |v_i| >= Thr, then zero u_i and v_i there

With rho = 100, m = 0 and clipping off the emitted vector is exactly g and
the pipeline reduces to plain synchronous SGD.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, InputError

_HEADER = struct.Struct("<III")
_ENTRY = np.dtype([("index", "<u4"), ("value", "<f8")])
HEADER_BYTES = _HEADER.size
ENTRY_BYTES = _ENTRY.itemsize  # 12


@dataclass(frozen=True)
class CompressionConfig:
    rho_percent: float = 0.3
    momentum: float = 0.9
    clip_norm: float | None = 1.0  # None disables clipping
    flush_rule: str = "per-round-threshold"

    def __post_init__(self):
        if not 0 < self.rho_percent <= 100:
            raise ConfigurationError(f"rho must be in (0, 100], got {self.rho_percent}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigurationError("clip_norm must be positive or None")
        if self.flush_rule != "per-round-threshold":
            raise ConfigurationError(f"unknown flush rule {self.flush_rule!r}")

    def quota(self, dim: int) -> int:
        """Number of coordinates guaranteed to be sent: ceil(rho% * dim)."""
        # round first so that e.g. 0.3% of 1000 is 3, not ceil(3.0000000000000004)
        return max(1, min(dim, math.ceil(round(self.rho_percent * dim / 100.0, 9))))


@dataclass(frozen=True, eq=False)
class SparseGradient:
    indices: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    dim: int
    round: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        if idx.ndim != 1 or idx.shape != val.shape:
            raise InputError("indices and values must be matching 1-D arrays")
        if self.dim < 1 or self.round < 0:
            raise InputError("dim must be positive and round non-negative")
        if idx.size:
            if idx[0] < 0 or idx[-1] >= self.dim or np.any(np.diff(idx) <= 0):
                raise InputError("indices must be strictly increasing and within [0, dim)")
            if not np.all(np.isfinite(val)) or np.any(val == 0):
                raise InputError("sparse values must be finite and nonzero")
        idx.flags.writeable = False
        val.flags.writeable = False
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    def __len__(self) -> int:
        return int(self.indices.size)

    @property
    def entries(self) -> list[tuple[int, float]]:
        return list(zip(self.indices.tolist(), self.values.tolist()))

    @classmethod
    def from_dense(cls, g: np.ndarray, round: int = 0) -> "SparseGradient":
        g = np.asarray(g, dtype=np.float64)
        idx = np.flatnonzero(g)
        return cls(idx, g[idx], g.shape[0], round)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out

    def encode(self) -> bytes:
        """dim, round, count as u32 then (index u32, value f64) pairs, little-endian."""
        body = np.empty(len(self), dtype=_ENTRY)
        body["index"] = self.indices
        body["value"] = self.values
        return _HEADER.pack(self.dim, self.round, len(self)) + body.tobytes()

    @classmethod
    def decode(cls, raw: bytes) -> "SparseGradient":
        if len(raw) < HEADER_BYTES:
            raise InputError("truncated sparse gradient header")
        dim, rnd, count = _HEADER.unpack_from(raw)
        if len(raw) != HEADER_BYTES + count * ENTRY_BYTES:
            raise InputError("sparse gradient length does not match its entry count")
        body = np.frombuffer(raw, dtype=_ENTRY, offset=HEADER_BYTES)
        return cls(body["index"].astype(np.int64), body["value"].copy(), dim, rnd)

    @property
    def nbytes(self) -> int:
        return HEADER_BYTES + ENTRY_BYTES * len(self)

    def __eq__(self, other):
        if not isinstance(other, SparseGradient):
            return NotImplemented
        return (self.dim == other.dim and self.round == other.round
                and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.values, other.values))

    __hash__ = None


@dataclass
class CompressorState:
    """Per-worker buffers. Owned and mutated by exactly one worker loop."""

    momentum_buffer: np.ndarray
    residual_buffer: np.ndarray
    round: int = 0
    accumulated: bool = False

    @classmethod
    def fresh(cls, dim: int) -> "CompressorState":
        return cls(np.zeros(dim), np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.residual_buffer.shape[0]

    def copy(self) -> "CompressorState":
        return CompressorState(self.momentum_buffer.copy(), self.residual_buffer.copy(),
                               self.round, self.accumulated)


def clip_gradient(g: np.ndarray, clip_norm: float) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if not clip_norm > 0:
        raise ConfigurationError("clip norm must be positive")
    if not np.all(np.isfinite(g)):
        raise InputError("cannot clip a non-finite gradient")
    norm = float(np.linalg.norm(g))
    if norm <= clip_norm:
        return g.copy()
    return g * (clip_norm / norm)


def accumulate(state: CompressorState, g: np.ndarray, cfg: CompressionConfig) -> CompressorState:
    """Momentum-corrected accumulation; returns a new state, input left intact."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (state.dim,):
        raise ConfigurationError(f"gradient shape {g.shape} != ({state.dim},)")
    if cfg.clip_norm is not None:
        g = clip_gradient(g, cfg.clip_norm)
    elif not np.all(np.isfinite(g)):
        raise InputError("gradient must be finite")
    u = cfg.momentum * state.momentum_buffer + g
    v = state.residual_buffer + u
    return CompressorState(u, v, state.round + 1, True)


def threshold(v: np.ndarray, k: int) -> float:
    """|v| at rank k in descending magnitude order, ties broken by ascending index."""
    # the k-th largest magnitude is the same whichever tied coordinate holds it,
    # so a partial sort suffices; tie order only matters for which indices rank
    # first, and every coordinate tied at the threshold is emitted anyway
    mag = np.abs(np.asarray(v, dtype=np.float64))
    if not 1 <= k <= mag.size:
        raise ConfigurationError(f"rank {k} outside [1, {mag.size}]")
    return float(-np.partition(-mag, k - 1)[k - 1])


def sparsify(state: CompressorState, cfg: CompressionConfig) -> tuple[SparseGradient, CompressorState]:
    if not state.accumulated:
        raise ConfigurationError("sparsify called before accumulate in this round")
    v = state.residual_buffer
    thr = threshold(v, cfg.quota(state.dim))
    mask = (np.abs(v) >= thr) & (v != 0)
    idx = np.flatnonzero(mask)
    sparse = SparseGradient(idx, v[idx], state.dim, state.round)
    u = state.momentum_buffer.copy()
    r = v.copy()
    u[idx] = 0.0
    r[idx] = 0.0
    return sparse, CompressorState(u, r, state.round, False)


def compress(state: CompressorState, g: np.ndarray,
             cfg: CompressionConfig) -> tuple[SparseGradient, CompressorState]:
    """accumulate followed by sparsify: one round of the worker-side pipeline."""
    return sparsify(accumulate(state, g, cfg), cfg)


def aggregate_sparse(updates: Iterable[SparseGradient], dim: int) -> np.ndarray:
    updates = list(updates)
    out = np.zeros(dim)
    rounds = {u.round for u in updates}
    if len(rounds) > 1:
        raise InputError(f"updates from different rounds: {sorted(rounds)}")
    for u in updates:
        if u.dim != dim:
            raise InputError(f"update dim {u.dim} != {dim}")
        out[u.indices] += u.values
    return out


def compression_ratio(updates: Sequence[SparseGradient], dim: int,
                      rounds: int | None = None) -> float:
    """Dense coordinates replaced per transmitted entry.

    ``rounds`` counts dense-vector transmissions the updates stand in for;
    it defaults to ``len(updates)``, the right value when every update is
    one worker's message for one round.
    """
    updates = list(updates)
    if not updates:
        raise InputError("compression ratio of an empty update set")
    rounds = len(updates) if rounds is None else rounds
    if rounds < 1:
        raise InputError("rounds must be >= 1")
    sent = sum(len(u) for u in updates)
    if sent == 0:
        return math.inf
    return dim * rounds / sent
