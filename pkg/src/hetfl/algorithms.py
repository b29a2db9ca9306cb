"""Aggregation rules and update compressors.

Aggregators: FedAvg, q-FedAvg, FedProx (FedProx aggregates like FedAvg; its
difference lives in local training).  Compressors: truncated-SVD structured
updates, GDrop threshold sparsification and SignSGD with majority vote.

Every payload knows its canonical little-endian serialization, and
``byte_size`` is checked against it in the tests:

=============  ==============================================================
DenseDelta     float32 per coordinate (4 * dim)
SparseDelta    (uint32 index, float32 value) pairs (8 * nnz)
SignDelta      packed sign bits, MSB first, 1 = negative (ceil(dim / 8))
LowRank        per matrix: U*S (m x r) then V (r x n) as float32, then the
               dense vector parts, in parameter order
=============  ==============================================================
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import EmptyRound, InvalidSpec, NonpositiveLoss
from .learning import LearnerSpec, LocalDataset, ModelWeights, local_train

_F4 = np.dtype("<f4")
_PAIR = np.dtype([("index", "<u4"), ("value", "<f4")])


@dataclass(frozen=True)
class AggregatorSpec:
    kind: str = "fedavg"
    q: float = 1.0
    lipschitz_L: float = 1.0
    mu: float = 0.01
    fedprox_partial: bool = True

    def __post_init__(self):
        if self.kind not in ("fedavg", "qfedavg", "fedprox"):
            raise InvalidSpec(f"unknown aggregator {self.kind!r}")
        if self.q < 0:
            raise InvalidSpec("q must be non-negative")
        if not self.lipschitz_L > 0:
            raise InvalidSpec("lipschitz_L must be positive")
        if self.mu < 0:
            raise InvalidSpec("mu must be non-negative")


@dataclass(frozen=True)
class CompressorSpec:
    kind: str = "none"
    max_rank: int = 100
    threshold: float = 0.005
    sign_lr: float = 0.001
    residual: bool = True

    def __post_init__(self):
        if self.kind not in ("none", "structured", "gdrop", "signsgd"):
            raise InvalidSpec(f"unknown compressor {self.kind!r}")
        if self.max_rank < 1 or not self.threshold > 0 or not self.sign_lr > 0:
            raise InvalidSpec("compressor parameters must be positive")


# -- payloads ----------------------------------------------------------------


@dataclass(frozen=True)
class DenseDelta:
    values: np.ndarray

    @property
    def dim(self) -> int:
        return self.values.size

    @property
    def byte_size(self) -> int:
        return 4 * self.dim

    def to_dense(self) -> np.ndarray:
        return self.values

    def serialize(self) -> bytes:
        return self.values.astype(_F4).tobytes()


@dataclass(frozen=True)
class SparseDelta:
    indices: np.ndarray
    values: np.ndarray
    dim: int

    @property
    def byte_size(self) -> int:
        return 8 * self.indices.size

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out

    def serialize(self) -> bytes:
        rec = np.empty(self.indices.size, dtype=_PAIR)
        rec["index"] = self.indices
        rec["value"] = self.values
        return rec.tobytes()


@dataclass(frozen=True)
class SignDelta:
    bits: np.ndarray  # packed, 1 marks a negative coordinate
    dim: int
    step: float

    @property
    def byte_size(self) -> int:
        return math.ceil(self.dim / 8)

    def signs(self) -> np.ndarray:
        neg = np.unpackbits(self.bits, count=self.dim).astype(bool)
        return np.where(neg, -1.0, 1.0)

    def to_dense(self) -> np.ndarray:
        return -self.step * self.signs()

    def serialize(self) -> bytes:
        return self.bits.tobytes()


@dataclass(frozen=True)
class LowRank:
    # (offset, U scaled by singular values, V) per matrix; (offset, values) per vector
    factors: tuple[tuple[int, np.ndarray, np.ndarray], ...]
    dense: tuple[tuple[int, np.ndarray], ...]
    dim: int

    @property
    def byte_size(self) -> int:
        mat = sum(4 * u.shape[1] * (u.shape[0] + v.shape[1]) for _, u, v in self.factors)
        return mat + sum(4 * d.size for _, d in self.dense)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        for off, u, v in self.factors:
            block = u @ v
            out[off : off + block.size] = block.ravel()
        for off, d in self.dense:
            out[off : off + d.size] = d
        return out

    def serialize(self) -> bytes:
        parts = [a.astype(_F4).tobytes() for _, u, v in self.factors for a in (u, v)]
        parts += [d.astype(_F4).tobytes() for _, d in self.dense]
        return b"".join(parts)


Payload = Union[DenseDelta, SparseDelta, SignDelta, LowRank]


@dataclass(frozen=True)
class ModelUpdate:
    device_id: str
    payload: Payload
    n_samples: int
    train_loss: float

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")

    @property
    def byte_size(self) -> int:
        return self.payload.byte_size

    def delta(self) -> np.ndarray:
        return self.payload.to_dense()


# -- compressors -------------------------------------------------------------


def compress_structured(delta: np.ndarray, shapes, max_rank: int) -> LowRank:
    """Best rank-r approximation of every weight matrix via truncated SVD."""
    if max_rank < 1:
        raise ValueError("max_rank must be at least 1")
    factors, dense, off = [], [], 0
    for s in shapes:
        n = math.prod(s)
        block = delta[off : off + n]
        if len(s) == 2:
            u, sv, vt = np.linalg.svd(block.reshape(s), full_matrices=False)
            r = min(max_rank, s[0], s[1])
            factors.append((off, u[:, :r] * sv[:r], vt[:r]))
        else:
            dense.append((off, block.copy()))
        off += n
    return LowRank(tuple(factors), tuple(dense), off)


def compress_gdrop(delta: np.ndarray, threshold: float) -> SparseDelta:
    """Keep coordinates with ``|value| >= threshold``."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    idx = np.flatnonzero(np.abs(delta) >= threshold)
    return SparseDelta(idx.astype(np.uint32), delta[idx].copy(), delta.size)


def compress_signsgd(gradient: np.ndarray, sign_lr: float) -> SignDelta:
    """One bit per coordinate; zero counts as positive."""
    if not sign_lr > 0:
        raise ValueError("sign_lr must be positive")
    return SignDelta(np.packbits(gradient < 0), gradient.size, sign_lr)


def compress(delta: np.ndarray, shapes, spec: CompressorSpec) -> Payload:
    """Compress a model delta (local minus global) per ``spec``.

    SignSGD encodes the sign of the pseudo-gradient ``-delta``.
    """
    if spec.kind == "none":
        return DenseDelta(delta)
    if spec.kind == "structured":
        return compress_structured(delta, shapes, spec.max_rank)
    if spec.kind == "gdrop":
        return compress_gdrop(delta, spec.threshold)
    return compress_signsgd(-delta, spec.sign_lr)


def compression_ratio(update: ModelUpdate | Payload, dense_bytes: int) -> float:
    if dense_bytes <= 0:
        raise ValueError("dense_bytes must be positive")
    return update.byte_size / dense_bytes


# -- aggregation -------------------------------------------------------------


def _canonical(updates: list[ModelUpdate]) -> list[ModelUpdate]:
    if not updates:
        raise EmptyRound("no qualified updates")
    return sorted(updates, key=lambda u: u.device_id)


def fedavg_aggregate(global_weights: ModelWeights, updates: list[ModelUpdate]) -> ModelWeights:
    """Sample-weighted mean of the deltas added to the global model."""
    ordered = _canonical(updates)
    total = sum(u.n_samples for u in ordered)
    acc = np.zeros_like(global_weights.vector)
    for u in ordered:
        d = u.delta()
        if d.shape != acc.shape:
            raise ValueError(f"update from {u.device_id} has wrong dimension")
        acc += (u.n_samples / total) * d
    return global_weights.replace(global_weights.vector + acc)


def qfedavg_aggregate(
    global_weights: ModelWeights, updates: list[ModelUpdate], q: float, lipschitz_L: float
) -> ModelWeights:
    """q-FedAvg step; each update's ``train_loss`` is its loss F_k.

    With g_k = L * delta_k:  new = global + sum(F_k^q g_k) / sum(q F_k^(q-1) |g_k|^2 + L F_k^q)
    """
    if q < 0 or not lipschitz_L > 0:
        raise ValueError("need q >= 0 and L > 0")
    ordered = _canonical(updates)
    num = np.zeros_like(global_weights.vector)
    den = 0.0
    for u in ordered:
        f = u.train_loss
        if q > 0 and not f > 0:
            raise NonpositiveLoss(f"device {u.device_id} reported loss {f}")
        g = lipschitz_L * u.delta()
        fq = f**q if q > 0 else 1.0
        num += fq * g
        den += lipschitz_L * fq
        if q > 0:
            den += q * f ** (q - 1) * float(g @ g)
    return global_weights.replace(global_weights.vector + num / den)


def signsgd_aggregate(global_weights: ModelWeights, updates: list[ModelUpdate]) -> ModelWeights:
    """Majority vote over sign bits; even splits resolve to +."""
    ordered = _canonical(updates)
    votes = np.zeros_like(global_weights.vector)
    for u in ordered:
        if not isinstance(u.payload, SignDelta):
            raise TypeError("signsgd_aggregate needs SignDelta payloads")
        votes += u.payload.signs()
    majority = np.where(votes >= 0, 1.0, -1.0)
    step = ordered[0].payload.step
    return global_weights.replace(global_weights.vector - step * majority)


def aggregate(global_weights: ModelWeights, updates: list[ModelUpdate], spec: AggregatorSpec) -> ModelWeights:
    if updates and isinstance(updates[0].payload, SignDelta):
        return signsgd_aggregate(global_weights, updates)
    if spec.kind == "qfedavg":
        return qfedavg_aggregate(global_weights, updates, spec.q, spec.lipschitz_L)
    return fedavg_aggregate(global_weights, updates)


def fedprox_local_train(
    weights: ModelWeights,
    dataset: LocalDataset,
    spec: LearnerSpec,
    mu: float,
    epochs_target: int,
    epochs_completed: int,
    rng: np.random.Generator,
) -> ModelUpdate:
    """Local training on loss + (mu/2)||w - w_global||^2 for the epochs actually done."""
    if not 1 <= epochs_completed <= epochs_target:
        raise ValueError("need 1 <= epochs_completed <= epochs_target")
    if mu < 0:
        raise ValueError("mu must be non-negative")
    local, loss = local_train(weights, dataset, spec, epochs_completed, rng, prox_mu=mu, prox_center=weights.vector)
    return ModelUpdate(dataset.device_id, DenseDelta(local.vector - weights.vector), dataset.n_train, loss)
