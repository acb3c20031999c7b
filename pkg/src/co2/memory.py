"""Momentum key encoder and the FIFO queue of negative features.

The key encoder tracks the query encoder by exponential moving average and
is never touched by gradients. The queue is a ring buffer of K unit-norm
key embeddings; each training step enqueues the current batch's keys and
evicts the oldest batch.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .encoder import EncoderParams
from .errors import BatchTooLarge, IndivisibleCapacity, ShapeMismatch, TruncatedFile
from .numeric import l2_normalize


@dataclass
class FeatureQueue:
    """Ring buffer of K unit-norm feature rows; write_cursor marks the oldest."""

    entries: np.ndarray  # (K, d)
    write_cursor: int = 0

    @property
    def capacity(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


@dataclass
class MomentumState:
    """Key-encoder parameters plus the EMA momentum coefficient."""

    key_params: EncoderParams
    momentum: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must be in [0, 1], got {self.momentum}")


def momentum_update(state: MomentumState, query_params: EncoderParams) -> MomentumState:
    """EMA step: every key parameter becomes m*theta_k + (1-m)*theta_q.

    The expression is evaluated elementwise in exactly that order so the
    update is bitwise reproducible.
    """
    m = state.momentum
    key_arrays = state.key_params.arrays()
    query_arrays = query_params.arrays()
    if len(key_arrays) != len(query_arrays) or any(
        k.shape != q.shape for k, q in zip(key_arrays, query_arrays)
    ):
        raise ShapeMismatch("key and query parameter structures differ")
    new_params = EncoderParams(
        config=state.key_params.config,
        weights=[m * k + (1.0 - m) * q for k, q in zip(state.key_params.weights, query_params.weights)],
        biases=[m * k + (1.0 - m) * q for k, q in zip(state.key_params.biases, query_params.biases)],
    )
    return MomentumState(key_params=new_params, momentum=m)


def init_queue(capacity: int, dim: int, seed: int) -> FeatureQueue:
    """Fill the queue with seeded random unit vectors.

    Random directions rather than zeros so step-0 losses are well-defined;
    they wash out of the queue within capacity/batch_size steps.
    """
    if capacity < 1 or dim < 1:
        raise ValueError(f"capacity and dim must be >= 1, got {capacity}, {dim}")
    rng = np.random.Generator(np.random.PCG64(seed))
    entries = np.empty((capacity, dim))
    for i in range(capacity):
        entries[i] = l2_normalize(rng.standard_normal(dim))
    return FeatureQueue(entries=entries, write_cursor=0)


def enqueue_batch(queue: FeatureQueue, keys: np.ndarray) -> FeatureQueue:
    """Overwrite the oldest batch-size entries with the given keys, FIFO order.

    Mutates and returns the queue. Capacity must be a multiple of the
    batch size, so a batch always lands in a contiguous ring segment.
    """
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[1] != queue.dim:
        raise ShapeMismatch(f"keys must be (B, {queue.dim}), got {keys.shape}")
    batch = keys.shape[0]
    if batch > queue.capacity:
        raise BatchTooLarge(f"batch of {batch} exceeds queue capacity {queue.capacity}")
    if queue.capacity % batch != 0:
        raise IndivisibleCapacity(
            f"queue capacity {queue.capacity} is not a multiple of batch size {batch}"
        )
    slots = (queue.write_cursor + np.arange(batch)) % queue.capacity
    queue.entries[slots] = keys
    queue.write_cursor = int((queue.write_cursor + batch) % queue.capacity)
    return queue


def snapshot(queue: FeatureQueue) -> np.ndarray:
    """Immutable copy of the queue, oldest entry first."""
    cursor = queue.write_cursor
    return np.concatenate([queue.entries[cursor:], queue.entries[:cursor]], axis=0).copy()


# ---------------------------------------------------------------------------
# Checkpoint section payload
# ---------------------------------------------------------------------------


def serialize_queue(queue: FeatureQueue) -> bytes:
    header = struct.pack("<III", queue.capacity, queue.dim, queue.write_cursor)
    return header + np.ascontiguousarray(queue.entries, dtype="<f8").tobytes()


def deserialize_queue(blob: bytes) -> FeatureQueue:
    if len(blob) < 12:
        raise TruncatedFile("queue section too short for its header")
    capacity, dim, cursor = struct.unpack("<III", blob[:12])
    expected = 12 + 8 * capacity * dim
    if len(blob) != expected:
        raise TruncatedFile(f"queue section has {len(blob)} bytes, expected {expected}")
    entries = np.frombuffer(blob[12:], dtype="<f8").reshape(capacity, dim).copy()
    return FeatureQueue(entries=entries, write_cursor=cursor)
