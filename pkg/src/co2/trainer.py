"""Pretraining loop: two views -> query/key encoding -> combined loss -> SGD.

Step ordering, fixed for reproducibility: encode both views with the
current encoders, take the loss against a snapshot of the queue, update
the query encoder by SGD, update the key encoder by EMA, then enqueue the
keys that were computed at step start. Losses are logged pre-update.

Runs are bitwise deterministic in (config, seed): augmentation and
shuffling draw from counter-keyed substreams, so a checkpoint plus the
step counter fully determines the remainder of a run.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .data import AugmentConfig, Sample, substream, two_views, view_rngs
from .encoder import (
    EncoderConfig,
    EncoderGrads,
    EncoderParams,
    backward_batch,
    deserialize_params,
    forward_batch,
    init_params,
    serialize_params,
    zero_grads,
)
from .errors import BadMagic, ShapeMismatch, SinkFailure, TruncatedFile
from .losses import LossHyperParams, batch_total_loss
from .memory import (
    FeatureQueue,
    MomentumState,
    deserialize_queue,
    enqueue_batch,
    init_queue,
    momentum_update,
    serialize_queue,
    snapshot,
)

CHECKPOINT_MAGIC = b"CO2CKPT\x00"
CHECKPOINT_VERSION = 1

_SHUFFLE_STREAM = 101


@dataclass
class TrainConfig:
    epochs: int = 250
    batch_size: int = 32
    base_lr: float = 0.03
    lr_schedule: str = "cosine"  # "cosine" | "step"
    lr_milestones: tuple[int, ...] = (150, 200)  # epochs, step schedule only
    lr_factor: float = 0.1
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    tau_ins: float = 0.07
    tau_con: float = 0.04
    alpha: float = 10.0
    smoothing_eps: float = 0.0
    queue_k: int = 256
    ema_m: float = 0.99
    seed: int = 1
    checkpoint_every: int = 0  # steps; 0 = final checkpoint only
    encoder: EncoderConfig = field(
        default_factory=lambda: EncoderConfig(input_dim=32, hidden_dims=(64,), embed_dim=16)
    )
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self) -> "TrainConfig":
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.queue_k % self.batch_size != 0:
            raise ValueError(
                f"batch_size {self.batch_size} must divide queue_k {self.queue_k}"
            )
        if self.lr_schedule not in ("cosine", "step"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.base_lr < 0 or self.lr_factor <= 0:
            raise ValueError("base_lr must be >= 0 and lr_factor > 0")
        if not 0.0 <= self.ema_m <= 1.0:
            raise ValueError(f"ema_m must be in [0, 1], got {self.ema_m}")
        if not 0.0 <= self.sgd_momentum < 1.0 or self.weight_decay < 0:
            raise ValueError("need 0 <= sgd_momentum < 1 and weight_decay >= 0")
        self.hyper_params().validate()
        self.augment.validate()
        return self

    def hyper_params(self) -> LossHyperParams:
        return LossHyperParams(
            tau_ins=self.tau_ins,
            tau_con=self.tau_con,
            alpha=self.alpha,
            smoothing_eps=self.smoothing_eps,
        )

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "base_lr": self.base_lr,
            "lr_schedule": self.lr_schedule,
            "lr_milestones": list(self.lr_milestones),
            "lr_factor": self.lr_factor,
            "sgd_momentum": self.sgd_momentum,
            "weight_decay": self.weight_decay,
            "tau_ins": self.tau_ins,
            "tau_con": self.tau_con,
            "alpha": self.alpha,
            "smoothing_eps": self.smoothing_eps,
            "queue_k": self.queue_k,
            "ema_m": self.ema_m,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
            "encoder": {
                "input_dim": self.encoder.input_dim,
                "hidden_dims": list(self.encoder.hidden_dims),
                "embed_dim": self.encoder.embed_dim,
                "head": self.encoder.head,
                "activation": self.encoder.activation,
                "init_seed": self.encoder.init_seed,
            },
            "augment": {
                "noise_sigma": self.augment.noise_sigma,
                "mask_fraction": self.augment.mask_fraction,
                "scale_jitter": self.augment.scale_jitter,
                "crop_keep": self.augment.crop_keep,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        enc = d.pop("encoder")
        aug = d.pop("augment")
        return cls(
            encoder=EncoderConfig(
                input_dim=enc["input_dim"],
                hidden_dims=tuple(enc["hidden_dims"]),
                embed_dim=enc["embed_dim"],
                head=enc["head"],
                activation=enc["activation"],
                init_seed=enc["init_seed"],
            ),
            augment=AugmentConfig(**aug),
            lr_milestones=tuple(d.pop("lr_milestones")),
            **d,
        )


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    lr: float
    mean_l_ins: float
    mean_l_con: float
    mean_total: float
    inst_disc_acc: float

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "epoch": self.epoch,
                "lr": self.lr,
                "l_ins": self.mean_l_ins,
                "l_con": self.mean_l_con,
                "total": self.mean_total,
                "inst_acc": self.inst_disc_acc,
            }
        )


def lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    """Learning rate for a 0-based step index.

    Cosine: base * 0.5 * (1 + cos(pi * step / total_steps)).
    Step: base * factor^(milestone epochs passed).
    """
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if config.lr_schedule == "cosine":
        return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
    steps_per_epoch = max(1, total_steps // max(1, config.epochs))
    epoch = step // steps_per_epoch
    passed = sum(1 for m in config.lr_milestones if epoch >= m)
    return config.base_lr * config.lr_factor**passed


def sgd_update(
    params: EncoderParams,
    grads: EncoderGrads,
    lr: float,
    sgd_momentum: float,
    weight_decay: float,
    velocity: EncoderGrads,
) -> tuple[EncoderParams, EncoderGrads]:
    """Heavy-ball SGD with decoupled-then-coupled weight decay on the gradient.

    g = grad + weight_decay * param; v = momentum * v + g; param -= lr * v.
    Weight decay applies to every parameter uniformly.
    """
    param_arrays = params.arrays()
    grad_arrays = grads.arrays()
    vel_arrays = velocity.arrays()
    if len(param_arrays) != len(grad_arrays) or any(
        p.shape != g.shape for p, g in zip(param_arrays, grad_arrays)
    ):
        raise ShapeMismatch("gradient structure does not match parameters")

    new_weights, new_biases, new_vw, new_vb = [], [], [], []
    for p, g, v in zip(params.weights, grads.weights, velocity.weights):
        step_v = sgd_momentum * v + (g + weight_decay * p)
        new_vw.append(step_v)
        new_weights.append(p - lr * step_v)
    for p, g, v in zip(params.biases, grads.biases, velocity.biases):
        step_v = sgd_momentum * v + (g + weight_decay * p)
        new_vb.append(step_v)
        new_biases.append(p - lr * step_v)
    return (
        EncoderParams(config=params.config, weights=new_weights, biases=new_biases),
        EncoderGrads(weights=new_vw, biases=new_vb),
    )


@dataclass
class TrainState:
    """Everything a step needs; fully captured by checkpoints."""

    config: TrainConfig
    query_params: EncoderParams
    key_state: MomentumState
    queue: FeatureQueue
    velocity: EncoderGrads
    global_step: int
    total_steps: int

    @property
    def steps_per_epoch(self) -> int:
        return max(1, self.total_steps // max(1, self.config.epochs))

    @property
    def epoch(self) -> int:
        return self.global_step // self.steps_per_epoch


def init_state(config: TrainConfig, dataset_size: int) -> TrainState:
    config.validate()
    steps_per_epoch = math.ceil(dataset_size / config.batch_size)
    params = init_params(config.encoder)
    return TrainState(
        config=config,
        query_params=params,
        key_state=MomentumState(key_params=params.copy(), momentum=config.ema_m),
        queue=init_queue(config.queue_k, config.encoder.embed_dim, config.seed),
        velocity=zero_grads(params),
        global_step=0,
        total_steps=config.epochs * steps_per_epoch,
    )


def epoch_order(config: TrainConfig, dataset_size: int, epoch: int) -> np.ndarray:
    """Deterministic sample order for one epoch."""
    return substream(config.seed, _SHUFFLE_STREAM, epoch).permutation(dataset_size)


def batch_indices(order: np.ndarray, step_in_epoch: int, batch_size: int) -> np.ndarray:
    """Dataset indices for one step; a short final slice wraps around.

    Wrapping keeps every step at full batch size so enqueues always divide
    the queue capacity, at the cost of re-visiting a few samples when the
    dataset size is not a multiple of the batch.
    """
    chunk = order[step_in_epoch * batch_size : (step_in_epoch + 1) * batch_size]
    if chunk.shape[0] < batch_size:
        chunk = np.concatenate([chunk, order[: batch_size - chunk.shape[0]]])
    return chunk


def train_step(state: TrainState, batch: list[tuple[int, Sample]]) -> MetricsRecord:
    """One optimization step over an explicit batch; mutates state.

    batch holds (dataset index, sample) pairs; the index keys the
    augmentation substreams. Metrics reflect the pre-update loss.
    """
    config = state.config
    epoch = state.epoch
    hp = config.hyper_params()

    x_q = np.empty((len(batch), config.encoder.input_dim))
    x_p = np.empty_like(x_q)
    for row, (sample_index, sample) in enumerate(batch):
        x_q[row], x_p[row] = two_views(
            sample, config.augment, view_rngs(config.seed, epoch, sample_index)
        )

    q_batch = forward_batch(state.query_params, x_q)
    p_batch = forward_batch(state.key_state.key_params, x_p)  # no gradient path
    negatives = snapshot(state.queue)

    result = batch_total_loss(q_batch, p_batch, negatives, hp)
    lr = lr_at(config, state.global_step, state.total_steps)

    upstream = result.grad_q / len(batch)
    grads = backward_batch(state.query_params, x_q, upstream)
    state.query_params, state.velocity = sgd_update(
        state.query_params, grads, lr, config.sgd_momentum, config.weight_decay, state.velocity
    )
    state.key_state = momentum_update(state.key_state, state.query_params)
    enqueue_batch(state.queue, p_batch)

    record = MetricsRecord(
        step=state.global_step,
        epoch=epoch,
        lr=lr,
        mean_l_ins=float(np.mean(result.l_ins)),
        mean_l_con=float(np.mean(result.l_con)),
        mean_total=float(np.mean(result.total)),
        inst_disc_acc=float(np.mean(result.correct)),
    )
    state.global_step += 1
    return record


def run_training(
    config: TrainConfig,
    dataset: list[Sample],
    sink=None,
    checkpoint_path=None,
    resume_from: TrainState | None = None,
) -> TrainState:
    """Train for epochs * ceil(N/batch) steps; stream metrics to sink.

    sink is a callable taking each MetricsRecord (its errors surface as
    SinkFailure). With checkpoint_path set, a checkpoint is written every
    config.checkpoint_every steps and at the end. Passing resume_from
    continues a checkpointed run and reproduces the uninterrupted metrics
    exactly.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    state = resume_from if resume_from is not None else init_state(config, len(dataset))

    order: np.ndarray | None = None
    order_epoch = -1
    while state.global_step < state.total_steps:
        epoch = state.epoch
        if epoch != order_epoch:
            order = epoch_order(config, len(dataset), epoch)
            order_epoch = epoch
        step_in_epoch = state.global_step % state.steps_per_epoch
        indices = batch_indices(order, step_in_epoch, config.batch_size)
        batch = [(int(i), dataset[int(i)]) for i in indices]
        record = train_step(state, batch)
        if sink is not None:
            try:
                sink(record)
            except Exception as exc:
                raise SinkFailure(f"metrics sink failed at step {record.step}: {exc}") from exc
        if (
            checkpoint_path is not None
            and config.checkpoint_every > 0
            and state.global_step % config.checkpoint_every == 0
        ):
            save_checkpoint(state, checkpoint_path)
    if checkpoint_path is not None:
        save_checkpoint(state, checkpoint_path)
    return state


# ---------------------------------------------------------------------------
# Checkpoint container: magic, version, then (tag, length, payload) sections
# ---------------------------------------------------------------------------

_TAG_CONFIG = b"CONFIG\x00\x00"
_TAG_QPARAMS = b"QPARAMS\x00"
_TAG_KPARAMS = b"KPARAMS\x00"
_TAG_VELOCITY = b"VELOCITY"
_TAG_QUEUE = b"QUEUE\x00\x00\x00"
_TAG_PROGRESS = b"PROGRESS"


def serialize_checkpoint(state: TrainState) -> bytes:
    velocity_blob = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes() for a in state.velocity.arrays()
    )
    sections = [
        (_TAG_CONFIG, json.dumps(state.config.to_dict(), sort_keys=True).encode()),
        (_TAG_QPARAMS, serialize_params(state.query_params)),
        (_TAG_KPARAMS, serialize_params(state.key_state.key_params)),
        (_TAG_VELOCITY, velocity_blob),
        (_TAG_QUEUE, serialize_queue(state.queue)),
        (_TAG_PROGRESS, struct.pack("<QQ", state.global_step, state.total_steps)),
    ]
    out = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    for tag, payload in sections:
        out.append(tag)
        out.append(struct.pack("<Q", len(payload)))
        out.append(payload)
    return b"".join(out)


def deserialize_checkpoint(blob: bytes) -> TrainState:
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise BadMagic("not a CO2CKPT container")
    offset = len(CHECKPOINT_MAGIC)
    if len(blob) < offset + 2:
        raise TruncatedFile("checkpoint ends before version field")
    (version,) = struct.unpack("<H", blob[offset : offset + 2])
    if version != CHECKPOINT_VERSION:
        raise TruncatedFile(f"unsupported checkpoint version {version}")
    offset += 2

    sections: dict[bytes, bytes] = {}
    while offset < len(blob):
        if len(blob) < offset + 16:
            raise TruncatedFile("checkpoint ends mid section header")
        tag = blob[offset : offset + 8]
        (length,) = struct.unpack("<Q", blob[offset + 8 : offset + 16])
        offset += 16
        if len(blob) < offset + length:
            raise TruncatedFile(f"section {tag!r} declared {length} bytes, fewer remain")
        sections[tag] = blob[offset : offset + length]
        offset += length
    missing = [
        t
        for t in (_TAG_CONFIG, _TAG_QPARAMS, _TAG_KPARAMS, _TAG_VELOCITY, _TAG_QUEUE, _TAG_PROGRESS)
        if t not in sections
    ]
    if missing:
        raise TruncatedFile(f"checkpoint missing sections {missing}")

    config = TrainConfig.from_dict(json.loads(sections[_TAG_CONFIG].decode()))
    query_params = deserialize_params(sections[_TAG_QPARAMS])
    key_params = deserialize_params(sections[_TAG_KPARAMS])
    global_step, total_steps = struct.unpack("<QQ", sections[_TAG_PROGRESS])

    velocity = zero_grads(query_params)
    flat = np.frombuffer(sections[_TAG_VELOCITY], dtype="<f8")
    expected = sum(a.size for a in velocity.arrays())
    if flat.size != expected:
        raise TruncatedFile(f"velocity section has {flat.size} floats, expected {expected}")
    cursor = 0
    for a in velocity.arrays():
        a[...] = flat[cursor : cursor + a.size].reshape(a.shape)
        cursor += a.size

    return TrainState(
        config=config,
        query_params=query_params,
        key_state=MomentumState(key_params=key_params, momentum=config.ema_m),
        queue=deserialize_queue(sections[_TAG_QUEUE]),
        velocity=velocity,
        global_step=int(global_step),
        total_steps=int(total_steps),
    )


def save_checkpoint(state: TrainState, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_checkpoint(state))


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as fh:
        return deserialize_checkpoint(fh.read())
