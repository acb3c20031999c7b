"""Synthetic datasets, dataset file IO, and the two-view augmentation.

Augmentation operates directly on feature vectors: per-coordinate Gaussian
noise, a random contiguous crop window (coordinates outside it zeroed), a
random global scale, and random coordinate masking. Two independently
perturbed views of the same sample define what "similar" means for the
contrastive objective.

Randomness is counter-based: every consumer derives a generator from an
explicit key path (seed, epoch, sample index, view index, ...), so results
are independent of iteration order and trivially resumable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagic, DimensionMismatch, TruncatedFile

DATA_MAGIC = b"CO2DATA\x00"
DATA_VERSION = 1
_FLAG_LABELS = 1


@dataclass
class Sample:
    """A feature vector with an optional class label (hidden in pretraining)."""

    features: np.ndarray  # (D,) float64
    label: int | None = None


@dataclass
class AugmentConfig:
    noise_sigma: float = 0.1
    mask_fraction: float = 0.1
    scale_jitter: float = 0.1
    crop_keep: float = 0.75

    def validate(self) -> "AugmentConfig":
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 <= self.mask_fraction < 1.0:
            raise ValueError(f"mask_fraction must be in [0, 1), got {self.mask_fraction}")
        if self.scale_jitter < 0:
            raise ValueError(f"scale_jitter must be >= 0, got {self.scale_jitter}")
        if not 0.0 < self.crop_keep <= 1.0:
            raise ValueError(f"crop_keep must be in (0, 1], got {self.crop_keep}")
        return self


@dataclass
class SyntheticSpec:
    """Gaussian class blobs: C centers, samples_per_class points around each."""

    num_classes: int = 4
    samples_per_class: int = 64
    input_dim: int = 32
    center_seed: int = 7
    center_scale: float = 1.0
    within_sigma: float = 0.8

    def validate(self) -> "SyntheticSpec":
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.input_dim < 2:
            raise ValueError(f"need input_dim >= 2, got {self.input_dim}")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        return self


def substream(*key: int) -> np.random.Generator:
    """Deterministic generator for an explicit integer key path."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _as_f32_exact(x: np.ndarray) -> np.ndarray:
    """Round to float32-representable values (dataset files store float32)."""
    return x.astype(np.float32).astype(np.float64)


def generate_synthetic(spec: SyntheticSpec) -> list[Sample]:
    """Deterministic labeled blobs; class-major order, exactly balanced."""
    spec.validate()
    centers_rng = substream(spec.center_seed, 0)
    noise_rng = substream(spec.center_seed, 1)
    centers = centers_rng.standard_normal((spec.num_classes, spec.input_dim)) * spec.center_scale
    samples = []
    for c in range(spec.num_classes):
        for _ in range(spec.samples_per_class):
            features = centers[c] + noise_rng.standard_normal(spec.input_dim) * spec.within_sigma
            samples.append(Sample(features=_as_f32_exact(features), label=c))
    return samples


def standardize(samples: list[Sample]) -> list[Sample]:
    """Per-coordinate zero mean / unit variance across the dataset."""
    features = np.stack([s.features for s in samples])
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std[std == 0.0] = 1.0
    return [
        Sample(features=_as_f32_exact((s.features - mean) / std), label=s.label)
        for s in samples
    ]


def view_rngs(seed: int, epoch: int, sample_index: int):
    """Disjoint substreams for the two views of one sample in one epoch."""
    return (
        substream(seed, epoch, sample_index, 0),
        substream(seed, epoch, sample_index, 1),
    )


def _augment(features: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    d = features.shape[0]
    x = features + rng.standard_normal(d) * cfg.noise_sigma
    window = max(1, int(round(cfg.crop_keep * d)))
    start = int(rng.integers(0, d - window + 1))
    if window < d:
        kept = np.zeros_like(x)
        kept[start : start + window] = x[start : start + window]
        x = kept
    x = x * rng.uniform(1.0 - cfg.scale_jitter, 1.0 + cfg.scale_jitter)
    num_masked = int(round(cfg.mask_fraction * d))
    if num_masked > 0:
        x[rng.choice(d, size=num_masked, replace=False)] = 0.0
    return x


def two_views(sample: Sample, cfg: AugmentConfig, rngs) -> tuple[np.ndarray, np.ndarray]:
    """Two independent stochastic transforms of the same features.

    rngs is the (query stream, positive stream) pair from view_rngs. With
    the all-identity config both views equal the input exactly.
    """
    cfg.validate()
    rng_q, rng_p = rngs
    return _augment(sample.features, cfg, rng_q), _augment(sample.features, cfg, rng_p)


# ---------------------------------------------------------------------------
# Dataset file format
# ---------------------------------------------------------------------------


def save_dataset(samples: list[Sample], path) -> None:
    """Write samples to the CO2DATA container (float32 features)."""
    if not samples:
        raise ValueError("refusing to write an empty dataset")
    dim = samples[0].features.shape[0]
    if any(s.features.shape != (dim,) for s in samples):
        raise DimensionMismatch("samples disagree on feature dimension")
    labels_present = all(s.label is not None for s in samples)
    if not labels_present and any(s.label is not None for s in samples):
        raise ValueError("either all samples carry labels or none do")
    flags = _FLAG_LABELS if labels_present else 0
    features = np.stack([s.features for s in samples]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(struct.pack("<HHII", DATA_VERSION, flags, len(samples), dim))
        fh.write(features.tobytes())
        if labels_present:
            labels = np.array([s.label for s in samples], dtype="<u4")
            fh.write(labels.tobytes())


def load_dataset(path) -> list[Sample]:
    """Read a CO2DATA container; features come back as float64."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(DATA_MAGIC)] != DATA_MAGIC:
        raise BadMagic(f"{path}: not a CO2DATA file")
    offset = len(DATA_MAGIC)
    if len(blob) < offset + 12:
        raise TruncatedFile(f"{path}: header incomplete")
    version, flags, count, dim = struct.unpack("<HHII", blob[offset : offset + 12])
    offset += 12
    if version != DATA_VERSION:
        raise DimensionMismatch(f"{path}: unsupported dataset version {version}")
    feature_bytes = 4 * count * dim
    if len(blob) < offset + feature_bytes:
        raise TruncatedFile(f"{path}: feature section incomplete")
    features = (
        np.frombuffer(blob[offset : offset + feature_bytes], dtype="<f4")
        .reshape(count, dim)
        .astype(np.float64)
    )
    offset += feature_bytes
    labels = None
    if flags & _FLAG_LABELS:
        label_bytes = 4 * count
        if len(blob) < offset + label_bytes:
            raise TruncatedFile(f"{path}: label section missing or incomplete")
        labels = np.frombuffer(blob[offset : offset + label_bytes], dtype="<u4")
        offset += label_bytes
    if offset != len(blob):
        raise DimensionMismatch(f"{path}: {len(blob) - offset} trailing bytes")
    return [
        Sample(features=features[i], label=int(labels[i]) if labels is not None else None)
        for i in range(count)
    ]
