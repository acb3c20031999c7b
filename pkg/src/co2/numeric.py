"""Scalar/vector primitives shared by every other module.

All math is float64. Vectors are plain 1-D numpy arrays; probability
vectors are 1-D arrays of nonnegative entries summing to 1.
"""

from __future__ import annotations

import numpy as np

from .errors import LengthMismatch, NonPositiveTemperature, SupportViolation, ZeroVector

ZERO_NORM_THRESHOLD = 1e-12


def as_vector(v) -> np.ndarray:
    """Coerce to a float64 1-D array, rejecting NaN/Inf."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector contains NaN or Inf")
    return arr


def l2_normalize(v) -> np.ndarray:
    """Scale v to unit Euclidean norm, preserving direction.

    Raises ZeroVector when the norm is below 1e-12.
    """
    arr = as_vector(v)
    norm = float(np.linalg.norm(arr))
    if norm < ZERO_NORM_THRESHOLD:
        raise ZeroVector(f"cannot normalize vector with norm {norm:.3e}")
    return arr / norm


def softmax_temp(logits, tau: float) -> np.ndarray:
    """Temperature softmax with max-subtraction for overflow safety.

    Returns exp(logits/tau) / sum(exp(logits/tau)); sums to 1.
    """
    if tau <= 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {tau}")
    arr = as_vector(logits)
    z = arr / tau
    z = z - np.max(z)
    e = np.exp(z)
    return e / np.sum(e)


def log_softmax_temp(logits, tau: float) -> np.ndarray:
    """Log of softmax_temp, computed without forming the exponentials' ratio."""
    if tau <= 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {tau}")
    arr = as_vector(logits)
    z = arr / tau
    z = z - np.max(z)
    return z - np.log(np.sum(np.exp(z)))


def kl_divergence(p, q) -> float:
    """Directed KL divergence sum_i p[i] * log(p[i]/q[i]).

    Uses the convention 0*log(0) = 0. Raises SupportViolation when
    p[i] > 0 while q[i] = 0.
    """
    p_arr = as_vector(p)
    q_arr = as_vector(q)
    if p_arr.shape != q_arr.shape:
        raise LengthMismatch(f"lengths differ: {p_arr.shape[0]} vs {q_arr.shape[0]}")
    support = p_arr > 0.0
    if np.any(q_arr[support] == 0.0):
        raise SupportViolation("p has mass where q is zero")
    terms = np.zeros_like(p_arr)
    terms[support] = p_arr[support] * (np.log(p_arr[support]) - np.log(q_arr[support]))
    return float(np.sum(terms))


def symmetric_kl(p, q) -> float:
    """0.5 * KL(p||q) + 0.5 * KL(q||p). Symmetric; 0 iff p = q."""
    return 0.5 * kl_divergence(p, q) + 0.5 * kl_divergence(q, p)
