"""Contrastive objective: instance discrimination plus consistency regularization.

A training item is a query embedding q, a positive embedding p from a second
view of the same sample, and K queued negative embeddings. The instance
discrimination term is InfoNCE over [q.p, q.n_1..q.n_K]. The consistency
term compares the query's and the positive's similarity distributions over
the negatives with a symmetric KL divergence; the positive's distribution
acts as a soft target and never receives gradient (p and the queue entries
are produced by the momentum encoder and are constants here).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidEpsilon, NonPositiveTemperature
from .numeric import as_vector

UNIT_NORM_ATOL = 1e-6


@dataclass
class LossHyperParams:
    """Temperatures and weights of the combined objective.

    smoothing_eps > 0 replaces the one-hot InfoNCE target with a smoothed
    target (1-eps on the positive, eps/K on each negative); it exists for
    the smoothing ablation and is off by default.
    """

    tau_ins: float = 0.07
    tau_con: float = 0.04
    alpha: float = 10.0
    smoothing_eps: float = 0.0

    def validate(self) -> "LossHyperParams":
        if self.tau_ins <= 0 or self.tau_con <= 0:
            raise NonPositiveTemperature(
                f"temperatures must be > 0: tau_ins={self.tau_ins}, tau_con={self.tau_con}"
            )
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not 0.0 <= self.smoothing_eps < 1.0:
            raise InvalidEpsilon(f"smoothing_eps must be in [0, 1), got {self.smoothing_eps}")
        return self


@dataclass
class ContrastBatchItem:
    """One (query, positive, negatives) triple. All rows unit norm."""

    q: np.ndarray  # (d,)
    p: np.ndarray  # (d,)
    negatives: np.ndarray  # (K, d)

    @classmethod
    def create(cls, q, p, negatives) -> "ContrastBatchItem":
        """Validating constructor; use for externally produced embeddings."""
        q = as_vector(q)
        p = as_vector(p)
        negatives = np.asarray(negatives, dtype=np.float64)
        if negatives.ndim != 2 or negatives.shape[0] < 1:
            raise ValueError(f"negatives must be a (K, d) array with K >= 1, got {negatives.shape}")
        if q.shape != p.shape or negatives.shape[1] != q.shape[0]:
            raise ValueError("q, p, and negatives must share the embedding dimension")
        for name, rows in (("q", q[None, :]), ("p", p[None, :]), ("negatives", negatives)):
            norms = np.linalg.norm(rows, axis=1)
            if np.any(np.abs(norms - 1.0) > UNIT_NORM_ATOL):
                raise ValueError(f"{name} must be unit-normalized within {UNIT_NORM_ATOL}")
        return cls(q=q, p=p, negatives=negatives)

    @property
    def num_negatives(self) -> int:
        return self.negatives.shape[0]


@dataclass
class LossBreakdown:
    """Per-item loss terms; total = l_ins + alpha * l_con for the alpha used."""

    l_ins: float
    l_con: float
    total: float
    correct_instance: bool
    alpha: float


def _instance_logits(item: ContrastBatchItem) -> np.ndarray:
    """Unscaled logits [q.p, q.n_1, ..., q.n_K], positive first."""
    return np.concatenate(([float(item.q @ item.p)], item.negatives @ item.q))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z)
    return z - np.log(np.sum(np.exp(z)))


def info_nce(item: ContrastBatchItem, tau_ins: float) -> tuple[float, np.ndarray]:
    """Instance discrimination loss and its unscaled logits.

    loss = -log softmax(logits / tau_ins)[0], computed stably.
    """
    if tau_ins <= 0:
        raise NonPositiveTemperature(f"tau_ins must be > 0, got {tau_ins}")
    logits = _instance_logits(item)
    loss = -_log_softmax(logits / tau_ins)[0]
    return float(loss), logits


def similarity_distribution(anchor, negatives, tau_con: float) -> np.ndarray:
    """Softmax over the anchor's dot products with the negatives only.

    The positive is deliberately outside the support: the distribution
    describes how the anchor would pick a match among queued negatives.
    """
    if tau_con <= 0:
        raise NonPositiveTemperature(f"tau_con must be > 0, got {tau_con}")
    anchor = as_vector(anchor)
    negatives = np.asarray(negatives, dtype=np.float64)
    return np.exp(_log_softmax((negatives @ anchor) / tau_con))


def consistency_loss(item: ContrastBatchItem, tau_con: float) -> float:
    """Symmetric KL between the positive's and the query's similarity distributions.

    Evaluated in log space from one softmax per anchor:
    0.5*(KL(P||Q) + KL(Q||P)) = 0.5 * sum_i (P_i - Q_i)(log P_i - log Q_i).
    """
    if tau_con <= 0:
        raise NonPositiveTemperature(f"tau_con must be > 0, got {tau_con}")
    log_p = _log_softmax((item.negatives @ item.p) / tau_con)
    log_q = _log_softmax((item.negatives @ item.q) / tau_con)
    p = np.exp(log_p)
    q = np.exp(log_q)
    return float(0.5 * np.sum((p - q) * (log_p - log_q)))


def _smoothed_targets(num_negatives: int, eps: float) -> np.ndarray:
    """Target over K+1 logits: 1-eps on the positive, eps/K per negative."""
    targets = np.full(num_negatives + 1, eps / num_negatives)
    targets[0] = 1.0 - eps
    return targets


def label_smoothing_infonce(item: ContrastBatchItem, tau_ins: float, eps: float) -> float:
    """Cross-entropy against the smoothed target; equals info_nce at eps=0."""
    if not 0.0 <= eps < 1.0:
        raise InvalidEpsilon(f"eps must be in [0, 1), got {eps}")
    if tau_ins <= 0:
        raise NonPositiveTemperature(f"tau_ins must be > 0, got {tau_ins}")
    log_s = _log_softmax(_instance_logits(item) / tau_ins)
    return float(-np.sum(_smoothed_targets(item.num_negatives, eps) * log_s))


def total_loss(item: ContrastBatchItem, hp: LossHyperParams) -> LossBreakdown:
    """Combined objective: l_ins + alpha * l_con.

    l_con is always computed (and reported) even at alpha=0, so a pure
    instance-discrimination run still logs its consistency disagreement.
    correct_instance is True when the positive logit strictly beats every
    negative logit.
    """
    hp.validate()
    logits = _instance_logits(item)
    log_s = _log_softmax(logits / hp.tau_ins)
    if hp.smoothing_eps > 0.0:
        l_ins = float(-np.sum(_smoothed_targets(item.num_negatives, hp.smoothing_eps) * log_s))
    else:
        l_ins = float(-log_s[0])
    l_con = consistency_loss(item, hp.tau_con)
    return LossBreakdown(
        l_ins=l_ins,
        l_con=l_con,
        total=l_ins + hp.alpha * l_con,
        correct_instance=bool(logits[0] > np.max(logits[1:])),
        alpha=hp.alpha,
    )


def loss_gradient_wrt_query(item: ContrastBatchItem, hp: LossHyperParams) -> np.ndarray:
    """Exact gradient of total_loss with respect to q.

    p and the negatives are constants (stop-gradient): p comes from the
    momentum encoder and queue entries are detached, so the positive's
    distribution is a fixed soft target. The gradient is taken with
    respect to the already-normalized q as given.
    """
    hp.validate()
    s = np.exp(_log_softmax(_instance_logits(item) / hp.tau_ins))
    targets = _smoothed_targets(item.num_negatives, hp.smoothing_eps)
    delta = s - targets
    grad = (delta[0] * item.p + delta[1:] @ item.negatives) / hp.tau_ins

    if hp.alpha > 0.0:
        log_p = _log_softmax((item.negatives @ item.p) / hp.tau_con)
        log_q = _log_softmax((item.negatives @ item.q) / hp.tau_con)
        p_dist = np.exp(log_p)
        q_dist = np.exp(log_q)
        kl_qp = float(np.sum(q_dist * (log_q - log_p)))
        # d/du of 0.5*KL(P||Q) is 0.5*(Q - P); of 0.5*KL(Q||P) it is
        # 0.5*Q*((log Q - log P) - KL(Q||P)), with u the scaled logits q.n/tau.
        g_logits = 0.5 * (q_dist - p_dist) + 0.5 * q_dist * ((log_q - log_p) - kl_qp)
        grad = grad + hp.alpha * (g_logits @ item.negatives) / hp.tau_con
    return grad


@dataclass
class BatchLossResult:
    """Vectorized per-item losses and query gradients for one minibatch."""

    l_ins: np.ndarray  # (N,)
    l_con: np.ndarray  # (N,)
    total: np.ndarray  # (N,)
    correct: np.ndarray  # (N,) bool
    grad_q: np.ndarray  # (N, d) gradient of each item's total loss wrt its q


def batch_total_loss(
    q_batch: np.ndarray, p_batch: np.ndarray, negatives: np.ndarray, hp: LossHyperParams
) -> BatchLossResult:
    """total_loss + loss_gradient_wrt_query over a whole batch at once.

    Row i of the result matches the per-item operations on
    (q_batch[i], p_batch[i], negatives) exactly; this is the trainer's
    hot path.
    """
    hp.validate()
    n, _ = q_batch.shape
    k = negatives.shape[0]

    dot_qp = np.einsum("nd,nd->n", q_batch, p_batch)
    dot_qn = q_batch @ negatives.T  # (N, K)
    logits = np.concatenate([dot_qp[:, None], dot_qn], axis=1)  # (N, K+1)

    z = logits / hp.tau_ins
    z = z - np.max(z, axis=1, keepdims=True)
    log_s = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    s = np.exp(log_s)
    targets = _smoothed_targets(k, hp.smoothing_eps)
    if hp.smoothing_eps > 0.0:
        l_ins = -log_s @ targets
    else:
        l_ins = -log_s[:, 0]
    delta = s - targets[None, :]
    grad_q = (delta[:, 0:1] * p_batch + delta[:, 1:] @ negatives) / hp.tau_ins

    dot_pn = p_batch @ negatives.T
    log_pd = _row_log_softmax(dot_pn / hp.tau_con)
    log_qd = _row_log_softmax(dot_qn / hp.tau_con)
    p_dist = np.exp(log_pd)
    q_dist = np.exp(log_qd)
    l_con = 0.5 * np.sum((p_dist - q_dist) * (log_pd - log_qd), axis=1)

    if hp.alpha > 0.0:
        kl_qp = np.sum(q_dist * (log_qd - log_pd), axis=1)
        g_logits = 0.5 * (q_dist - p_dist) + 0.5 * q_dist * (
            (log_qd - log_pd) - kl_qp[:, None]
        )
        grad_q = grad_q + hp.alpha * (g_logits @ negatives) / hp.tau_con

    return BatchLossResult(
        l_ins=l_ins,
        l_con=l_con,
        total=l_ins + hp.alpha * l_con,
        correct=logits[:, 0] > np.max(logits[:, 1:], axis=1),
        grad_q=grad_q,
    )


def _row_log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
