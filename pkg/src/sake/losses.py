"""Training objective: benchmark classification plus semantic distillation.

The total loss is L_benchmark + lambda_sake * L_SAKE. The benchmark term
is plain cross-entropy on source-class labels over both modalities. The
SAKE term distills a frozen teacher's original-domain predictions into
the student's original-domain head, after blending the teacher logits
with a taxonomy-similarity row: q = softmax(lambda1 * t + lambda2 * a).
With lambda1=1, lambda2=0 the target collapses to softmax(t), i.e.
ordinary soft-label distillation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .model import ModelParams, benchmark_logits, embed_batch, original_logits
from .tensor import Tensor, log_softmax, mul, neg, no_grad, reshape, softmax_nd, tsum


@dataclass
class LossConfig:
    lambda_sake: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 0.3
    apply_sake_to_sketches: bool = True

    def __post_init__(self):
        for name in ("lambda_sake", "lambda1", "lambda2"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be non-negative")


@dataclass
class Batch:
    """One training batch: images (N,1,H,W), modality bits, head labels."""
    images: np.ndarray
    domains: np.ndarray
    labels: np.ndarray


@dataclass
class TeacherSignal:
    """Raw teacher logits plus the distilled target distributions."""
    t: np.ndarray   # raw logits over original classes
    qt: np.ndarray  # softmax(t)
    q: np.ndarray   # softmax(lambda1*t + lambda2*a_row)


def _as_rows(arr, name: str) -> np.ndarray:
    a = np.asarray(arr)
    if a.ndim == 1:
        a = a[None]
    if a.ndim != 2:
        raise ContractViolation(f"{name} must be a vector or matrix")
    return a


def blend_teacher_signal(t, a_row, lambda1: float, lambda2: float) -> np.ndarray:
    """Target distribution q = softmax(lambda1*t + lambda2*a_row).

    Accepts single vectors or row-aligned batches; returns the same rank.
    """
    t_arr = np.asarray(t)
    single = t_arr.ndim == 1
    t2 = _as_rows(t_arr, "teacher logits")
    a2 = _as_rows(a_row, "similarity row")
    if a2.shape[0] == 1 and t2.shape[0] > 1:
        a2 = np.broadcast_to(a2, t2.shape)
    if a2.shape != t2.shape:
        raise ContractViolation(
            f"similarity rows {a2.shape} do not align with logits {t2.shape}")
    q = softmax_nd(lambda1 * t2 + lambda2 * a2.astype(t2.dtype), axis=1)
    return q[0] if single else q


def make_teacher_signal(t, a_row, lambda1: float, lambda2: float) -> TeacherSignal:
    t_arr = np.asarray(t)
    return TeacherSignal(
        t=t_arr,
        qt=softmax_nd(t_arr, axis=-1),
        q=blend_teacher_signal(t_arr, a_row, lambda1, lambda2),
    )


def _logits_2d(logits: Tensor) -> Tensor:
    if logits.data.ndim == 1:
        return reshape(logits, (1, logits.shape[0]))
    if logits.data.ndim != 2:
        raise ContractViolation("logits must be 1-D or 2-D")
    return logits


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over the batch."""
    lg = _logits_2d(logits)
    n, k = lg.shape
    y = np.asarray(labels)
    if y.ndim == 0:
        y = y[None]
    if y.shape != (n,):
        raise ContractViolation(f"{y.shape[0] if y.ndim else 1} labels for {n} rows")
    if y.min() < 0 or y.max() >= k:
        raise ContractViolation(f"label outside [0, {k})")
    weights = np.zeros((n, k), dtype=lg.data.dtype)
    weights[np.arange(n), y] = 1.0 / n
    return neg(tsum(mul(Tensor(weights), log_softmax(lg))))


def soft_cross_entropy(logits: Tensor, q) -> Tensor:
    """Mean of -sum_m q_m log softmax(logits)_m over the batch."""
    lg = _logits_2d(logits)
    n, k = lg.shape
    q2 = _as_rows(q, "target distribution")
    if q2.shape != (n, k):
        raise ContractViolation(f"targets {q2.shape} do not match logits {(n, k)}")
    if q2.min() < -0.0:
        raise ContractViolation("target distribution has negative entries")
    sums = q2.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-9:
        raise ContractViolation("target rows must sum to 1 within 1e-9")
    weights = (q2 / n).astype(lg.data.dtype)
    return neg(tsum(mul(Tensor(weights), log_softmax(lg))))


def _weighted_soft_ce(logits: Tensor, q: np.ndarray, mask: np.ndarray) -> Tensor:
    """Soft cross-entropy averaged over the rows selected by mask."""
    contributing = int(mask.sum())
    if contributing == 0:
        return Tensor(np.asarray(0.0, dtype=logits.data.dtype))
    weights = (q * mask[:, None] / contributing).astype(logits.data.dtype)
    return neg(tsum(mul(Tensor(weights), log_softmax(logits))))


def total_loss(batch, params: ModelParams, teacher: ModelParams,
               A, cfg: LossConfig):
    """Combined objective on one batch; returns (loss, per-term breakdown).

    `batch` carries images (N,1,H,W), domains (N,), and labels (N,) where
    labels index rows of A (the source-class order). Teacher logits are
    recomputed here on the exact same inputs, so augmentation reaches the
    teacher too.
    """
    images, domains, labels = batch.images, batch.domains, batch.labels
    n = images.shape[0]
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= len(A.source_classes):
        raise ContractViolation("batch label outside the source set")

    x = embed_batch(params, images, domains)
    bench = cross_entropy(benchmark_logits(params, x), labels)

    with no_grad():
        t_logits = original_logits(
            teacher, embed_batch(teacher, images, domains)).data
    a_rows = A.values[labels]
    q = blend_teacher_signal(t_logits, a_rows, cfg.lambda1, cfg.lambda2)

    if cfg.apply_sake_to_sketches:
        mask = np.ones(n, dtype=bool)
    else:
        mask = np.asarray(domains) == 0
    sake = _weighted_soft_ce(original_logits(params, x), q, mask)

    lam = Tensor(np.asarray(cfg.lambda_sake, dtype=sake.data.dtype))
    total = bench + sake * lam
    breakdown = {
        "benchmark": float(bench.data),
        "sake": float(sake.data),
        "total": float(total.data),
    }
    return total, breakdown
