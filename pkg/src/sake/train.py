"""Teacher pretraining, distillation fine-tuning, and the linear probe.

The teacher trains from scratch on original-domain photos. Fine-tuning
starts a student from the teacher's backbone and original head (fresh
benchmark head) and optimizes benchmark cross-entropy plus the semantic
distillation term, with teacher logits recomputed on every augmented
batch. The linear probe freezes a network, fits a fresh linear head on
its embeddings of original photos, and reports held-out top-1 accuracy
— the catastrophic-forgetting measure.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import PHOTO, AugmentConfig, augment
from .errors import ContractViolation, NumericError, TrainingDivergence
from .losses import Batch, LossConfig, cross_entropy, total_loss
from .model import (ModelConfig, ModelParams, benchmark_logits, embed_batch,
                    embed_samples, init_params, original_logits)
from .optim import OptimizerState, adam_step
from .tensor import Tensor, backward, matmul, no_grad

_PRETRAIN_ACCURACY_FLOOR = 0.60


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 40
    lr_initial: float = 1e-2
    lr_final: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 5e-4
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractViolation("epochs and batch_size must be positive")

    def optimizer_state(self, total_steps: int) -> OptimizerState:
        return OptimizerState(
            lr_initial=self.lr_initial, lr_final=self.lr_final,
            total_steps=total_steps, beta1=self.beta1, beta2=self.beta2,
            epsilon=self.epsilon, weight_decay=self.weight_decay)


@dataclass
class TrainReport:
    seed: int
    config: dict
    epoch_losses: list[dict]          # one {"epoch", "benchmark", "sake", "total"} per epoch
    final_train_accuracy: float
    wall_clock_seconds: float

    def to_dict(self) -> dict:
        """Canonical, run-invariant content (wall clock lives in a sidecar)."""
        return {
            "seed": self.seed,
            "config": self.config,
            "epoch_losses": self.epoch_losses,
            "final_train_accuracy": self.final_train_accuracy,
        }


def save_report(report: TrainReport, path) -> None:
    """Canonical report JSON plus a .timing.json sidecar with wall clock."""
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    sidecar = path.with_name(path.stem + ".timing.json")
    sidecar.write_text(json.dumps(
        {"wall_clock_seconds": report.wall_clock_seconds}, indent=2) + "\n")


def _class_index(class_order) -> dict[int, int]:
    return {int(c): i for i, c in enumerate(class_order)}


def _make_batch(samples, idx, rng, aug_cfg: AugmentConfig,
                label_of: dict[int, int]) -> Batch:
    images = np.stack([augment(samples[i].image, rng, aug_cfg) for i in idx])
    domains = np.array([float(samples[i].modality) for i in idx])
    labels = np.array([label_of[samples[i].class_id] for i in idx])
    return Batch(images, domains, labels)


def _run_epochs(samples, cfg: TrainConfig, label_of: dict[int, int],
                step_fn, seed_tag: int) -> list[dict]:
    """Shared epoch/batch loop; step_fn(batch) -> per-term breakdown dict."""
    n = len(samples)
    if n < cfg.batch_size:
        raise ContractViolation(
            f"split of {n} samples cannot fill a batch of {cfg.batch_size}")
    steps_per_epoch = n // cfg.batch_size
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, seed_tag]))
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums: dict[str, float] = {}
        for step in range(steps_per_epoch):
            idx = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            batch = _make_batch(samples, idx, rng, cfg.augment, label_of)
            try:
                breakdown = step_fn(batch)
            except NumericError as err:
                raise TrainingDivergence(
                    f"non-finite value in '{err.op}' at epoch {epoch}, "
                    f"step {step}") from err
            for key, val in breakdown.items():
                sums[key] = sums.get(key, 0.0) + val
        entry = {k: v / steps_per_epoch for k, v in sorted(sums.items())}
        entry["epoch"] = epoch
        history.append(entry)
    return history


def _head_accuracy(params: ModelParams, samples, label_of: dict[int, int],
                   head) -> float:
    """Top-1 accuracy of a classifier head over unaugmented samples."""
    feats = embed_samples(params, samples)
    with no_grad():
        logits = head(params, Tensor(feats)).data
    preds = logits.argmax(axis=1)
    labels = np.array([label_of[s.class_id] for s in samples])
    return float((preds == labels).mean())


def benchmark_accuracy(params, samples, class_order) -> float:
    return _head_accuracy(params, samples, _class_index(class_order),
                          benchmark_logits)


def original_accuracy(params, samples, class_order) -> float:
    return _head_accuracy(params, samples, _class_index(class_order),
                          original_logits)


def pretrain_teacher(original_samples, cfg: TrainConfig,
                     model_cfg: ModelConfig | None = None):
    """Train the original-domain classifier that later acts as the teacher.

    Returns (frozen params, TrainReport). The original-class order is
    ascending class id; the head index of class c is its rank in that
    order.
    """
    if not original_samples:
        raise ContractViolation("original split is empty")
    if any(s.modality != PHOTO for s in original_samples):
        raise ContractViolation("original split must contain photos only")
    classes = sorted({s.class_id for s in original_samples})
    if model_cfg is None:
        model_cfg = ModelConfig(num_original_classes=len(classes))
    if model_cfg.num_original_classes != len(classes):
        raise ContractViolation(
            f"model expects {model_cfg.num_original_classes} original "
            f"classes, split has {len(classes)}")
    label_of = _class_index(classes)

    started = time.perf_counter()
    params = init_params(model_cfg, cfg.seed)
    leaves = list(params.params.values())
    steps_per_epoch = len(original_samples) // cfg.batch_size
    state = cfg.optimizer_state(cfg.epochs * max(1, steps_per_epoch))
    exempt = params.bias_names()

    def step(batch: Batch) -> dict:
        x = embed_batch(params, batch.images, batch.domains)
        loss = cross_entropy(original_logits(params, x), batch.labels)
        params.zero_grads()
        backward(loss, leaves)
        adam_step(params.params, {n: p.grad for n, p in params.params.items()},
                  state, decay_exempt=exempt)
        return {"total": float(loss.data)}

    history = _run_epochs(original_samples, cfg, label_of, step,
                          seed_tag=0x707265)
    accuracy = original_accuracy(params, original_samples, classes)
    if accuracy < _PRETRAIN_ACCURACY_FLOOR:
        raise TrainingDivergence(
            f"teacher reached only {accuracy:.1%} training accuracy "
            f"(floor {_PRETRAIN_ACCURACY_FLOOR:.0%}); configuration is off")
    for p in params.params.values():
        p.requires_grad = False
    report = TrainReport(cfg.seed, asdict(cfg), history, accuracy,
                         time.perf_counter() - started)
    return params, report


def finetune_sake(source_samples, teacher: ModelParams, A,
                  cfg: TrainConfig):
    """Distillation fine-tune on the source split; returns (student, report).

    The student copies the teacher's backbone and original head and gets
    a fresh benchmark head; labels index rows of A (source-class order).
    """
    if not source_samples:
        raise ContractViolation("source split is empty")
    split_classes = {s.class_id for s in source_samples}
    if not split_classes <= set(A.source_classes):
        missing = sorted(split_classes - set(A.source_classes))
        raise ContractViolation(
            f"similarity matrix lacks source classes {missing}")
    label_of = _class_index(A.source_classes)

    started = time.perf_counter()
    student_cfg = ModelConfig(
        input_size=teacher.config.input_size,
        channels=teacher.config.channels,
        reduction=teacher.config.reduction,
        embed_dim=teacher.config.embed_dim,
        num_source_classes=len(A.source_classes),
        num_original_classes=teacher.config.num_original_classes,
        domain_code_width=teacher.config.domain_code_width,
    )
    student = init_params(student_cfg, cfg.seed)
    for name in student.backbone_names() + student.original_head_names():
        student.params[name].data = teacher.params[name].data.copy()

    leaves = list(student.params.values())
    steps_per_epoch = len(source_samples) // cfg.batch_size
    state = cfg.optimizer_state(cfg.epochs * max(1, steps_per_epoch))
    exempt = student.bias_names()

    def step(batch: Batch) -> dict:
        loss, breakdown = total_loss(batch, student, teacher, A, cfg.loss)
        student.zero_grads()
        backward(loss, leaves)
        adam_step(student.params,
                  {n: p.grad for n, p in student.params.items()},
                  state, decay_exempt=exempt)
        return breakdown

    history = _run_epochs(source_samples, cfg, label_of, step,
                          seed_tag=0x747261)
    accuracy = benchmark_accuracy(student, source_samples, A.source_classes)
    report = TrainReport(cfg.seed, asdict(cfg), history, accuracy,
                         time.perf_counter() - started)
    return student, report


def probe_split(samples, seed: int, train_fraction: float = 0.8):
    """Deterministic stratified train/eval index split over photos."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x70726f62]))
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.class_id, []).append(i)
    train_idx, eval_idx = [], []
    for cid in sorted(by_class):
        idx = np.array(by_class[cid])
        idx = idx[rng.permutation(len(idx))]
        cut = max(1, int(round(train_fraction * len(idx))))
        cut = min(cut, len(idx) - 1) if len(idx) > 1 else cut
        train_idx.extend(idx[:cut])
        eval_idx.extend(idx[cut:])
    return np.array(train_idx), np.array(eval_idx)


def linear_probe(params: ModelParams, original_samples,
                 cfg: TrainConfig | None = None) -> float:
    """Held-out top-1 accuracy of a fresh linear head on frozen embeddings.

    Trains only the head (10 epochs, same optimizer defaults) on an 80/20
    stratified split of the original-domain photos.
    """
    if not original_samples:
        raise ContractViolation("original split is empty")
    photos = [s for s in original_samples if s.modality == PHOTO]
    if not photos:
        raise ContractViolation("probe needs photos")
    if cfg is None:
        # the head needs the rate to stay warm through all 10 epochs;
        # decaying to the fine-tune floor leaves it visibly unconverged
        cfg = TrainConfig(epochs=10, lr_final=3e-3)
    classes = sorted({s.class_id for s in photos})
    label_of = _class_index(classes)

    feats = embed_samples(params, photos)
    labels = np.array([label_of[s.class_id] for s in photos])
    train_idx, eval_idx = probe_split(photos, cfg.seed)

    m, k = feats.shape[1], len(classes)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x686470]))
    w = Tensor((rng.standard_normal((m, k)) * np.sqrt(2.0 / m)).astype(
        feats.dtype), requires_grad=True)
    b = Tensor(np.zeros(k, dtype=feats.dtype), requires_grad=True)
    head = {"w": w, "b": b}

    probe_epochs = 10
    steps_per_epoch = max(1, len(train_idx) // cfg.batch_size)
    state = cfg.optimizer_state(probe_epochs * steps_per_epoch)
    for _ in range(probe_epochs):
        order = rng.permutation(len(train_idx))
        for step in range(steps_per_epoch):
            rows = train_idx[order[step * cfg.batch_size:
                                   (step + 1) * cfg.batch_size]]
            if len(rows) == 0:
                continue
            logits = matmul(Tensor(feats[rows]), w) + b
            loss = cross_entropy(logits, labels[rows])
            w.zero_grad()
            b.zero_grad()
            backward(loss, [w, b])
            adam_step(head, {"w": w.grad, "b": b.grad}, state,
                      decay_exempt=frozenset({"b"}))
    preds = (feats[eval_idx] @ w.data + b.data).argmax(axis=1)
    return float((preds == labels[eval_idx]).mean())
