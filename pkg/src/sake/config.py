"""Run configuration: flat dotted-key JSON files with flag overrides.

A config file maps dotted keys to JSON values ({"train.epochs": 5});
command-line --set overrides win over the file, which wins over the
defaults. One top-level seed drives every stage unless a stage seed
(split.seed, pretrain.seed, train.seed) is set explicitly. The resolved
mapping is echoed verbatim into every output for provenance.
"""

from __future__ import annotations

import json
from pathlib import Path

from .data import AugmentConfig, SplitSpec, default_split
from .errors import ContractViolation
from .losses import LossConfig
from .model import ModelConfig
from .train import TrainConfig

DEFAULTS: dict = {
    "seed": 0,
    "model.input_size": 32,
    "model.channels": [8, 16, 32],
    "model.reduction": 8,
    "model.embed_dim": 64,
    "model.domain_code_width": 1,
    "pretrain.epochs": 120,
    "pretrain.batch_size": 40,
    "pretrain.lr_initial": 1e-2,
    "pretrain.lr_final": 2e-3,
    "pretrain.weight_decay": 3e-3,
    "pretrain.seed": None,
    "train.epochs": 20,
    "train.batch_size": 40,
    "train.lr_initial": 1e-2,
    "train.lr_final": 1e-3,
    "train.weight_decay": 5e-4,
    "train.seed": None,
    "loss.lambda_sake": 1.0,
    "loss.lambda1": 1.0,
    "loss.lambda2": 0.3,
    "loss.apply_sake_to_sketches": True,
    "augment.max_shift": 2,
    "augment.flip_prob": 0.5,
    "augment.noise_sigma": 0.02,
    "split.original_classes": None,
    "split.source_classes": None,
    "split.target_classes": None,
    "split.original_photos_per_class": 60,
    "split.source_photos_per_class": 60,
    "split.source_sketches_per_class": 30,
    "split.gallery_photos_per_class": 50,
    "split.query_sketches_per_class": 20,
    "split.seed": None,
    "itq.bits": 64,
    "itq.iterations": 50,
    "eval.ks": [50, 100],
    "eval.metric": "cosine",
    "taxonomy.file": None,
    "taxonomy.class_map": None,
}

_ADAM_SHARED = {"beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8}


class RunConfig:
    """Resolved dotted-key mapping with typed sub-config builders."""

    def __init__(self, values: dict):
        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise ContractViolation(f"unknown config keys: {', '.join(unknown)}")
        self.values = dict(DEFAULTS)
        self.values.update(values)

    def __getitem__(self, key: str):
        return self.values[key]

    def to_dict(self) -> dict:
        return {k: self.values[k] for k in sorted(self.values)}

    def seed_for(self, stage: str) -> int:
        explicit = self.values.get(f"{stage}.seed")
        return int(self.values["seed"] if explicit is None else explicit)

    def split_spec(self) -> SplitSpec:
        seed = self.seed_for("split")
        v = self.values
        if (v["split.original_classes"] is None
                and v["split.source_classes"] is None
                and v["split.target_classes"] is None):
            base = default_split(seed)
            classes = (base.original_classes, base.source_classes,
                       base.target_classes)
        elif None in (v["split.original_classes"], v["split.source_classes"],
                      v["split.target_classes"]):
            raise ContractViolation(
                "set all three of split.{original,source,target}_classes "
                "or none")
        else:
            classes = (tuple(v["split.original_classes"]),
                       tuple(v["split.source_classes"]),
                       tuple(v["split.target_classes"]))
        return SplitSpec(
            *classes,
            original_photos_per_class=v["split.original_photos_per_class"],
            source_photos_per_class=v["split.source_photos_per_class"],
            source_sketches_per_class=v["split.source_sketches_per_class"],
            gallery_photos_per_class=v["split.gallery_photos_per_class"],
            query_sketches_per_class=v["split.query_sketches_per_class"],
            seed=seed)

    def model_config(self, num_source: int, num_original: int) -> ModelConfig:
        v = self.values
        return ModelConfig(
            input_size=v["model.input_size"],
            channels=tuple(v["model.channels"]),
            reduction=v["model.reduction"],
            embed_dim=v["model.embed_dim"],
            num_source_classes=num_source,
            num_original_classes=num_original,
            domain_code_width=v["model.domain_code_width"])

    def loss_config(self) -> LossConfig:
        v = self.values
        return LossConfig(
            lambda_sake=float(v["loss.lambda_sake"]),
            lambda1=float(v["loss.lambda1"]),
            lambda2=float(v["loss.lambda2"]),
            apply_sake_to_sketches=bool(v["loss.apply_sake_to_sketches"]))

    def augment_config(self) -> AugmentConfig:
        v = self.values
        return AugmentConfig(max_shift=int(v["augment.max_shift"]),
                             flip_prob=float(v["augment.flip_prob"]),
                             noise_sigma=float(v["augment.noise_sigma"]))

    def train_config(self, stage: str) -> TrainConfig:
        if stage not in ("pretrain", "train"):
            raise ContractViolation(f"unknown training stage '{stage}'")
        v = self.values
        return TrainConfig(
            epochs=int(v[f"{stage}.epochs"]),
            batch_size=int(v[f"{stage}.batch_size"]),
            lr_initial=float(v[f"{stage}.lr_initial"]),
            lr_final=float(v[f"{stage}.lr_final"]),
            weight_decay=float(v[f"{stage}.weight_decay"]),
            seed=self.seed_for(stage),
            loss=self.loss_config(),
            augment=self.augment_config(),
            **_ADAM_SHARED)


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_run_config(config_path=None, overrides=None) -> RunConfig:
    """File values, then --set overrides (flags win)."""
    values: dict = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ContractViolation(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise ContractViolation(f"{path}: invalid JSON ({err})") from None
        if not isinstance(loaded, dict):
            raise ContractViolation(f"{path}: config must be a JSON object")
        values.update(loaded)
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ContractViolation(f"--set needs key=value, got '{item}'")
        values[key.strip()] = _parse_value(raw)
    return RunConfig(values)
