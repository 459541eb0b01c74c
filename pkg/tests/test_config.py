"""Run configuration: defaults, precedence, parsing, typed builders."""

import json

import pytest

from sake.config import DEFAULTS, RunConfig, load_run_config
from sake.errors import ContractViolation


def test_defaults_resolve_without_input():
    cfg = load_run_config()
    assert cfg["pretrain.epochs"] == 120
    assert cfg["train.epochs"] == 20
    assert cfg["itq.bits"] == 64
    assert cfg["eval.ks"] == [50, 100]
    assert cfg.to_dict() == {k: DEFAULTS[k] for k in sorted(DEFAULTS)}


def test_flag_overrides_beat_file_values(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"train.epochs": 7, "seed": 5}))
    cfg = load_run_config(path, overrides=["train.epochs=3"])
    assert cfg["train.epochs"] == 3   # the flag wins
    assert cfg["seed"] == 5           # the file beats the default
    assert cfg["train.batch_size"] == 40


def test_set_values_parse_as_json_with_string_fallback():
    cfg = load_run_config(overrides=[
        "train.epochs=5",
        "train.lr_initial=0.02",
        "loss.apply_sake_to_sketches=false",
        "eval.ks=[10, 20]",
        "eval.metric=hamming",
    ])
    assert cfg["train.epochs"] == 5
    assert cfg["train.lr_initial"] == 0.02
    assert cfg["loss.apply_sake_to_sketches"] is False
    assert cfg["eval.ks"] == [10, 20]
    assert cfg["eval.metric"] == "hamming"  # bare word falls back to str


def test_malformed_inputs_raise(tmp_path):
    with pytest.raises(ContractViolation):
        load_run_config(overrides=["train.epochs"])  # no '='
    with pytest.raises(ContractViolation):
        load_run_config(overrides=["no.such.key=1"])
    with pytest.raises(ContractViolation):
        load_run_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ContractViolation):
        load_run_config(bad)
    arr = tmp_path / "arr.json"
    arr.write_text("[1, 2]")
    with pytest.raises(ContractViolation):
        load_run_config(arr)
    with pytest.raises(ContractViolation):
        RunConfig({"bogus": 1})


def test_stage_seed_falls_back_to_global_seed():
    cfg = load_run_config(overrides=["seed=9"])
    assert cfg.seed_for("pretrain") == 9
    assert cfg.seed_for("train") == 9
    assert cfg.seed_for("split") == 9
    cfg = load_run_config(overrides=["seed=9", "train.seed=2"])
    assert cfg.seed_for("train") == 2
    assert cfg.seed_for("pretrain") == 9


def test_split_spec_requires_all_three_class_lists_or_none():
    cfg = load_run_config(overrides=["split.original_classes=[0,1]"])
    with pytest.raises(ContractViolation):
        cfg.split_spec()
    cfg = load_run_config(overrides=[
        "split.original_classes=[0,1]",
        "split.source_classes=[0,1]",
        "split.target_classes=[2,3,4]",
    ])
    spec = cfg.split_spec()
    assert spec.original_classes == (0, 1)
    assert spec.target_classes == (2, 3, 4)


def test_default_split_spec_is_seedable():
    a = load_run_config().split_spec()
    b = load_run_config().split_spec()
    assert a == b
    assert len(a.original_classes) == 20
    assert len(a.source_classes) == 10
    assert len(a.target_classes) == 6


def test_typed_builders_carry_values_through():
    cfg = load_run_config(overrides=[
        "train.epochs=4", "loss.lambda2=0.7", "augment.max_shift=1",
        "model.channels=[4, 8]", "model.reduction=4", "model.embed_dim=16",
    ])
    tc = cfg.train_config("train")
    assert tc.epochs == 4
    assert tc.loss.lambda2 == 0.7
    assert tc.augment.max_shift == 1
    mc = cfg.model_config(num_source=10, num_original=20)
    assert mc.channels == (4, 8)
    assert mc.embed_dim == 16
    assert mc.num_source_classes == 10
    with pytest.raises(ContractViolation):
        cfg.train_config("probe")
