"""Command-line pipeline: generate, pretrain, train, probe, hash, eval,
analyze, sweep.

Every command is a pure function of (config, input files, seed); outputs
embed the resolved config and tool version. Exit codes: 0 success,
2 user/config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .config import RunConfig, load_run_config
from .data import (generate_dataset, load_dataset, validate_dataset,
                   write_dataset)
from .errors import (ContractViolation, NumericError, TaxonomyParseError,
                     TrainingDivergence)
from .figures import loss_curves, per_class_ap_bars, sweep_curve, tercile_bars
from .hashing import encode_many, itq_fit, load_codec, save_codec, save_codes
from .model import embed_samples, load_checkpoint, save_checkpoint
from .retrieval import (analyze_improvement_groups, evaluate,
                        export_embeddings_csv, format_analysis, format_report,
                        teacher_confidences)
from .taxonomy import (build_similarity_matrix, builtin_class_map_path,
                       builtin_taxonomy_path, load_class_map, load_taxonomy,
                       nearest_original_lch)
from .train import (TrainConfig, finetune_sake, linear_probe,
                    pretrain_teacher)


def _write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _echo(cfg: RunConfig) -> dict:
    return {"version": __version__, "config": cfg.to_dict()}


def _load_taxonomy(cfg: RunConfig):
    tax_path = cfg["taxonomy.file"] or builtin_taxonomy_path()
    map_path = cfg["taxonomy.class_map"] or builtin_class_map_path()
    tax = load_taxonomy(tax_path)
    return tax, load_class_map(map_path, tax)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_train_outputs(cfg, out: Path, stem: str, params, report) -> None:
    save_checkpoint(params, out / f"{stem}.ckpt")
    payload = _echo(cfg)
    payload["report"] = report.to_dict()
    _write_json(out / f"{stem}_report.json", payload)
    (out / f"{stem}_report.timing.json").write_text(json.dumps(
        {"wall_clock_seconds": report.wall_clock_seconds}, indent=2) + "\n")
    loss_curves(report.epoch_losses, out / f"{stem}_loss.png")


def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    tax, class_nodes = _load_taxonomy(cfg)
    spec = cfg.split_spec()
    ds = generate_dataset(spec, tax, class_nodes)
    write_dataset(ds, out)
    summary = validate_dataset(out)
    print(f"dataset written to {out}")
    for name, count in summary.items():
        print(f"  {name}: {count} samples")
    return 0


def cmd_pretrain(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    ds = load_dataset(args.data)
    model_cfg = cfg.model_config(len(ds.spec.source_classes),
                                 len(ds.spec.original_classes))
    teacher, report = pretrain_teacher(ds.original_train,
                                       cfg.train_config("pretrain"), model_cfg)
    _save_train_outputs(cfg, out, "teacher", teacher, report)
    print(f"teacher -> {out / 'teacher.ckpt'} "
          f"(train accuracy {report.final_train_accuracy:.1%})")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    teacher_path = Path(args.teacher)
    if not teacher_path.exists():
        raise ContractViolation(f"teacher checkpoint not found: {teacher_path}")
    teacher = load_checkpoint(teacher_path)
    ds = load_dataset(args.data)
    tax, class_nodes = _load_taxonomy(cfg)
    A = build_similarity_matrix(tax, class_nodes,
                                sorted(ds.spec.source_classes),
                                sorted(ds.spec.original_classes))
    student, report = finetune_sake(ds.source_train, teacher, A,
                                    cfg.train_config("train"))
    _save_train_outputs(cfg, out, "student", student, report)
    print(f"student -> {out / 'student.ckpt'} "
          f"(source train accuracy {report.final_train_accuracy:.1%})")
    return 0


def cmd_probe(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    params = load_checkpoint(args.model)
    ds = load_dataset(args.data)
    # the probe protocol is pinned (10 epochs, warm lr floor) so probe
    # numbers stay comparable across models; only seed and batch size
    # flow in from the run config
    probe_cfg = TrainConfig(epochs=10, lr_final=3e-3,
                            batch_size=int(cfg["train.batch_size"]),
                            seed=cfg.seed_for("train"))
    accuracy = linear_probe(params, ds.original_train, probe_cfg)
    payload = _echo(cfg)
    payload["accuracy"] = accuracy
    payload["model"] = str(args.model)
    _write_json(out / "probe_report.json", payload)
    print(f"probe accuracy: {accuracy:.2%}")
    return 0


def cmd_hash(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    params = load_checkpoint(args.model)
    ds = load_dataset(args.data)
    feats = embed_samples(params, ds.source_train)
    bits = int(args.bits if args.bits is not None else cfg["itq.bits"])
    codec = itq_fit(feats, bits, iterations=int(cfg["itq.iterations"]),
                    seed=int(cfg["seed"]))
    save_codec(codec, out / "codec.itq")
    save_codes(encode_many(codec, embed_samples(params, ds.target_gallery)),
               out / "gallery.codes")
    save_codes(encode_many(codec, embed_samples(params, ds.target_queries)),
               out / "queries.codes")
    payload = _echo(cfg)
    payload["code_length"] = codec.code_length
    payload["iterations"] = codec.iterations
    payload["quantization_loss"] = codec.losses
    _write_json(out / "hash_report.json", payload)
    print(f"codec (c={codec.code_length}) -> {out / 'codec.itq'}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    params = load_checkpoint(args.model)
    ds = load_dataset(args.data)
    metric = args.metric or cfg["eval.metric"]
    codec = None
    if metric == "hamming":
        if not args.codec:
            raise ContractViolation("--metric hamming requires --codec")
        codec = load_codec(args.codec)
    if args.k:
        try:
            ks = tuple(int(k) for k in args.k.split(","))
        except ValueError:
            raise ContractViolation(f"bad --k list: '{args.k}'") from None
    else:
        ks = tuple(int(k) for k in cfg["eval.ks"])

    if args.queries == "photo":
        queries, exclude_self = ds.target_gallery, True
    else:
        queries, exclude_self = ds.target_queries, False
    report = evaluate(queries, ds.target_gallery, params, metric=metric,
                      ks=ks, codec=codec,
                      target_classes=ds.spec.target_classes,
                      exclude_self=exclude_self)
    payload = _echo(cfg)
    payload["report"] = report.to_dict()
    payload["queries"] = args.queries
    _write_json(out / "eval_report.json", payload)
    (out / "eval_report.txt").write_text(
        format_report(report, ds.class_nodes))
    per_class_ap_bars(report.per_class_ap, out / "per_class_ap.png",
                      ds.class_nodes)
    both = list(queries) + list(ds.target_gallery)
    export_embeddings_csv(out / "embeddings.csv", both,
                          embed_samples(params, both))
    print(format_report(report, ds.class_nodes), end="")
    return 0


def cmd_analyze(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    teacher = load_checkpoint(args.teacher)
    ds = load_dataset(args.data)
    tax, class_nodes = _load_taxonomy(cfg)

    def per_class(path) -> dict[int, float]:
        data = json.loads(Path(path).read_text())
        table = data.get("report", data).get("per_class_ap")
        if not table:
            raise ContractViolation(f"{path}: no per-class AP table")
        return {int(c): float(v) for c, v in table.items()}

    base = per_class(args.eval_base)
    sake = per_class(args.eval_sake)
    if set(base) != set(sake):
        raise ContractViolation("eval reports cover different class sets")
    deltas = {c: sake[c] - base[c] for c in base}
    confidences = teacher_confidences(teacher, ds.target_gallery)
    lch = nearest_original_lch(tax, class_nodes, sorted(base),
                               sorted(ds.spec.original_classes))
    analysis = analyze_improvement_groups(deltas, confidences, lch)
    payload = _echo(cfg)
    payload["analysis"] = analysis
    _write_json(out / "analysis.json", payload)
    (out / "analysis.txt").write_text(format_analysis(analysis))
    tercile_bars(analysis, out / "tercile.png")
    print(format_analysis(analysis), end="")
    return 0


def cmd_sweep(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    teacher = load_checkpoint(args.teacher)
    ds = load_dataset(args.data)
    tax, class_nodes = _load_taxonomy(cfg)
    A = build_similarity_matrix(tax, class_nodes,
                                sorted(ds.spec.source_classes),
                                sorted(ds.spec.original_classes))
    try:
        values = [json.loads(v) for v in args.values.split(",")]
    except json.JSONDecodeError:
        raise ContractViolation(f"bad --values list: '{args.values}'") from None

    rows = []
    for value in values:
        run_cfg = RunConfig({**cfg.values, args.param: value})
        student, _ = finetune_sake(ds.source_train, teacher, A,
                                   run_cfg.train_config("train"))
        report = evaluate(ds.target_queries, ds.target_gallery, student,
                          ks=tuple(int(k) for k in cfg["eval.ks"]),
                          target_classes=ds.spec.target_classes)
        rows.append({"value": value, "map_all": report.map_all})
        print(f"{args.param}={value}: mAP@all={report.map_all:.4f}")
    payload = _echo(cfg)
    payload["param"] = args.param
    payload["rows"] = rows
    _write_json(out / "sweep.json", payload)
    sweep_curve([r["value"] for r in rows], [r["map_all"] for r in rows],
                args.param, out / "sweep.png")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sake",
        description="zero-shot sketch/photo retrieval laboratory")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON config with dotted keys")
        p.add_argument("--set", action="append", dest="overrides",
                       metavar="KEY=VALUE", help="config override (flags win)")
        p.add_argument("--out", required=True, help="output directory")
        if data:
            p.add_argument("--data", required=True, help="dataset directory")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(p, data=False)

    p = sub.add_parser("pretrain", help="train the original-domain teacher")
    common(p)

    p = sub.add_parser("train", help="distillation fine-tune on the source set")
    common(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--lambda-sake", type=float, default=None,
                   help="override loss.lambda_sake")

    p = sub.add_parser("probe", help="linear probe of original-domain recall")
    common(p)
    p.add_argument("--model", required=True, help="checkpoint to probe")

    p = sub.add_parser("hash", help="fit an ITQ codec on training features")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--bits", type=int, default=None, help="code length")

    p = sub.add_parser("eval", help="retrieval metrics on the target split")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--codec", default=None, help="ITQ codec file")
    p.add_argument("--metric", choices=("cosine", "hamming"), default=None)
    p.add_argument("--k", default=None, help="comma-separated K list")
    p.add_argument("--queries", choices=("sketch", "photo"), default="sketch",
                   help="sketch: ZS-SBIR; photo: ZS-PBIR (self-excluded)")

    p = sub.add_parser("analyze", help="improvement terciles vs teacher signal")
    common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--eval-base", required=True,
                   help="eval report JSON of the baseline model")
    p.add_argument("--eval-sake", required=True,
                   help="eval report JSON of the distilled model")

    p = sub.add_parser("sweep", help="re-train across one config knob")
    common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--param", required=True, help="dotted config key")
    p.add_argument("--values", required=True, help="comma-separated values")
    return parser


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "probe": cmd_probe,
    "hash": cmd_hash,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        overrides = list(args.overrides or [])
        if getattr(args, "lambda_sake", None) is not None:
            overrides.append(f"loss.lambda_sake={args.lambda_sake}")
        cfg = load_run_config(args.config, overrides)
        return _COMMANDS[args.command](cfg, args)
    except (ContractViolation, TaxonomyParseError, KeyError,
            FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (TrainingDivergence, NumericError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
