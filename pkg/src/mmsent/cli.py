"""Command-line entry point: synth | train | eval | ablate | export-attention.

Exit codes are stable for scripting: 0 success, 1 usage error (bad flags,
missing paths, invalid config), 2 runtime failure. Every training run writes
``resolved_config.json`` with all defaults actually used, which is enough to
reproduce the run bit-exactly.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .data import (
    DataError,
    Dataset,
    export_attention,
    load_embeddings,
    load_manifest,
    synth_generate,
)
from .metrics import MetricsError
from .tensor import TensorError
from .training import (
    TrainConfig,
    TrainingError,
    build_embedding,
    load_checkpoint,
    run_ablation,
    save_checkpoint,
    train,
    write_ablation_csv,
    write_curves,
)

logger = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); keep codes stable
        raise UsageError(message)


# flag name -> TrainConfig field for the override set shared by train/ablate
_CONFIG_FLAGS = {
    "lr": "learning_rate",
    "batch_size": "batch_size",
    "epochs": "epochs",
    "dropout": "dropout",
    "seed": "seed",
    "folds": "fold_count",
    "ablation": "ablation",
    "channels": "channels",
    "embed_width": "embed_width",
    "hidden_width": "hidden_width",
    "fused_width": "fused_width",
    "reduction": "reduction",
    "max_tokens": "max_tokens",
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with TrainConfig keys")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--ablation", choices=["none", "no_sa_ca", "no_smatt", "no_satt"])
    p.add_argument("--channels", type=int)
    p.add_argument("--embed-width", type=int)
    p.add_argument("--hidden-width", type=int)
    p.add_argument("--fused-width", type=int)
    p.add_argument("--reduction", type=int)
    p.add_argument("--max-tokens", type=int)
    p.add_argument("--train-embedding", action="store_true", default=None)
    p.add_argument("--freeze-backbone", action="store_true", default=None)


def _build_parser() -> _Parser:
    parser = _Parser(prog="mmsent",
                     description="image-text sentiment model: training, "
                                 "evaluation, ablation and attention export")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic cross-modal dataset")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--per-class", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train with rotated folds")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--embeddings", type=Path, help="pretrained vector file")
    p.add_argument("--force", action="store_true",
                   help="overwrite an existing run directory")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, help="write the report here instead of stdout")

    p = sub.add_parser("ablate", help="train every wiring variant")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", type=str, default="0,1,2",
                   help="comma-separated seeds shared across variants")
    p.add_argument("--force", action="store_true")
    _add_config_flags(p)

    p = sub.add_parser("export-attention", help="dump learned attention weights")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _resolve_config(args: argparse.Namespace, dataset: Dataset) -> TrainConfig:
    values: dict = {}
    if args.config is not None:
        if not args.config.exists():
            raise UsageError(f"config file not found: {args.config}")
        try:
            file_values = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(file_values) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        values.update(file_values)
    for flag, field_name in _CONFIG_FLAGS.items():
        flag_value = getattr(args, flag)
        if flag_value is not None:
            values[field_name] = flag_value
    if args.train_embedding is not None:
        values["train_embedding"] = True
    if args.freeze_backbone is not None:
        values["backbone_trainable"] = False
    if "split" in values:
        values["split"] = tuple(values["split"])
    if "class_count" in values and values["class_count"] != dataset.class_count:
        raise UsageError(
            f"config class_count {values['class_count']} does not match "
            f"the manifest's {dataset.class_count}")
    values["class_count"] = dataset.class_count
    try:
        cfg = TrainConfig(**values)
        cfg.validate()
    except (TypeError, TrainingError, TensorError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    return cfg


def _prepare_run_dir(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(
            f"run directory {out} already exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def _write_resolved_config(out: Path, command: str, cfg: TrainConfig,
                           extra: dict) -> None:
    doc = {"command": command, **extra, "config": asdict(cfg)}
    (out / "resolved_config.json").write_text(json.dumps(doc, indent=1))


def _write_curve_csvs(out: Path, report, fold: int) -> None:
    for kind, curves in (("roc", report.roc_curves), ("prc", report.pr_curves)):
        lines = ["class,threshold,x,y"]
        for c, pts in enumerate(curves):
            if pts is None:
                continue
            for thr, x, y in pts.rows():
                lines.append(f"{c},{thr!r},{x!r},{y!r}")
        (out / f"{kind}_fold{fold}.csv").write_text("\n".join(lines) + "\n")


def _cmd_synth(args) -> int:
    manifest = synth_generate(args.classes, args.per_class, args.seed, args.out)
    print(manifest)
    return 0


def _cmd_train(args) -> int:
    dataset = load_manifest(args.manifest)
    cfg = _resolve_config(args, dataset)
    _prepare_run_dir(args.out, args.force)
    if args.embeddings is not None:
        embedding = load_embeddings(args.embeddings, dataset.vocab)
        embedding.trainable = cfg.train_embedding
        embedding.values.requires_grad = cfg.train_embedding
        if embedding.width != cfg.embed_width:
            raise UsageError(
                f"embedding file width {embedding.width} does not match "
                f"configured embed_width {cfg.embed_width}")
    else:
        embedding = build_embedding(cfg, len(dataset.vocab))
    _write_resolved_config(args.out, "train", cfg, {
        "manifest": str(args.manifest),
        "embeddings": None if args.embeddings is None else str(args.embeddings),
    })
    result = train(dataset, cfg, embedding=embedding)
    folds_doc = []
    for outcome in result.outcomes:
        folds_doc.append({
            "fold": outcome.fold,
            "best_epoch": outcome.best_epoch,
            "best_val_accuracy": outcome.best_val_accuracy,
            **outcome.report.to_dict(),
        })
        write_curves(args.out / f"curves_fold{outcome.fold}.csv", outcome.curve)
        _write_curve_csvs(args.out, outcome.report, outcome.fold)
        save_checkpoint(args.out / f"checkpoint_fold{outcome.fold}",
                        result.models[outcome.fold],
                        {"fold": outcome.fold,
                         "best_epoch": outcome.best_epoch,
                         "best_val_accuracy": outcome.best_val_accuracy})
    metrics_doc = {"folds": folds_doc, "average": result.average,
                   "best_fold": result.best_fold}
    (args.out / "metrics.json").write_text(json.dumps(metrics_doc, indent=1))
    print(json.dumps({"average": result.average, "best_fold": result.best_fold}))
    return 0


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dataset = load_manifest(args.manifest)
    if dataset.class_count != model.config.class_count:
        raise UsageError(
            f"manifest has {dataset.class_count} classes, checkpoint expects "
            f"{model.config.class_count}")
    from .metrics import full_report
    from .training import predict_probs

    probs = predict_probs(model, dataset.samples)
    labels = [s.label for s in dataset.samples]
    report = full_report(labels, probs, dataset.class_count)
    text = json.dumps(report.to_dict(), indent=1)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
    else:
        print(text)
    return 0


def _cmd_ablate(args) -> int:
    dataset = load_manifest(args.manifest)
    cfg = _resolve_config(args, dataset)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"bad --seeds value: {args.seeds!r}") from exc
    if not seeds:
        raise UsageError("--seeds must name at least one seed")
    _prepare_run_dir(args.out, args.force)
    _write_resolved_config(args.out, "ablate", cfg, {
        "manifest": str(args.manifest),
        "seeds": seeds,
    })
    rows, detail = run_ablation(dataset, cfg, seeds)
    write_ablation_csv(args.out / "ablation.csv", rows)
    (args.out / "ablation.json").write_text(json.dumps(
        {"rows": rows, "runs": detail}, indent=1))
    print((args.out / "ablation.csv").read_text(), end="")
    return 0


def _cmd_export_attention(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dataset = load_manifest(args.manifest)
    count = export_attention(model, dataset.samples, dataset.vocab, args.out)
    print(f"wrote {count} records to {args.out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "export-attention": _cmd_export_attention,
}


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, TrainingError, TensorError, MetricsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
