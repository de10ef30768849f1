"""Command-line entry points: gen-data, train, eval, ablate."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import config as config_mod
from .config import CONFIG_KEYS, RunConfig, build_run_config, config_to_text
from .data import (
    DatasetManifest,
    generate_synthetic_dataset,
    load_manifest,
    make_split,
    save_manifest,
)
from .evaluation import evaluate, robustness_suite, train_test_gap
from .model import load_checkpoint
from .trainer import build_models, fit

ABLATION_PRESETS = {
    "full": {},
    "fixmatch-rgb-only": {"train.variant": "rgb_only"},
    "fixmatch-tg-only": {"train.variant": "tg_only"},
    "align-only": {"loss.w_clr": "0"},
    "contrast-only": {"loss.w_kd": "0"},
}

# friendly grid axis names -> config keys; every other axis must be a raw key
GRID_AXES = {
    "alignment_kind": "loss.alignment_kind",
    "aligned_blocks": "loss.aligned_blocks",
    "tau": "loss.tau",
    "tg_stride": "clip.tg_stride",
    "pseudo_label_metric": "loss.pseudo_label_metric",
    "stopgrad": "loss.stop_gradient",
}

TRICK_LEVELS = ("plain", "lr_warmup", "sup_warmup", "precise_bn")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config overrides (value strings, same as the file format)")
    for key in sorted(CONFIG_KEYS):
        group.add_argument(f"--{key}", dest=key, metavar="V", default=None,
                           help=f"override config key {key}")


def _collect_flag_overrides(args: argparse.Namespace) -> dict[str, str]:
    return {key: getattr(args, key) for key in CONFIG_KEYS
            if getattr(args, key, None) is not None}


def _load_run_config(args: argparse.Namespace) -> RunConfig:
    file_text = Path(args.config).read_text() if getattr(args, "config", None) else None
    overrides = _collect_flag_overrides(args)
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if getattr(args, "ablation", None):
        preset = ABLATION_PRESETS[args.ablation]
        overrides = {**preset, **overrides}
    return build_run_config(file_text, overrides)


def _split_manifest(run: RunConfig) -> DatasetManifest:
    manifest = load_manifest(run.data.train_manifest)
    if manifest.labeled_ids:
        return manifest
    if run.data.labeled_per_class > 0:
        return make_split(manifest, per_class_count=run.data.labeled_per_class,
                          balanced=run.data.balanced, seed=run.seed)
    return make_split(manifest, labeled_ratio=run.data.labeled_ratio,
                      balanced=run.data.balanced, seed=run.seed)


def cmd_gen_data(args: argparse.Namespace) -> int:
    train, test = generate_synthetic_dataset(
        args.out, classes=args.classes, per_class=args.per_class,
        test_per_class=args.test_per_class, num_frames=args.frames,
        height=args.height, width=args.width, seed=args.seed)
    print(f"wrote {len(train.entries)} train + {len(test.entries)} test videos "
          f"({train.num_classes} classes) under {args.out}")
    print(f"manifests: {Path(args.out) / 'train_manifest.tsv'}, "
          f"{Path(args.out) / 'test_manifest.tsv'}")
    return 0


def _echo_config(run: RunConfig) -> None:
    out_dir = Path(run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config_to_text(run))


def cmd_train(args: argparse.Namespace) -> int:
    run = _load_run_config(args)
    if not run.data.train_manifest:
        raise ValueError("data.train_manifest is required (flag, env, or config file)")
    manifest = _split_manifest(run)
    _echo_config(run)
    labeled_out = Path(run.out_dir) / "labeled_ids.txt"
    labeled_out.write_text("\n".join(sorted(manifest.labeled_ids)) + "\n")
    eval_manifest = load_manifest(run.data.test_manifest) if run.data.test_manifest else None
    result = fit(run, manifest, eval_manifest)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics log: {result.metrics_path}")
    if result.final_eval:
        print(f"final eval: top1={result.final_eval['top1']:.4f} "
              f"top5={result.final_eval['top5']:.4f}")
    return 0


def _restore_models(run: RunConfig, checkpoint: str, num_classes: int):
    blob_head = load_checkpoint_header(checkpoint)
    variant = blob_head.get("extra_config", {}).get("variant", "full")
    models = build_models(run.backbone_for(num_classes), variant)
    load_checkpoint(checkpoint, models)
    return models, variant


def load_checkpoint_header(path: str) -> dict:
    import torch

    return torch.load(path, map_location="cpu", weights_only=False)


def cmd_eval(args: argparse.Namespace) -> int:
    run = _load_run_config(args)
    manifest = load_manifest(args.manifest or run.data.test_manifest)
    models, variant = _restore_models(run, args.checkpoint, manifest.num_classes)
    name = "tg" if variant == "tg_only" else "rgb"
    model, modality = models[name], name
    report_lines = []
    records = []
    if args.gap:
        train_manifest = load_manifest(run.data.train_manifest)
        gap = train_test_gap(model, train_manifest, manifest, run.eval, run.clip,
                             modality=modality)
        report_lines.append(
            f"train {gap['train_top1']:.4f}  test {gap['test_top1']:.4f}  gap {gap['gap']:.4f}")
        records.append({"kind": "gap", **gap})
    elif args.robustness:
        kinds = tuple(k.strip() for k in args.robustness.split(",") if k.strip())
        rows = robustness_suite(model, manifest, run.eval, run.clip, kinds, seed=run.seed)
        report_lines.append(f"{'corruption':<18}{'top1':>8}{'top5':>8}{'drop':>8}")
        for row in rows:
            report_lines.append(f"{row['corruption']:<18}{row['top1']:>8.4f}"
                                f"{row['top5']:>8.4f}{row['drop']:>8.4f}")
            records.append({"kind": "robustness", **row})
    else:
        result = evaluate(model, manifest, run.eval, run.clip, modality=modality)
        report_lines.append(f"top1 {result['top1']:.4f}  top5 {result['top5']:.4f} "
                            f"({result['num_videos']} videos)")
        records.append({"kind": "eval", **result})
    report = "\n".join(report_lines)
    print(report)
    out_dir = Path(run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "eval_report.txt").write_text(report + "\n")
    with open(out_dir / "eval_records.jsonl", "w") as f:
        for record in records:
            f.write(json.dumps(record) + "\n")
    return 0


def _parse_axis(spec: str) -> tuple[str, list[str]]:
    if "=" not in spec:
        raise ValueError(f"axis must look like key=v1,v2 got {spec!r}")
    key, values = spec.split("=", 1)
    key = key.strip()
    vals = [v.strip() for v in values.split(",") if v.strip()]
    if not vals:
        raise ValueError(f"axis {key!r} has no values")
    if key == "tricks":
        bad = [v for v in vals if v not in TRICK_LEVELS]
        if bad:
            raise ValueError(f"unknown trick levels {bad}; choose from {TRICK_LEVELS}")
        return key, vals
    config_key = GRID_AXES.get(key, key)
    if config_key not in CONFIG_KEYS:
        raise ValueError(f"unknown grid axis {key!r}")
    return config_key, vals


def _axis_overrides(key: str, value: str, run: RunConfig) -> dict[str, str]:
    if key == "tricks":
        level = TRICK_LEVELS.index(value)
        return {
            "train.lr_warmup_epochs": str(run.train.lr_warmup_epochs if level >= 1 else 0),
            "train.supervised_warmup_epochs":
                str(run.train.supervised_warmup_epochs if level >= 2 else 0),
            "train.precise_bn_batches": str(run.train.precise_bn_batches if level >= 3 else 0),
        }
    if key == "loss.stop_gradient":
        value = {"on": "true", "off": "false"}.get(value, value)
    if key == "loss.aligned_blocks" and "," not in value:
        value = ",".join(value)  # "34" -> "3,4"
    return {key: value}


def cmd_ablate(args: argparse.Namespace) -> int:
    run = _load_run_config(args)
    axes = [_parse_axis(spec) for spec in args.axis]
    if not axes:
        raise ValueError("empty grid: give at least one --axis key=v1,v2")
    grid: list[list[tuple[str, str]]] = [[]]
    for key, values in axes:
        grid = [combo + [(key, v)] for combo in grid for v in values]
    manifest = _split_manifest(run)
    eval_manifest = load_manifest(run.data.test_manifest) if run.data.test_manifest else None
    base_out = Path(run.out_dir)
    rows = []
    for combo in grid:
        tag = "__".join(f"{k.split('.')[-1]}-{v}" for k, v in combo) or "single"
        overrides: dict[str, str] = {}
        for key, value in combo:
            overrides.update(_axis_overrides(key, value, run))
        sub = config_mod.apply_overrides(run, overrides)
        sub = replace(sub, out_dir=str(base_out / tag))
        _echo_config(sub)
        result = fit(sub, manifest, eval_manifest)
        final = result.final_eval or {}
        rows.append({"run": tag, "top1": final.get("top1"), "top5": final.get("top5"),
                     **dict(combo)})
    header = f"{'run':<40}{'top1':>8}{'top5':>8}"
    lines = [header]
    for row in rows:
        top1 = f"{row['top1']:.4f}" if row["top1"] is not None else "-"
        top5 = f"{row['top5']:.4f}" if row["top5"] is not None else "-"
        lines.append(f"{row['run']:<40}{top1:>8}{top5:>8}")
    table = "\n".join(lines)
    print(table)
    base_out.mkdir(parents=True, exist_ok=True)
    (base_out / "summary.tsv").write_text(
        "\n".join("\t".join(str(v) for v in row.values()) for row in rows) + "\n")
    (base_out / "summary.txt").write_text(table + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tgdistill",
        description="Semi-supervised action recognition with a temporal-gradient teacher")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen-data", help="render the synthetic moving-shapes dataset")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--classes", type=int, default=16)
    p_gen.add_argument("--per-class", type=int, default=20)
    p_gen.add_argument("--test-per-class", type=int, default=5)
    p_gen.add_argument("--frames", type=int, default=24)
    p_gen.add_argument("--height", type=int, default=48)
    p_gen.add_argument("--width", type=int, default=56)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.set_defaults(func=cmd_gen_data)

    p_train = sub.add_parser("train", help="train models per the run config")
    p_train.add_argument("--config", help="config file of 'key = value' lines")
    p_train.add_argument("--out", help="output directory (alias for --out_dir)")
    p_train.add_argument("--ablation", choices=sorted(ABLATION_PRESETS),
                         help="named variant preset")
    _add_config_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--manifest", help="evaluation manifest (default: data.test_manifest)")
    p_eval.add_argument("--config")
    p_eval.add_argument("--out")
    p_eval.add_argument("--robustness", help="comma-separated corruption kinds")
    p_eval.add_argument("--gap", action="store_true", help="report train/test accuracy gap")
    _add_config_flags(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_ablate = sub.add_parser("ablate", help="run a config grid and summarize")
    p_ablate.add_argument("--config")
    p_ablate.add_argument("--out")
    p_ablate.add_argument("--axis", action="append", default=[],
                          metavar="KEY=V1,V2", help="grid axis; repeatable")
    _add_config_flags(p_ablate)
    p_ablate.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
