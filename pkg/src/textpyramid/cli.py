"""Command-line entry point: dataset synthesis, training, evaluation,
inference, and the three-variant comparison run.

Every command writes a run manifest into the output directory before any
long computation, and exits 0 on success, 1 on a user error (bad flags,
bad config, missing files), or 2 on an internal failure.
"""

from __future__ import annotations

import argparse
import statistics
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .config import (
    ConfigError,
    apply_schema,
    parse_bool,
    parse_int_tuple,
    read_config_file,
)
from .dataio import (
    MANIFEST_NAME,
    ParseError,
    SceneSpec,
    load_image,
    make_ground_truth,
    read_annotation_file,
    read_manifest,
    write_dataset,
)
from .detector import (
    CHECKPOINT_FORMAT_VERSION,
    CheckpointError,
    ModelConfig,
    load_checkpoint,
)
from .evaluator import (
    ROW_LABELS,
    ROW_ORDER,
    EvalReport,
    ablation_key_values,
    ablation_table,
    evaluate,
)
from .inference import (
    InferenceConfig,
    detect,
    read_detection_file,
    segmentation_map,
    write_detection_file,
)
from .trainer import TrainConfig, epochs_to_iters, load_training_samples, train

__all__ = ["main", "entry", "RunManifest"]


class UserError(Exception):
    """A problem the user can fix: flags, config, or missing files."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2; user errors exit 1
        raise UserError(message)


@dataclass(frozen=True)
class RunManifest:
    command: str
    config_path: str
    seed: int
    out_dir: str


def _write_run_manifest(out_dir: Path, manifest: RunManifest,
                        raw_config: dict[str, str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [
        f"command = {manifest.command}",
        f"config_path = {manifest.config_path}",
        f"seed = {manifest.seed}",
        f"out_dir = {manifest.out_dir}",
        f"package_version = {__version__}",
        f"checkpoint_format_version = {CHECKPOINT_FORMAT_VERSION}",
    ]
    lines += [f"config.{key} = {value}" for key, value in sorted(raw_config.items())]
    (out_dir / "run_manifest.txt").write_text("\n".join(lines) + "\n",
                                              encoding="utf-8")


def _load_config(args) -> dict[str, str]:
    if getattr(args, "config", None) is None:
        return {}
    return read_config_file(args.config)


# ---------------------------------------------------------------------------
# schemas


_SYNTH_SCHEMA = {
    "count": int,
    "image_size": int,
    "noise_sigma": float,
    "ignore_fraction": float,
    "horizontal_min": int, "horizontal_max": int,
    "rotated_min": int, "rotated_max": int,
    "curved_min": int, "curved_max": int,
    "stripe_banks_min": int, "stripe_banks_max": int,
    "discs_min": int, "discs_max": int,
    "seed": int,
}

_MODEL_SCHEMA = {
    "channels": int,
    "tcm": parse_bool,
    "rpn_pos_iou": float,
    "rpn_neg_iou": float,
    "rpn_nms_iou": float,
    "rpn_pre_nms_top_k": int,
    "rpn_post_nms_top_m": int,
}

_TRAIN_SCHEMA = {
    **_MODEL_SCHEMA,
    "dataset": str,
    "lambda_cls": float, "lambda_box": float,
    "lambda_mask": float, "lambda_gts": float,
    "base_lr": float,
    "max_iter": int,
    "epochs": int,
    "poly_power": float,
    "batch_size": int,
    "beta1": float, "beta2": float,
    "weight_decay": float,
    "decoupled_weight_decay": parse_bool,
    "scales": parse_int_tuple,
    "flip_prob": float,
    "seed": int,
    "log_interval": int,
    "checkpoint_interval": int,
    "ignore_in_seg_loss": parse_bool,
    "rpn_sample_size": int, "rpn_pos_fraction": float,
    "rcnn_sample_size": int, "rcnn_pos_fraction": float,
    "rcnn_pos_iou": float,
}

_INFER_SCHEMA = {
    "dataset": str,
    "checkpoint": str,
    "score_threshold": float,
    "mask_threshold": float,
    "nms_iou": float,
    "rescore": parse_bool,
    "polygon_source": str,
}

_EVAL_SCHEMA = {**_INFER_SCHEMA, "match_iou": float, "detections": str}

_ABLATE_SCHEMA = {
    **{k: v for k, v in _TRAIN_SCHEMA.items()
       if k not in ("dataset", "seed", "tcm")},
    **{k: v for k, v in _EVAL_SCHEMA.items()
       if k not in ("dataset", "checkpoint", "rescore")},
    "train_dataset": str,
    "test_dataset": str,
    "seeds": parse_int_tuple,
}


def _scene_specs(cfg: dict, count: int, base_seed: int) -> list[SceneSpec]:
    def pair(prefix, default):
        lo = cfg.get(f"{prefix}_min", default[0])
        hi = cfg.get(f"{prefix}_max", default[1])
        return (lo, hi)

    kwargs = {}
    if "image_size" in cfg:
        kwargs["image_size"] = cfg["image_size"]
    if "noise_sigma" in cfg:
        kwargs["noise_sigma"] = cfg["noise_sigma"]
    if "ignore_fraction" in cfg:
        kwargs["ignore_fraction"] = cfg["ignore_fraction"]
    kwargs["n_horizontal"] = pair("horizontal", (1, 2))
    kwargs["n_rotated"] = pair("rotated", (0, 1))
    kwargs["n_curved"] = pair("curved", (0, 1))
    kwargs["n_stripe_banks"] = pair("stripe_banks", (1, 2))
    kwargs["n_discs"] = pair("discs", (1, 2))
    return [SceneSpec(seed=base_seed + i, **kwargs) for i in range(count)]


def _train_config(cfg: dict, seed: int, dataset_size: int) -> TrainConfig:
    if "max_iter" in cfg and "epochs" in cfg:
        raise UserError("config sets both max_iter and epochs; pick one")
    kwargs = {k: v for k, v in cfg.items()
              if k in _TRAIN_SCHEMA and k not in _MODEL_SCHEMA
              and k not in ("dataset", "epochs", "seed")}
    if "epochs" in cfg:
        batch = cfg.get("batch_size", TrainConfig.batch_size)
        kwargs["max_iter"] = epochs_to_iters(cfg["epochs"], dataset_size, batch)
    return TrainConfig(seed=seed, **kwargs)


def _model_config(cfg: dict, tcm_flag: str | None) -> ModelConfig:
    kwargs = {k: v for k, v in cfg.items() if k in _MODEL_SCHEMA}
    if tcm_flag is not None:
        kwargs["tcm"] = tcm_flag == "on"
    return ModelConfig(**kwargs)


def _inference_config(cfg: dict, rs_flag: str | None) -> InferenceConfig:
    kwargs = {k: cfg[k] for k in
              ("score_threshold", "mask_threshold", "nms_iou", "polygon_source")
              if k in cfg}
    if rs_flag is not None:
        kwargs["rescore"] = rs_flag == "on"
    elif "rescore" in cfg:
        kwargs["rescore"] = cfg["rescore"]
    return InferenceConfig(**kwargs)


def _require(cfg: dict, key: str, command: str):
    if key not in cfg:
        raise UserError(f"{command} requires config key {key!r}")
    return cfg[key]


def _manifest_path(cfg: dict, key: str, command: str) -> Path:
    """Resolve a dataset config value: either the directory written by synth
    or the manifest file inside it.
    """
    path = Path(_require(cfg, key, command))
    if path.is_dir():
        candidate = path / MANIFEST_NAME
        if not candidate.is_file():
            raise UserError(f"{command}: dataset directory {path} contains no "
                            f"{MANIFEST_NAME}")
        return candidate
    if not path.is_file():
        raise UserError(f"{command}: dataset {path} does not exist")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    raw = _load_config(args)
    cfg = apply_schema(raw, _SYNTH_SCHEMA)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    out = Path(args.out)
    _write_run_manifest(out, RunManifest("synth", str(args.config), seed,
                                         str(out)), raw)
    count = cfg.get("count", 10)
    if count < 0:
        raise UserError(f"count must be >= 0, got {count}")
    specs = _scene_specs(cfg, count, seed)
    manifest_path = write_dataset(specs, out)
    instances = sum(
        len(read_annotation_file(ann)) for _, ann in read_manifest(manifest_path)
    )
    print(f"wrote {count} image/annotation pairs ({instances} text instances) "
          f"under {out}")
    return 0


def cmd_train(args) -> int:
    raw = _load_config(args)
    cfg = apply_schema(raw, _TRAIN_SCHEMA)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    out = Path(args.out)
    _write_run_manifest(out, RunManifest("train", str(args.config), seed,
                                         str(out)), raw)
    dataset = _manifest_path(cfg, "dataset", "train")
    samples = load_training_samples(dataset)
    tconfig = _train_config(cfg, seed, len(samples))
    mconfig = _model_config(cfg, args.tcm)
    result = train(samples, tconfig, mconfig, out_dir=out)
    (out / "metrics.log").write_text(
        "\n".join(result.metrics_lines) + "\n", encoding="utf-8")
    print(f"trained {tconfig.max_iter} iterations on {len(samples)} images; "
          f"final loss {result.final_loss:.6f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _detect_corpus(manifest_path, model, iconfig):
    detections, truths = [], []
    for image_path, ann_path in read_manifest(manifest_path):
        image = load_image(image_path)
        annotations = read_annotation_file(ann_path)
        truths.append(make_ground_truth(annotations, image.shape[:2]))
        found = detect(image, model, iconfig)
        detections.append([(inst.polygon, inst.fused) for inst in found])
    return detections, truths


def cmd_eval(args) -> int:
    raw = _load_config(args)
    cfg = apply_schema(raw, _EVAL_SCHEMA)
    out = Path(args.out)
    _write_run_manifest(out, RunManifest("eval", str(args.config),
                                         args.seed or 0, str(out)), raw)
    dataset = _manifest_path(cfg, "dataset", "eval")
    checkpoint = args.checkpoint or cfg.get("checkpoint")
    if "detections" in cfg:
        # score precomputed per-image detection files instead of a model
        det_dir = Path(cfg["detections"])
        pairs = read_manifest(dataset)
        detections, truths = [], []
        for index, (image_path, ann_path) in enumerate(pairs):
            image = load_image(image_path)
            annotations = read_annotation_file(ann_path)
            truths.append(make_ground_truth(annotations, image.shape[:2]))
            detections.append(read_detection_file(det_dir / f"det_{index:05d}.txt"))
    elif checkpoint is None:
        raise UserError("eval requires --checkpoint, the checkpoint config key, "
                        "or a detections directory")
    else:
        model = load_checkpoint(checkpoint)
        iconfig = _inference_config(cfg, args.rs)
        detections, truths = _detect_corpus(dataset, model, iconfig)
    report = evaluate(detections, truths, cfg.get("match_iou", 0.5))
    text = "\n".join([
        f"images = {len(truths)}",
        f"true_positives = {report.true_positives}",
        f"false_positives = {report.false_positives}",
        f"misses = {report.misses}",
        f"precision = {report.precision:.4f}",
        f"recall = {report.recall:.4f}",
        f"f_measure = {report.f_measure:.4f}",
    ]) + "\n"
    (out / "eval_report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_infer(args) -> int:
    raw = _load_config(args)
    cfg = apply_schema(raw, _INFER_SCHEMA)
    out = Path(args.out)
    _write_run_manifest(out, RunManifest("infer", str(args.config),
                                         args.seed or 0, str(out)), raw)
    checkpoint = args.checkpoint or cfg.get("checkpoint")
    if checkpoint is None:
        raise UserError("infer requires --checkpoint or the checkpoint config key")
    model = load_checkpoint(checkpoint)
    iconfig = _inference_config(cfg, args.rs)
    dataset = _manifest_path(cfg, "dataset", "infer")
    total = 0
    pairs = read_manifest(dataset)
    for index, (image_path, _) in enumerate(pairs):
        image = load_image(image_path)
        found = detect(image, model, iconfig)
        total += len(found)
        write_detection_file(out / f"det_{index:05d}.txt", found)
        if args.dump_segmap:
            prob = segmentation_map(image, model)
            raster = (np.clip(prob, 0.0, 1.0) * 255).astype(np.uint8)
            Image.fromarray(raster, mode="L").save(out / f"segmap_{index:05d}.png")
    print(f"wrote detections for {len(pairs)} images ({total} instances) "
          f"under {out}")
    return 0


def _median_summary(reports_by_seed: dict[int, dict[str, EvalReport]]
                    ) -> dict[str, dict[str, float]]:
    summary: dict[str, dict[str, float]] = {}
    for row in ROW_ORDER:
        summary[row] = {
            metric: statistics.median(
                getattr(reports_by_seed[s][row], metric)
                for s in reports_by_seed)
            for metric in ("precision", "recall", "f_measure")
        }
    return summary


def cmd_ablate(args) -> int:
    raw = _load_config(args)
    cfg = apply_schema(raw, _ABLATE_SCHEMA)
    out = Path(args.out)
    _write_run_manifest(out, RunManifest("ablate", str(args.config), 0,
                                         str(out)), raw)
    train_manifest = _manifest_path(cfg, "train_dataset", "ablate")
    test_manifest = _manifest_path(cfg, "test_dataset", "ablate")
    if args.seed is not None:  # single-seed override for quick runs
        seeds = (args.seed,)
    else:
        seeds = cfg.get("seeds", (1, 2, 3))
    samples = load_training_samples(train_manifest)
    iconfig_on = _inference_config(cfg, "on")
    iconfig_off = _inference_config(cfg, "off")
    match_iou = cfg.get("match_iou", 0.5)

    reports_by_seed: dict[int, dict[str, EvalReport]] = {}
    for seed in seeds:
        models = {}
        for variant, with_context in (("baseline", False), ("tcm", True)):
            ckpt = out / f"seed{seed}" / variant / "checkpoint.ckpt"
            if ckpt.is_file():
                print(f"seed {seed} {variant}: reusing {ckpt}")
                models[variant] = load_checkpoint(ckpt)
            else:
                tconfig = _train_config(cfg, seed, len(samples))
                mconfig = replace(_model_config(cfg, None), tcm=with_context)
                print(f"seed {seed} {variant}: training {tconfig.max_iter} iterations")
                result = train(samples, tconfig, mconfig, out_dir=ckpt.parent)
                models[variant] = result.model
        rows: dict[str, EvalReport] = {}
        base_dets, truths = _detect_corpus(test_manifest, models["baseline"],
                                           iconfig_off)
        rows["baseline"] = evaluate(base_dets, truths, match_iou)
        tcm_dets, _ = _detect_corpus(test_manifest, models["tcm"], iconfig_off)
        rows["tcm"] = evaluate(tcm_dets, truths, match_iou)
        rs_dets, _ = _detect_corpus(test_manifest, models["tcm"], iconfig_on)
        rows["tcm_rs"] = evaluate(rs_dets, truths, match_iou)
        reports_by_seed[seed] = rows
        print(f"seed {seed}: " + "  ".join(
            f"{ROW_LABELS[r]} P={rows[r].precision:.3f} R={rows[r].recall:.3f} "
            f"F={rows[r].f_measure:.3f}" for r in ROW_ORDER))

    summary = _median_summary(reports_by_seed)
    table_lines = [f"seeds: {', '.join(str(s) for s in seeds)}", ""]
    for seed in seeds:
        table_lines.append(f"seed {seed}:")
        table_lines.append(ablation_table(reports_by_seed[seed]))
    table_lines.append("medians:")
    header = f"{'Model':<12}  {'Recall':>8}  {'Precision':>9}  {'F-measure':>9}"
    table_lines.append(header)
    for row in ROW_ORDER:
        m = summary[row]
        table_lines.append(
            f"{ROW_LABELS[row]:<12}  {100 * m['recall']:8.2f}  "
            f"{100 * m['precision']:9.2f}  {100 * m['f_measure']:9.2f}")
    table_text = "\n".join(table_lines) + "\n"
    (out / "ablation_table.txt").write_text(table_text, encoding="utf-8")

    kv_lines = []
    for seed in seeds:
        per_seed = ablation_key_values(reports_by_seed[seed])
        kv_lines += [f"seed{seed}.{line}" for line in per_seed.strip().splitlines()]
    for row in ROW_ORDER:
        for metric, value in summary[row].items():
            kv_lines.append(f"median.{row}.{metric} = {value:.4f}")
    (out / "ablation.kv").write_text("\n".join(kv_lines) + "\n", encoding="utf-8")
    print(table_text, end="")
    return 0


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="textpyramid",
                     description="Scene-text detection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, rs=False, tcm=False, segmap=False):
        p.add_argument("--config", type=Path, default=None,
                       help="key = value settings file")
        p.add_argument("--seed", type=int, default=None,
                       help="overrides the config seed")
        p.add_argument("--out", type=Path, required=True,
                       help="output directory")
        if checkpoint:
            p.add_argument("--checkpoint", type=Path, default=None)
        if rs:
            p.add_argument("--rs", choices=("on", "off"), default=None,
                           help="toggle segmentation-based re-scoring")
        if tcm:
            p.add_argument("--tcm", choices=("on", "off"), default=None,
                           help="toggle the text-context branch")
        if segmap:
            p.add_argument("--dump-segmap", action="store_true",
                           help="also write text-probability rasters")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detector")
    common(p, tcm=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint against a dataset")
    common(p, checkpoint=True, rs=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="write per-image detection files")
    common(p, checkpoint=True, rs=True, segmap=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="train and compare the three variants")
    common(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UserError, ConfigError, ParseError, CheckpointError,
            OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
