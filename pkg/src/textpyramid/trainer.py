"""Training loop: multi-task loss assembly, poly learning-rate schedule,
augmentation, target sampling, and deterministic checkpointing.

Runs single-threaded for bit-exact reproducibility; every random draw comes
from generators derived from the configured seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import tcm as tcm_mod
from .dataio import (
    Annotation,
    GroundTruth,
    load_image,
    make_ground_truth,
    read_annotation_file,
    read_manifest,
)
from .detector import (
    ModelConfig,
    PYRAMID_STRIDES,
    TextDetector,
    assign_rpn_targets,
    box_iou_matrix,
    encode_box,
    flatten_rpn_outputs,
    generate_anchors,
    proposals_from_rpn,
    save_checkpoint,
)
from .geometry import Polygon, rasterize
from .netops import bce_with_logits, smooth_l1, softmax_cross_entropy

__all__ = [
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "total_loss",
    "poly_lr",
    "epochs_to_iters",
    "resize_sample",
    "flip_horizontal",
    "augment",
    "load_training_samples",
    "train",
]

Sample = tuple[np.ndarray, list[Annotation]]


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and augmentation settings."""

    lambda_cls: float = 1.0
    lambda_box: float = 1.0
    lambda_mask: float = 1.0
    lambda_gts: float = 1.0
    base_lr: float = 2e-3
    max_iter: int = 2000
    poly_power: float = 0.9
    batch_size: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    decoupled_weight_decay: bool = True
    scales: tuple[int, ...] = (96, 112, 128)
    flip_prob: float = 0.5
    seed: int = 0
    log_interval: int = 50
    checkpoint_interval: int = 500
    ignore_in_seg_loss: bool = True
    rpn_sample_size: int = 64
    rpn_pos_fraction: float = 0.5
    rcnn_sample_size: int = 32
    rcnn_pos_fraction: float = 0.5
    rcnn_pos_iou: float = 0.5

    def __post_init__(self) -> None:
        for name in ("lambda_cls", "lambda_box", "lambda_mask", "lambda_gts"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if self.poly_power <= 0:
            raise ValueError("poly_power must be > 0")
        if self.max_iter < 1 or self.batch_size < 1:
            raise ValueError("max_iter and batch_size must be >= 1")
        if not self.scales:
            raise ValueError("at least one augmentation scale is required")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must be in [0, 1]")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the last good checkpoint is retained."""

    def __init__(self, term: str, iteration: int, checkpoint_path: Path | None) -> None:
        super().__init__(
            f"{term} became non-finite at iteration {iteration}"
            + (f"; last checkpoint kept at {checkpoint_path}" if checkpoint_path else "")
        )
        self.term = term
        self.iteration = iteration
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainResult:
    model: TextDetector
    metrics_lines: list[str] = field(default_factory=list)
    checkpoint_path: Path | None = None
    final_loss: float = float("nan")


def total_loss(l_rpn: torch.Tensor, l_cls: torch.Tensor, l_box: torch.Tensor,
               l_mask: torch.Tensor, l_gts: torch.Tensor,
               config: TrainConfig) -> torch.Tensor:
    """Weighted multi-task sum; aborts naming the first non-finite term."""
    terms = {"L_rpn": l_rpn, "L_cls": l_cls, "L_box": l_box,
             "L_mask": l_mask, "L_gts": l_gts}
    for name, value in terms.items():
        if not torch.isfinite(value).all():
            raise TrainingDiverged(name, -1, None)
    return (l_rpn + config.lambda_cls * l_cls + config.lambda_box * l_box
            + config.lambda_mask * l_mask + config.lambda_gts * l_gts)


def poly_lr(iteration: int, config: TrainConfig) -> float:
    """base_lr * (1 - iteration/max_iter)^power."""
    if not 0 <= iteration <= config.max_iter:
        raise ValueError(
            f"iteration {iteration} outside [0, {config.max_iter}]"
        )
    return config.base_lr * (1.0 - iteration / config.max_iter) ** config.poly_power


def epochs_to_iters(epochs: int, dataset_size: int, batch_size: int) -> int:
    """Iteration count equivalent of an epoch budget."""
    return epochs * math.ceil(dataset_size / batch_size)


def resize_sample(image: np.ndarray, annotations: list[Annotation],
                  short_edge: int) -> Sample:
    """Scale so the short edge hits `short_edge`; polygons follow exactly."""
    h, w = image.shape[:2]
    factor = short_edge / min(h, w)
    new_h, new_w = int(round(h * factor)), int(round(w * factor))
    resized = np.asarray(
        Image.fromarray(image).resize((new_w, new_h), Image.BILINEAR)
    )
    fx, fy = new_w / w, new_h / h
    scaled = [
        Annotation(a.polygon.transformed(lambda v: v * (fx, fy)), a.transcription)
        for a in annotations
    ]
    return resized, scaled


def flip_horizontal(image: np.ndarray, annotations: list[Annotation]) -> Sample:
    w = image.shape[1]
    flipped = np.ascontiguousarray(image[:, ::-1])
    out = [
        Annotation(a.polygon.transformed(lambda v: np.stack([w - v[:, 0], v[:, 1]], axis=1)),
                   a.transcription)
        for a in annotations
    ]
    return flipped, out


def augment(image: np.ndarray, annotations: list[Annotation],
            config: TrainConfig, rng: np.random.Generator) -> Sample:
    """Random short-edge rescale to one of the configured sizes, then a
    horizontal flip with the configured probability.
    """
    scale = int(config.scales[int(rng.integers(0, len(config.scales)))])
    image, annotations = resize_sample(image, annotations, scale)
    if rng.random() < config.flip_prob:
        image, annotations = flip_horizontal(image, annotations)
    return image, annotations


def pad_to_multiple(image: np.ndarray, multiple: int = 32) -> np.ndarray:
    """Bottom/right zero padding up to the next multiple; labels keep their
    coordinates since the origin does not move."""
    h, w = image.shape[:2]
    ph = (multiple - h % multiple) % multiple
    pw = (multiple - w % multiple) % multiple
    if ph == 0 and pw == 0:
        return image
    return np.pad(image, ((0, ph), (0, pw), (0, 0)))


def load_training_samples(manifest_path) -> list[Sample]:
    samples = []
    for image_path, ann_path in read_manifest(manifest_path):
        samples.append((load_image(image_path), read_annotation_file(ann_path)))
    return samples


def _mask_target(polygon: Polygon, box: np.ndarray, size: int) -> np.ndarray | None:
    """Ground-truth mask on the box's size x size grid, or None if the
    polygon collapses under the box transform."""
    x0, y0, x1, y1 = box
    sx = size / max(x1 - x0, 1e-6)
    sy = size / max(y1 - y0, 1e-6)
    try:
        local = polygon.transformed(
            lambda v: np.stack([(v[:, 0] - x0) * sx, (v[:, 1] - y0) * sy], axis=1))
    except ValueError:
        return None
    return rasterize(local, size, size)


def _sample_balanced(rng: np.random.Generator, labels: np.ndarray,
                     total: int, pos_fraction: float) -> np.ndarray:
    """Index sample with at most total entries and the requested positive
    share, padded with negatives when positives run short."""
    pos = np.nonzero(labels == 1)[0]
    neg = np.nonzero(labels == 0)[0]
    pos_take = min(len(pos), int(round(total * pos_fraction)))
    neg_take = min(len(neg), total - pos_take)
    picked = []
    if pos_take:
        picked.append(rng.choice(pos, size=pos_take, replace=False))
    if neg_take:
        picked.append(rng.choice(neg, size=neg_take, replace=False))
    if not picked:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate(picked)


def _image_losses(model: TextDetector, image: np.ndarray, gt: GroundTruth,
                  anchors_cache: dict, tconfig: TrainConfig,
                  rng: np.random.Generator) -> dict[str, torch.Tensor]:
    tensor = model.preprocess(image)
    height, width = tensor.shape[-2:]
    stages, stage_logits = model.build_pyramid(tensor)

    key = (height, width)
    if key not in anchors_cache:
        sizes = [(height // s, width // s) for s in PYRAMID_STRIDES]
        anchors_cache[key] = generate_anchors(
            sizes, bases=model.config.anchor_bases, ratios=model.config.anchor_ratios)
    anchors = anchors_cache[key]

    gt_boxes = np.array([i.box.as_array() for i in gt.instances], dtype=np.float64)
    gt_boxes = gt_boxes.reshape(-1, 4)

    obj_maps, delta_maps = model.rpn_forward(stages)
    flat_obj, flat_dlt = flatten_rpn_outputs(obj_maps, delta_maps)
    labels, rpn_deltas = assign_rpn_targets(
        anchors, gt_boxes, model.config.rpn_pos_iou, model.config.rpn_neg_iou)
    sel = _sample_balanced(rng, labels, tconfig.rpn_sample_size,
                           tconfig.rpn_pos_fraction)
    zero = flat_obj.sum() * 0.0
    if len(sel):
        sel_t = torch.from_numpy(sel)
        obj_loss = bce_with_logits(
            flat_obj[0, sel_t],
            torch.from_numpy(labels[sel].astype(np.float32))).mean()
        pos_sel = sel[labels[sel] == 1]
        if len(pos_sel):
            pos_t = torch.from_numpy(pos_sel)
            box_loss = smooth_l1(
                flat_dlt[0, pos_t],
                torch.from_numpy(rpn_deltas[pos_sel].astype(np.float32))).mean()
        else:
            box_loss = zero
        l_rpn = obj_loss + box_loss
    else:
        l_rpn = zero

    proposals, _ = proposals_from_rpn(
        anchors, flat_obj[0], flat_dlt[0], (height, width), model.config)
    if len(gt_boxes):
        proposals = np.concatenate([proposals, gt_boxes], axis=0)

    l_cls = zero
    l_box = zero
    l_mask = zero
    if len(proposals):
        if len(gt_boxes):
            iou = box_iou_matrix(proposals, gt_boxes)
            best_gt = iou.argmax(axis=1)
            best_iou = iou.max(axis=1)
        else:
            best_gt = np.zeros(len(proposals), dtype=np.int64)
            best_iou = np.zeros(len(proposals))
        roi_labels = (best_iou >= tconfig.rcnn_pos_iou).astype(np.int64)
        sel = _sample_balanced(rng, roi_labels, tconfig.rcnn_sample_size,
                               tconfig.rcnn_pos_fraction)
        if len(sel):
            boxes = proposals[sel]
            pos_rows = np.nonzero(roi_labels[sel] == 1)[0]
            cls_logits, box_deltas, mask_logits = model.rcnn_heads(
                stages, boxes, mask_rows=pos_rows)
            cls_targets = torch.from_numpy(roi_labels[sel])
            l_cls = softmax_cross_entropy(cls_logits, cls_targets)
            if len(pos_rows):
                gt_idx = best_gt[sel][pos_rows]
                reg_targets = encode_box(gt_boxes[gt_idx], boxes[pos_rows])
                l_box = smooth_l1(
                    box_deltas[torch.from_numpy(pos_rows)],
                    torch.from_numpy(reg_targets.astype(np.float32))).mean()
                mask_targets, mask_keep = [], []
                for k, r in enumerate(pos_rows):
                    target = _mask_target(gt.instances[int(gt_idx[k])].polygon,
                                          boxes[r], 14)
                    if target is not None:
                        mask_targets.append(target)
                        mask_keep.append(k)
                if mask_keep:
                    got = mask_logits[torch.from_numpy(np.array(mask_keep)), 0]
                    want = torch.from_numpy(
                        np.stack(mask_targets).astype(np.float32))
                    l_mask = bce_with_logits(got, want).mean()

    if stage_logits and tconfig.lambda_gts > 0:
        seg_logits = tcm_mod.global_seg_map(stage_logits, (height, width))
        gt_map = torch.from_numpy(gt.global_map.astype(np.int64))[None]
        ignore = None
        if tconfig.ignore_in_seg_loss and gt.ignore_regions:
            acc = np.zeros((height, width), dtype=bool)
            for poly in gt.ignore_regions:
                acc |= rasterize(poly, height, width)
            ignore = torch.from_numpy(acc.astype(np.float32))[None]
        l_gts = tcm_mod.seg_loss(seg_logits, gt_map, ignore)
    else:
        l_gts = zero

    return {"L_rpn": l_rpn, "L_cls": l_cls, "L_box": l_box,
            "L_mask": l_mask, "L_gts": l_gts}


def _build_optimizer(model: TextDetector, config: TrainConfig) -> torch.optim.Optimizer:
    cls = torch.optim.AdamW if config.decoupled_weight_decay else torch.optim.Adam
    return cls(model.parameters(), lr=config.base_lr,
               betas=(config.beta1, config.beta2),
               weight_decay=config.weight_decay)


def train(samples: list[Sample], tconfig: TrainConfig, mconfig: ModelConfig,
          out_dir=None) -> TrainResult:
    """Run the full optimization loop over in-memory samples.

    Deterministic for a fixed (tconfig, mconfig) pair: model init, sampling,
    and augmentation all derive from tconfig.seed, and torch runs on one
    thread.  Checkpoints land in out_dir when given; a non-finite loss
    raises TrainingDiverged with the last checkpoint retained.
    """
    if not samples:
        raise ValueError("training requires a non-empty dataset")
    torch.set_num_threads(1)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    model = TextDetector(mconfig,
                         generator=torch.Generator().manual_seed(tconfig.seed))
    optimizer = _build_optimizer(model, tconfig)
    root = np.random.SeedSequence(entropy=tconfig.seed)
    # one child stream per iteration keeps draws independent of batch layout
    streams = [np.random.default_rng(s) for s in root.spawn(tconfig.max_iter)]

    anchors_cache: dict = {}
    metrics: list[str] = []
    checkpoint_path = out_path / "checkpoint.ckpt" if out_path else None
    last_saved = None
    final = float("nan")

    for iteration in range(tconfig.max_iter):
        rng = streams[iteration]
        lr = poly_lr(iteration, tconfig)
        for group in optimizer.param_groups:
            group["lr"] = lr

        idx = rng.choice(len(samples), size=min(tconfig.batch_size, len(samples)),
                         replace=len(samples) < tconfig.batch_size)
        sums = {k: torch.zeros(()) for k in
                ("L_rpn", "L_cls", "L_box", "L_mask", "L_gts")}
        batch_total = torch.zeros(())
        for j in idx:
            image, annotations = samples[int(j)]
            image, annotations = augment(image, annotations, tconfig, rng)
            image = pad_to_multiple(image)
            gt = make_ground_truth(annotations, image.shape[:2])
            losses = _image_losses(model, image, gt, anchors_cache, tconfig, rng)
            try:
                img_total = total_loss(losses["L_rpn"], losses["L_cls"],
                                       losses["L_box"], losses["L_mask"],
                                       losses["L_gts"], tconfig)
            except TrainingDiverged as exc:
                raise TrainingDiverged(exc.term, iteration, last_saved) from None
            batch_total = batch_total + img_total
            for k in sums:
                sums[k] = sums[k] + losses[k].detach()

        batch_total = batch_total / len(idx)
        if not torch.isfinite(batch_total):
            raise TrainingDiverged("L_total", iteration, last_saved)
        optimizer.zero_grad()
        batch_total.backward()
        optimizer.step()
        final = float(batch_total.detach())

        if iteration % tconfig.log_interval == 0 or iteration == tconfig.max_iter - 1:
            parts = [f"{iteration}", f"{lr:.6e}", f"{final:.6f}"]
            parts += [f"{float(sums[k]) / len(idx):.6f}" for k in
                      ("L_rpn", "L_cls", "L_box", "L_mask", "L_gts")]
            metrics.append(", ".join(parts))
        if checkpoint_path is not None and (
                (iteration + 1) % tconfig.checkpoint_interval == 0
                or iteration == tconfig.max_iter - 1):
            save_checkpoint(model, checkpoint_path)
            last_saved = checkpoint_path

    if checkpoint_path is not None and last_saved is None:
        save_checkpoint(model, checkpoint_path)
        last_saved = checkpoint_path
    return TrainResult(model, metrics, last_saved, final)
