"""Test-time detection: proposal scoring, mask projection, score fusion
between the classifier and the global segmentation map, and polygon output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .dataio import ParseError
from .detector import (
    ModelConfig,
    PYRAMID_STRIDES,
    TextDetector,
    flatten_rpn_outputs,
    generate_anchors,
    proposals_from_rpn,
)
from .geometry import (
    Polygon,
    RotatedRect,
    min_area_rect_of_points,
    convex_hull,
    polygon_nms,
)
from .netops import bilinear_resize, channel_softmax
from .tcm import TEXT_CHANNEL, global_seg_map
from .trainer import pad_to_multiple

__all__ = [
    "InferenceConfig",
    "TextInstance",
    "instance_score",
    "fused_score",
    "detect",
    "segmentation_map",
    "rescore_toggle",
    "format_detection_line",
    "write_detection_file",
    "read_detection_file",
]


@dataclass(frozen=True)
class InferenceConfig:
    """Post-processing knobs for detect()."""

    score_threshold: float = 0.55
    mask_threshold: float = 0.5
    nms_iou: float = 0.3
    rescore: bool = True
    polygon_source: str = "min_rect"  # or "hull": the component's convex outline

    def __post_init__(self) -> None:
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError("score_threshold must be in [0, 1]")
        if not 0.0 < self.mask_threshold < 1.0:
            raise ValueError("mask_threshold must be in (0, 1)")
        if not 0.0 < self.nms_iou < 1.0:
            raise ValueError("nms_iou must be in (0, 1)")
        if self.polygon_source not in ("min_rect", "hull"):
            raise ValueError(
                f"polygon_source must be 'min_rect' or 'hull', got {self.polygon_source!r}"
            )


@dataclass
class TextInstance:
    """One detected region with both score pairs and their fusion."""

    mask: np.ndarray
    polygon: Polygon
    box: RotatedRect
    class_scores: tuple[float, float]
    instance_scores: tuple[float, float]
    fused: float

    def __post_init__(self) -> None:
        for name, pair in (("class_scores", self.class_scores),
                           ("instance_scores", self.instance_scores)):
            if not (0.0 <= pair[0] <= 1.0 and 0.0 <= pair[1] <= 1.0):
                raise ValueError(f"{name} components must lie in [0, 1]: {pair}")
            if abs(pair[0] + pair[1] - 1.0) > 1e-6:
                raise ValueError(f"{name} must sum to 1: {pair}")
        if not 0.0 < self.fused < 1.0:
            raise ValueError(f"fused score must lie in (0, 1), got {self.fused}")
        if not self.mask.any():
            raise ValueError("instance mask has no set pixels")


def instance_score(mask: np.ndarray, seg_map: np.ndarray) -> float:
    """Mean text probability over the mask's pixels."""
    mask = np.asarray(mask, dtype=bool)
    seg_map = np.asarray(seg_map, dtype=np.float64)
    if mask.shape != seg_map.shape:
        raise ValueError(
            f"mask shape {mask.shape} does not match map shape {seg_map.shape}"
        )
    count = int(mask.sum())
    if count == 0:
        raise ValueError("instance mask has no set pixels")
    return float(seg_map[mask].sum() / count)


def fused_score(class_scores: tuple[float, float],
                instance_scores: tuple[float, float]) -> float:
    """Two-way softmax over the summed score pairs:
    e^(c1+i1) / (e^(c1+i1) + e^(c0+i0)).
    """
    c0, c1 = class_scores
    i0, i1 = instance_scores
    text = math.exp(c1 + i1)
    other = math.exp(c0 + i0)
    return text / (text + other)


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if count <= 1:
        return mask
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == sizes.argmax()


def _component_points(component: np.ndarray) -> np.ndarray:
    """Pixel-corner point cloud of a binary component."""
    ys, xs = np.nonzero(component)
    corners = np.concatenate([
        np.stack([xs, ys], axis=1),
        np.stack([xs + 1, ys], axis=1),
        np.stack([xs, ys + 1], axis=1),
        np.stack([xs + 1, ys + 1], axis=1),
    ]).astype(np.float64)
    return np.unique(corners, axis=0)


def _frame_clipped_polygon(vertices: np.ndarray, height: int, width: int) -> Polygon:
    clipped = vertices.copy()
    clipped[:, 0] = np.clip(clipped[:, 0], 0.0, float(width))
    clipped[:, 1] = np.clip(clipped[:, 1], 0.0, float(height))
    try:
        return Polygon(clipped)
    except ValueError:
        # clamping collapsed the quad; emit a unit box at its centroid,
        # kept inside the frame
        cx = float(np.clip(clipped[:, 0].mean(), 0.5, width - 0.5))
        cy = float(np.clip(clipped[:, 1].mean(), 0.5, height - 0.5))
        return Polygon(np.array([
            [cx - 0.5, cy - 0.5], [cx + 0.5, cy - 0.5],
            [cx + 0.5, cy + 0.5], [cx - 0.5, cy + 0.5],
        ]))


def _paste_mask(mask_prob: torch.Tensor, box: np.ndarray,
                height: int, width: int, threshold: float) -> np.ndarray:
    """Binarized box-local mask projected into a full-frame boolean map."""
    x0 = max(int(math.floor(box[0])), 0)
    y0 = max(int(math.floor(box[1])), 0)
    x1 = min(int(math.ceil(box[2])), width)
    y1 = min(int(math.ceil(box[3])), height)
    out = np.zeros((height, width), dtype=bool)
    if x1 - x0 < 1 or y1 - y0 < 1:
        return out
    local = bilinear_resize(mask_prob[None, None], y1 - y0, x1 - x0)[0, 0]
    out[y0:y1, x0:x1] = local.numpy() >= threshold
    return out


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def detect(image: np.ndarray, model: TextDetector,
           config: InferenceConfig = InferenceConfig()) -> list[TextInstance]:
    """Full single-image pipeline: proposals, per-region scores and masks,
    score fusion, polygon extraction, and polygon-level suppression.

    Regions whose fused score cannot reach the threshold even with a
    perfect segmentation response are skipped before mask computation;
    the bound is exact, so the output set is unchanged by the shortcut.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")
    height, width = image.shape[:2]
    padded = pad_to_multiple(image)
    ph, pw = padded.shape[:2]

    with torch.no_grad():
        tensor = model.preprocess(padded)
        stages, stage_logits = model.build_pyramid(tensor)
        obj_maps, delta_maps = model.rpn_forward(stages)
        flat_obj, flat_dlt = flatten_rpn_outputs(obj_maps, delta_maps)
        sizes = [(ph // s, pw // s) for s in PYRAMID_STRIDES]
        anchors = generate_anchors(sizes, bases=model.config.anchor_bases,
                                   ratios=model.config.anchor_ratios)
        proposals, _ = proposals_from_rpn(anchors, flat_obj[0], flat_dlt[0],
                                          (ph, pw), model.config)
        if len(proposals) == 0:
            return []
        cls_logits, _, _ = model.rcnn_heads(stages, proposals,
                                            mask_rows=np.zeros(0, dtype=np.int64))
        probs = channel_softmax(cls_logits[:, :, None, None])[:, :, 0, 0]
        probs = probs.numpy().astype(np.float64)

        # candidates that could still clear the threshold with the best
        # possible segmentation response (margin shift of +1)
        margins = np.log(np.maximum(probs[:, 1], 1e-300)) \
            - np.log(np.maximum(probs[:, 0], 1e-300))
        if config.rescore:
            reachable = np.array(
                [_sigmoid(m + 1.0) >= config.score_threshold - 1e-12
                 for m in margins])
        else:
            reachable = np.array(
                [_sigmoid(m) >= config.score_threshold - 1e-12 for m in margins])
        keep_rows = np.nonzero(reachable)[0]
        if len(keep_rows) == 0:
            return []
        _, _, mask_logits = model.rcnn_heads(stages, proposals,
                                             mask_rows=keep_rows)

        seg_prob = None
        if stage_logits:
            seg = global_seg_map(stage_logits, (ph, pw))
            seg_prob = channel_softmax(seg)[0, TEXT_CHANNEL].numpy().astype(np.float64)

    instances: list[TextInstance] = []
    for row, mask_logit in zip(keep_rows, mask_logits):
        box = proposals[row]
        full_mask = _paste_mask(torch.sigmoid(mask_logit[0]), box, ph, pw,
                                config.mask_threshold)
        full_mask = full_mask[:height, :width]
        if not full_mask.any():
            continue
        if seg_prob is not None:
            text_prob = instance_score(full_mask, seg_prob[:height, :width])
        else:
            text_prob = 0.5  # no segmentation branch: neutral response
        class_pair = (float(probs[row, 0]), float(probs[row, 1]))
        instance_pair = (1.0 - text_prob, text_prob)
        used_pair = instance_pair if config.rescore else (0.5, 0.5)
        score = fused_score(class_pair, used_pair)
        if score < config.score_threshold:
            continue
        component = _largest_component(full_mask)
        points = _component_points(component)
        rect = min_area_rect_of_points(points)
        if config.polygon_source == "hull":
            polygon = _frame_clipped_polygon(convex_hull(points), height, width)
        else:
            polygon = _frame_clipped_polygon(rect.to_polygon().vertices,
                                             height, width)
        instances.append(TextInstance(full_mask, polygon, rect, class_pair,
                                      instance_pair, score))

    if not instances:
        return []
    kept = polygon_nms([(i.polygon, i.fused) for i in instances], config.nms_iou)
    return [instances[k] for k in kept]


def segmentation_map(image: np.ndarray, model: TextDetector) -> np.ndarray:
    """Full-resolution text-probability map from the context branch."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")
    height, width = image.shape[:2]
    padded = pad_to_multiple(image)
    with torch.no_grad():
        _, stage_logits = model.build_pyramid(model.preprocess(padded))
        if not stage_logits:
            raise ValueError(
                "model has no context branch, so no segmentation map exists"
            )
        seg = global_seg_map(stage_logits, padded.shape[:2])
        prob = channel_softmax(seg)[0, TEXT_CHANNEL].numpy()
    return prob[:height, :width].astype(np.float64)


def rescore_toggle(instances: list[TextInstance], mode: str) -> list[TextInstance]:
    """Re-rank instances with ('on') or without ('off') the segmentation
    response; 'off' substitutes the neutral pair, which preserves the
    classifier-only ordering.
    """
    if mode not in ("on", "off"):
        raise ValueError(f"mode must be 'on' or 'off', got {mode!r}")
    rescored = []
    for inst in instances:
        pair = inst.instance_scores if mode == "on" else (0.5, 0.5)
        rescored.append(replace(inst, fused=fused_score(inst.class_scores, pair)))
    rescored.sort(key=lambda i: -i.fused)
    return rescored


def format_detection_line(instance: TextInstance) -> str:
    coords = ",".join(f"{v:.2f}" for v in instance.polygon.vertices.ravel())
    return f"{coords},{instance.fused:.6f}"


def write_detection_file(path, instances: list[TextInstance]) -> None:
    path = Path(path)
    path.write_text(
        "".join(format_detection_line(i) + "\n" for i in instances),
        encoding="utf-8",
    )


def read_detection_file(path) -> list[tuple[Polygon, float]]:
    """Parse 'x1,y1,...,xN,yN,score' detection lines."""
    path = Path(path)
    out: list[tuple[Polygon, float]] = []
    for number, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        fields = raw.split(",")
        if len(fields) < 9 or (len(fields) - 1) % 2 != 0:
            raise ParseError(
                f"line {number}: expected x1,y1,...,x4,y4,score, got {len(fields)} fields"
            )
        try:
            values = [float(f) for f in fields]
        except ValueError as exc:
            raise ParseError(f"line {number}: non-numeric field: {exc}") from None
        try:
            polygon = Polygon(np.array(values[:-1]).reshape(-1, 2))
        except ValueError as exc:
            raise ParseError(f"line {number}: {exc}") from exc
        out.append((polygon, values[-1]))
    return out
