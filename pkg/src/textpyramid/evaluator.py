"""Detection scoring: greedy IoU matching, precision/recall/F, and the
three-row comparison table for the model variants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import GroundTruth
from .geometry import Polygon, polygon_iou

__all__ = [
    "MatchResult",
    "EvalReport",
    "match_detections",
    "prf",
    "f_measure",
    "evaluate",
    "ROW_ORDER",
    "ROW_LABELS",
    "ablation_table",
    "ablation_key_values",
    "parse_key_values",
]


@dataclass
class MatchResult:
    """Per-image outcome: index pairs plus the leftovers on both sides."""

    pairs: list[tuple[int, int]] = field(default_factory=list)
    unmatched_detections: list[int] = field(default_factory=list)
    ignored_detections: list[int] = field(default_factory=list)
    unmatched_truths: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class EvalReport:
    matches: tuple[MatchResult, ...]
    true_positives: int
    false_positives: int
    misses: int
    precision: float
    recall: float
    f_measure: float


def match_detections(detections: list[tuple[Polygon, float]],
                     truth: GroundTruth,
                     iou_threshold: float = 0.5) -> MatchResult:
    """Greedy one-to-one matching in descending score order.

    Each detection claims the still-unmatched truth polygon of highest IoU
    when that IoU reaches the threshold.  A detection that fails but
    overlaps an ignore region at the threshold is excluded from counting
    instead of becoming a false positive.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    result = MatchResult()
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i][1], i))
    taken = [False] * len(truth.instances)
    for det_idx in order:
        polygon = detections[det_idx][0]
        best_iou, best_gt = 0.0, -1
        for gt_idx, instance in enumerate(truth.instances):
            if taken[gt_idx]:
                continue
            iou = polygon_iou(polygon, instance.polygon)
            if iou > best_iou:
                best_iou, best_gt = iou, gt_idx
        if best_gt >= 0 and best_iou >= iou_threshold:
            taken[best_gt] = True
            result.pairs.append((det_idx, best_gt))
            continue
        if any(polygon_iou(polygon, region) >= iou_threshold
               for region in truth.ignore_regions):
            result.ignored_detections.append(det_idx)
        else:
            result.unmatched_detections.append(det_idx)
    result.unmatched_truths = [i for i, used in enumerate(taken) if not used]
    return result


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall, and F; zero denominators score zero."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be >= 0")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall, f_measure(precision, recall)


def f_measure(precision: float, recall: float) -> float:
    """Harmonic mean; scale-free, so it accepts fractions or percentages."""
    if precision + recall <= 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def evaluate(detection_lists: list[list[tuple[Polygon, float]]],
             truths: list[GroundTruth],
             iou_threshold: float = 0.5) -> EvalReport:
    """Corpus-level report over parallel per-image detection/truth lists."""
    if len(detection_lists) != len(truths):
        raise ValueError(
            f"{len(detection_lists)} detection lists vs {len(truths)} truths"
        )
    matches = tuple(match_detections(dets, truth, iou_threshold)
                    for dets, truth in zip(detection_lists, truths))
    tp = sum(len(m.pairs) for m in matches)
    fp = sum(len(m.unmatched_detections) for m in matches)
    fn = sum(len(m.unmatched_truths) for m in matches)
    precision, recall, f_value = prf(tp, fp, fn)
    return EvalReport(matches, tp, fp, fn, precision, recall, f_value)


ROW_ORDER = ("baseline", "tcm", "tcm_rs")
ROW_LABELS = {"baseline": "Baseline", "tcm": "+TCM", "tcm_rs": "+TCM+RS"}


def _check_rows(reports: dict[str, EvalReport]) -> None:
    for key in ROW_ORDER:
        if key not in reports:
            raise ValueError(f"missing configuration: {key}")
    for key in reports:
        if key not in ROW_ORDER:
            raise ValueError(f"unknown configuration: {key}")


def ablation_table(reports: dict[str, EvalReport]) -> str:
    """Plain-text comparison table, rows in fixed variant order."""
    _check_rows(reports)
    lines = [f"{'Model':<12}  {'Recall':>8}  {'Precision':>9}  {'F-measure':>9}"]
    for key in ROW_ORDER:
        r = reports[key]
        lines.append(
            f"{ROW_LABELS[key]:<12}  {100 * r.recall:8.2f}  "
            f"{100 * r.precision:9.2f}  {100 * r.f_measure:9.2f}"
        )
    return "\n".join(lines) + "\n"


def ablation_key_values(reports: dict[str, EvalReport]) -> str:
    """Machine-readable mirror of the table, four decimal places."""
    _check_rows(reports)
    lines = []
    for key in ROW_ORDER:
        r = reports[key]
        lines.append(f"{key}.recall = {r.recall:.4f}")
        lines.append(f"{key}.precision = {r.precision:.4f}")
        lines.append(f"{key}.f_measure = {r.f_measure:.4f}")
    return "\n".join(lines) + "\n"


def parse_key_values(text: str) -> dict[str, float]:
    out: dict[str, float] = {}
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {number}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = float(value)
    return out
