"""Evaluator tests: matching semantics, score conventions, table output."""

import numpy as np
import pytest

from textpyramid.dataio import Annotation, IGNORE_SENTINEL, make_ground_truth
from textpyramid.evaluator import (
    EvalReport,
    ablation_key_values,
    ablation_table,
    evaluate,
    f_measure,
    match_detections,
    parse_key_values,
    prf,
)
from textpyramid.geometry import Polygon, polygon_iou


def _rect(x0, y0, x1, y1):
    return Polygon(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float))


def _truth(polygons, size=(100, 100), ignored=()):
    annotations = [Annotation(p, "word") for p in polygons]
    annotations += [Annotation(p, IGNORE_SENTINEL) for p in ignored]
    return make_ground_truth(annotations, size)


# ---------------------------------------------------------------------------
# matching


def test_identical_detections_all_match():
    polys = [_rect(10, 10, 30, 20), _rect(50, 50, 80, 60)]
    truth = _truth(polys)
    result = match_detections([(p, 0.9) for p in polys], truth)
    assert sorted(result.pairs) == [(0, 0), (1, 1)]
    assert result.unmatched_detections == []
    assert result.unmatched_truths == []


def test_no_detections_all_missed():
    truth = _truth([_rect(10, 10, 30, 20), _rect(50, 50, 80, 60)])
    result = match_detections([], truth)
    assert result.pairs == []
    assert result.unmatched_truths == [0, 1]


def test_higher_score_claims_contested_truth():
    target = _rect(10, 10, 30, 20)
    truth = _truth([target])
    near = _rect(11, 10, 31, 20)
    result = match_detections([(near, 0.5), (target, 0.9)], truth)
    assert result.pairs == [(1, 0)]
    assert result.unmatched_detections == [0]


def test_detection_over_ignore_region_not_counted():
    truth = _truth([_rect(10, 10, 30, 20)], ignored=[_rect(60, 60, 90, 80)])
    dets = [(_rect(60, 60, 90, 80), 0.8), (_rect(40, 40, 45, 45), 0.7)]
    result = match_detections(dets, truth)
    assert result.ignored_detections == [0]
    assert result.unmatched_detections == [1]
    assert result.unmatched_truths == [0]


def test_real_match_takes_precedence_over_ignore():
    box = _rect(10, 10, 30, 20)
    truth = _truth([box], ignored=[_rect(10, 10, 30, 20)])
    result = match_detections([(box, 0.9)], truth)
    assert result.pairs == [(0, 0)]
    assert result.ignored_detections == []


def test_matching_is_one_to_one():
    rng = np.random.default_rng(17)
    for _ in range(20):
        truth_polys = [_rect(x, y, x + 10, y + 8)
                       for x, y in rng.integers(0, 80, size=(5, 2))]
        truth = _truth(truth_polys)
        dets = [(_rect(x, y, x + 10, y + 8), float(s))
                for (x, y), s in zip(rng.integers(0, 80, size=(8, 2)),
                                     rng.random(8))]
        result = match_detections(dets, truth)
        det_ids = [d for d, _ in result.pairs]
        gt_ids = [g for _, g in result.pairs]
        assert len(det_ids) == len(set(det_ids))
        assert len(gt_ids) == len(set(gt_ids))
        counted = (len(result.pairs) + len(result.unmatched_detections)
                   + len(result.ignored_detections))
        assert counted == len(dets)


def _greedy_oracle(dets, truth_polys, threshold):
    """Independent matching implementation: explicit flag arrays."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    used = [False] * len(truth_polys)
    pairs = []
    for d in order:
        best, best_iou = -1, 0.0
        for g, tp in enumerate(truth_polys):
            if used[g]:
                continue
            iou = polygon_iou(dets[d][0], tp)
            if iou > best_iou:
                best, best_iou = g, iou
        if best >= 0 and best_iou >= threshold:
            used[best] = True
            pairs.append((d, best))
    return sorted(pairs)


def test_matching_agrees_with_independent_oracle():
    rng = np.random.default_rng(23)
    for _ in range(30):
        truth_polys = [_rect(x, y, x + 12, y + 9)
                       for x, y in rng.integers(0, 80, size=(4, 2))]
        truth = _truth(truth_polys)
        dets = [(_rect(x + rng.integers(0, 6), y, x + 12, y + 9), float(s))
                for (x, y), s in zip(rng.integers(0, 80, size=(7, 2)),
                                     rng.random(7))]
        got = sorted(match_detections(dets, truth).pairs)
        want = _greedy_oracle(dets, [i.polygon for i in truth.instances], 0.5)
        assert got == want


def test_duplicate_matched_detection_adds_one_false_positive():
    poly = _rect(10, 10, 30, 20)
    truth = _truth([poly])
    base = evaluate([[(poly, 0.9)]], [truth])
    doubled = evaluate([[(poly, 0.9), (poly, 0.8)]], [truth])
    assert doubled.false_positives == base.false_positives + 1
    assert doubled.precision < base.precision
    assert doubled.recall == base.recall


def test_match_threshold_validation():
    with pytest.raises(ValueError):
        match_detections([], _truth([_rect(0, 0, 5, 5)]), iou_threshold=0.0)


# ---------------------------------------------------------------------------
# score conventions


def test_prf_zero_conventions():
    assert prf(0, 0, 0) == (0.0, 0.0, 0.0)
    p, r, f = prf(0, 5, 0)
    assert (p, r, f) == (0.0, 0.0, 0.0)


def test_prf_simple_counts():
    p, r, f = prf(8, 2, 4)
    assert p == pytest.approx(0.8)
    assert r == pytest.approx(8 / 12)
    assert f == pytest.approx(2 * p * r / (p + r))


def test_prf_rejects_negative():
    with pytest.raises(ValueError):
        prf(-1, 0, 0)


def test_f_measure_reference_points():
    """Harmonic means of the three recall/precision pairs."""
    assert f_measure(76.2, 73.4) == pytest.approx(74.7, abs=0.15)
    assert f_measure(80.3, 73.4) == pytest.approx(76.8, abs=0.15)
    assert f_measure(84.2, 73.4) == pytest.approx(78.5, abs=0.15)


def test_f_between_min_and_max():
    rng = np.random.default_rng(31)
    for _ in range(100):
        p, r = rng.random(2) * 0.99 + 0.005
        f = f_measure(p, r)
        assert min(p, r) <= f <= max(p, r)


# ---------------------------------------------------------------------------
# corpus evaluation and table


def _report(tp, fp, fn):
    p, r, f = prf(tp, fp, fn)
    return EvalReport((), tp, fp, fn, p, r, f)


def test_evaluate_accumulates_across_images():
    poly = _rect(10, 10, 30, 20)
    far = _rect(60, 60, 80, 70)
    truths = [_truth([poly]), _truth([poly, far])]
    dets = [[(poly, 0.9)], [(poly, 0.8), (_rect(0, 0, 5, 5), 0.7)]]
    report = evaluate(dets, truths)
    assert report.true_positives == 2
    assert report.false_positives == 1
    assert report.misses == 1
    assert report.precision == pytest.approx(2 / 3)
    assert report.recall == pytest.approx(2 / 3)


def test_evaluate_length_mismatch():
    with pytest.raises(ValueError):
        evaluate([[]], [])


def test_ablation_rows_ordered_and_labeled():
    reports = {"baseline": _report(3, 3, 3), "tcm": _report(4, 2, 2),
               "tcm_rs": _report(5, 1, 1)}
    text = ablation_table(reports)
    lines = text.strip().splitlines()
    assert lines[1].startswith("Baseline")
    assert lines[2].startswith("+TCM ")
    assert lines[3].startswith("+TCM+RS")


def test_ablation_identical_reports_identical_rows():
    r = _report(4, 2, 2)
    text = ablation_table({"baseline": r, "tcm": r, "tcm_rs": r})
    rows = [line.split(None, 1)[1] for line in text.strip().splitlines()[1:]]
    assert rows[0] == rows[1] == rows[2]


def test_ablation_missing_row_named():
    with pytest.raises(ValueError, match="tcm_rs"):
        ablation_table({"baseline": _report(1, 1, 1), "tcm": _report(1, 1, 1)})


def test_ablation_unknown_row_rejected():
    full = {k: _report(1, 1, 1) for k in ("baseline", "tcm", "tcm_rs", "extra")}
    with pytest.raises(ValueError, match="extra"):
        ablation_table(full)


def test_key_values_round_trip():
    reports = {"baseline": _report(734, 229, 266), "tcm": _report(751, 184, 249),
               "tcm_rs": _report(757, 142, 243)}
    parsed = parse_key_values(ablation_key_values(reports))
    for key, report in reports.items():
        assert parsed[f"{key}.recall"] == round(report.recall, 4)
        assert parsed[f"{key}.precision"] == round(report.precision, 4)
        assert parsed[f"{key}.f_measure"] == round(report.f_measure, 4)


def test_parse_key_values_rejects_garbage():
    with pytest.raises(ValueError, match="line 1"):
        parse_key_values("not a key value line")
