"""Detection skeleton: pyramid geometry, anchor arithmetic, box coding
round-trips, RPN target assignment against a brute-force oracle, head
plumbing, and checkpoint integrity."""

import json

import numpy as np
import pytest
import torch

from textpyramid.detector import (
    CheckpointError,
    ModelConfig,
    PYRAMID_STRIDES,
    TextDetector,
    assign_rpn_targets,
    axis_nms,
    box_iou_matrix,
    clip_boxes,
    decode_box,
    encode_box,
    flatten_rpn_outputs,
    fpn_level_for_boxes,
    generate_anchors,
    load_checkpoint,
    pool_pyramid_features,
    proposals_from_rpn,
    save_checkpoint,
)

torch.set_num_threads(1)


def make_model(tcm=True, seed=0):
    return TextDetector(ModelConfig(tcm=tcm),
                        generator=torch.Generator().manual_seed(seed))


class TestBuildPyramid:
    def test_stage_sizes_at_128(self):
        model = make_model()
        stages, logits = model.build_pyramid(torch.zeros(1, 3, 128, 128))
        sizes = [tuple(s.shape[-2:]) for s in stages]
        assert sizes == [(32, 32), (16, 16), (8, 8), (4, 4)]
        assert all(s.shape[1] == 64 for s in stages)
        assert len(logits) == 4

    def test_s2_is_quarter_resolution_at_512(self):
        model = make_model(tcm=False)
        stages, _ = model.build_pyramid(torch.zeros(1, 3, 512, 512))
        assert tuple(stages[0].shape[-2:]) == (128, 128)

    def test_rejects_non_divisible_input(self):
        model = make_model()
        with pytest.raises(ValueError, match="pad"):
            model.build_pyramid(torch.zeros(1, 3, 100, 128))

    def test_zero_input_zero_bias_gives_zero_pyramid(self):
        """All biases start at zero, so a zero tensor flows through as zero
        even with attention enabled (gain times zero stays zero)."""
        model = make_model()
        stages, _ = model.build_pyramid(torch.zeros(1, 3, 64, 64))
        for s in stages:
            assert not s.detach().any()

    def test_tcm_disabled_has_no_branch(self):
        model = make_model(tcm=False)
        stages, logits = model.build_pyramid(torch.zeros(1, 3, 64, 64))
        assert logits == [] and model.context is None

    def test_parameter_budget(self):
        assert make_model(tcm=True).parameter_count() <= 200_000


class TestAnchors:
    def test_unit_ratio_square(self):
        anchors = generate_anchors([(1, 1)], strides=(4,), bases=(64.0,), ratios=(1.0,))
        x0, y0, x1, y1 = anchors[0]
        assert (x1 - x0) == 64.0 and (y1 - y0) == 64.0
        assert (x0 + x1) / 2 == 2.0 and (y0 + y1) / 2 == 2.0

    def test_one_fifth_ratio(self):
        anchors = generate_anchors([(1, 1)], strides=(4,), bases=(64.0,), ratios=(0.2,))
        w = anchors[0, 2] - anchors[0, 0]
        h = anchors[0, 3] - anchors[0, 1]
        assert abs(w / h - 0.2) < 1e-12
        assert abs(w * h - 64.0 * 64.0) < 1e-6
        assert abs(w - 64.0 * np.sqrt(0.2)) < 1e-9

    def test_count_is_locations_times_ratios(self):
        sizes = [(32, 32), (16, 16), (8, 8), (4, 4)]
        anchors = generate_anchors(sizes)
        want = sum(h * w for h, w in sizes) * 5
        assert anchors.shape == (want, 4)

    def test_area_invariant_across_ratios(self):
        anchors = generate_anchors([(2, 3)], strides=(8,), bases=(32.0,))
        areas = (anchors[:, 2] - anchors[:, 0]) * (anchors[:, 3] - anchors[:, 1])
        assert np.allclose(areas, 32.0 * 32.0, rtol=1e-12)

    def test_order_matches_logit_flattening(self):
        """Anchor n = (y·W + x)·A + a must line up with the (H, W, A)
        permutation of (A, H, W) logit maps."""
        h, w, a = 2, 3, 5
        anchors = generate_anchors([(h, w)], strides=(4,), bases=(16.0,))
        obj = torch.arange(a * h * w, dtype=torch.float32).reshape(1, a, h, w)
        dlt = torch.zeros(1, a * 4, h, w)
        flat, _ = flatten_rpn_outputs([obj], [dlt])
        for y in range(h):
            for x in range(w):
                for r in range(a):
                    n = (y * w + x) * a + r
                    assert float(flat[0, n]) == float(obj[0, r, y, x])
                    cx = (anchors[n, 0] + anchors[n, 2]) / 2
                    assert np.isclose(cx, (x + 0.5) * 4, atol=1e-12)


class TestBoxCoding:
    def test_identity(self):
        box = np.array([[10.0, 20.0, 50.0, 60.0]])
        assert np.allclose(encode_box(box, box), 0.0)

    def test_worked_example(self):
        anchor = np.array([[5.0, 5.0, 15.0, 15.0]])
        target = np.array([[5.0, 5.0, 25.0, 15.0]])
        deltas = encode_box(target, anchor)
        assert np.allclose(deltas, [[0.5, 0.0, np.log(2.0), 0.0]], atol=1e-12)

    def test_round_trip_random(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            a = rng.uniform(0, 100, size=(1, 2))
            anchor = np.concatenate([a, a + rng.uniform(2, 60, size=(1, 2))], axis=1)
            t = rng.uniform(0, 100, size=(1, 2))
            target = np.concatenate([t, t + rng.uniform(2, 60, size=(1, 2))], axis=1)
            back = decode_box(encode_box(target, anchor), anchor)
            assert np.abs(back - target).max() < 1e-9

    def test_rejects_empty_extent(self):
        bad = np.array([[10.0, 10.0, 10.0, 20.0]])
        good = np.array([[0.0, 0.0, 10.0, 10.0]])
        with pytest.raises(ValueError):
            encode_box(bad, good)


def brute_force_rpn_labels(anchors, gts, pos_iou, neg_iou):
    n = len(anchors)
    labels = np.full(n, -1)
    if len(gts) == 0:
        return np.zeros(n, dtype=int)
    for i in range(n):
        best = max(box_iou_matrix(anchors[i:i + 1], gts[j:j + 1])[0, 0]
                   for j in range(len(gts)))
        if best >= pos_iou:
            labels[i] = 1
        elif best < neg_iou:
            labels[i] = 0
    for j in range(len(gts)):
        ious = np.array([box_iou_matrix(anchors[i:i + 1], gts[j:j + 1])[0, 0]
                         for i in range(n)])
        if ious.max() > 0:
            for i in np.nonzero(ious == ious.max())[0]:
                labels[i] = 1
    return labels


class TestRpnTargets:
    def test_exact_anchor_positive_zero_deltas(self):
        anchors = np.array([[10.0, 10.0, 40.0, 30.0], [100.0, 100.0, 110.0, 110.0]])
        gts = np.array([[10.0, 10.0, 40.0, 30.0]])
        labels, deltas = assign_rpn_targets(anchors, gts)
        assert labels[0] == 1
        assert np.allclose(deltas[0], 0.0)

    def test_disjoint_anchor_negative(self):
        anchors = np.array([[0.0, 0.0, 10.0, 10.0]])
        gts = np.array([[50.0, 50.0, 80.0, 80.0]])
        labels, _ = assign_rpn_targets(anchors, gts)
        assert labels[0] == 0

    def test_no_gt_all_negative(self):
        anchors = np.array([[0.0, 0.0, 10.0, 10.0], [5.0, 5.0, 25.0, 25.0]])
        labels, deltas = assign_rpn_targets(anchors, np.zeros((0, 4)))
        assert (labels == 0).all() and not deltas.any()

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(17)
        for _ in range(30):
            na, ng = int(rng.integers(5, 40)), int(rng.integers(1, 5))
            a0 = rng.uniform(0, 80, size=(na, 2))
            anchors = np.concatenate([a0, a0 + rng.uniform(4, 40, size=(na, 2))], axis=1)
            g0 = rng.uniform(0, 80, size=(ng, 2))
            gts = np.concatenate([g0, g0 + rng.uniform(4, 40, size=(ng, 2))], axis=1)
            labels, _ = assign_rpn_targets(anchors, gts, 0.7, 0.3)
            want = brute_force_rpn_labels(anchors, gts, 0.7, 0.3)
            assert np.array_equal(labels, want)


class TestProposals:
    def test_axis_nms_suppresses_duplicates(self):
        boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10], [50, 50, 60, 60]], dtype=float)
        keep = axis_nms(boxes, np.array([0.9, 0.8, 0.7]), 0.5)
        assert list(keep) == [0, 2]

    def test_clip_boxes(self):
        boxes = np.array([[-5.0, -5.0, 200.0, 90.0]])
        out = clip_boxes(boxes, 100, 150)
        assert np.array_equal(out, [[0.0, 0.0, 150.0, 90.0]])

    def test_proposals_respect_top_m_and_frame(self):
        cfg = ModelConfig(rpn_post_nms_top_m=10)
        sizes = [(8, 8), (4, 4), (2, 2), (1, 1)]
        anchors = generate_anchors(sizes, bases=cfg.anchor_bases,
                                   ratios=cfg.anchor_ratios)
        g = torch.Generator().manual_seed(5)
        obj = torch.randn(len(anchors), generator=g)
        deltas = torch.randn(len(anchors), 4, generator=g) * 0.2
        boxes, scores = proposals_from_rpn(anchors, obj, deltas, (32, 32), cfg)
        assert len(boxes) <= 10
        assert (boxes[:, 0] >= 0).all() and (boxes[:, 2] <= 32).all()
        assert (boxes[:, 1] >= 0).all() and (boxes[:, 3] <= 32).all()
        assert (np.diff(scores) <= 1e-12).all()


class TestLevelAssignment:
    def test_tiny_box_goes_to_finest_stage(self):
        assert fpn_level_for_boxes(np.array([[0, 0, 24, 24]]))[0] == 0

    def test_huge_box_goes_to_coarsest_stage(self):
        assert fpn_level_for_boxes(np.array([[0, 0, 512, 512]]))[0] == 3

    def test_canonical_box_goes_to_s4(self):
        assert fpn_level_for_boxes(np.array([[0, 0, 224, 224]]))[0] == 2

    def test_pooling_routes_by_level(self):
        """Features pooled for a tiny box come from S2, for a huge one
        from S5: zeroing the other stages must not change each output."""
        g = torch.Generator().manual_seed(7)
        pyramid = [torch.randn(1, 4, 128 // s, 128 // s, generator=g)
                   for s in PYRAMID_STRIDES]
        boxes = np.array([[4.0, 4.0, 30.0, 30.0], [0.0, 0.0, 500.0, 500.0]])
        full = pool_pyramid_features(pyramid, boxes, 7)
        only_s2 = [pyramid[0]] + [torch.zeros_like(p) for p in pyramid[1:]]
        assert torch.allclose(pool_pyramid_features(only_s2, boxes, 7)[0], full[0])
        only_s5 = [torch.zeros_like(p) for p in pyramid[:3]] + [pyramid[3]]
        assert torch.allclose(pool_pyramid_features(only_s5, boxes, 7)[1], full[1])


class TestHeads:
    def test_empty_proposals_empty_outputs(self):
        model = make_model()
        stages, _ = model.build_pyramid(torch.zeros(1, 3, 64, 64))
        cls, deltas, masks = model.rcnn_heads(stages, np.zeros((0, 4)))
        assert cls.shape == (0, 2) and deltas.shape == (0, 4)
        assert masks.shape == (0, 1, 14, 14)

    def test_permutation_equivariance(self):
        model = make_model()
        g = torch.Generator().manual_seed(3)
        image = torch.randn(1, 3, 64, 64, generator=g)
        stages, _ = model.build_pyramid(image)
        boxes = np.array([[2.0, 2.0, 20.0, 14.0],
                          [10.0, 20.0, 60.0, 50.0],
                          [0.0, 0.0, 63.0, 63.0]])
        perm = [2, 0, 1]
        with torch.no_grad():
            cls_a, dlt_a, msk_a = model.rcnn_heads(stages, boxes)
            cls_b, dlt_b, msk_b = model.rcnn_heads(stages, boxes[perm])
        assert torch.allclose(cls_b, cls_a[perm], atol=1e-6)
        assert torch.allclose(dlt_b, dlt_a[perm], atol=1e-6)
        assert torch.allclose(msk_b, msk_a[perm], atol=1e-6)

    def test_shared_context_branch_across_stages(self):
        model = make_model()
        branch_params = {id(p) for p in model.context.parameters()}
        assert len(branch_params) == 6  # three conv layers, weight + bias each


class TestCheckpoint:
    def test_round_trip_identical(self, tmp_path):
        model = make_model(seed=11)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.config == model.config
        for (na, pa), (nb, pb) in zip(sorted(model.state_dict().items()),
                                      sorted(loaded.state_dict().items())):
            assert na == nb and torch.equal(pa, pb)

    def test_byte_deterministic(self, tmp_path):
        model = make_model(seed=4)
        save_checkpoint(model, tmp_path / "a.ckpt")
        save_checkpoint(model, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_tampered_config_hash_rejected(self, tmp_path):
        model = make_model()
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        blob = path.read_bytes()
        header_len = int.from_bytes(blob[:8], "little")
        header = json.loads(blob[8:8 + header_len])
        header["config"]["channels"] = 32
        new = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        tampered = len(new).to_bytes(8, "little") + new + blob[8 + header_len:]
        path.write_bytes(tampered)
        with pytest.raises(CheckpointError, match="hash"):
            load_checkpoint(path)
