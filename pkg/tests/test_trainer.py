"""Trainer tests: loss assembly, schedule, augmentation, and the loop."""

import math

import numpy as np
import pytest
import torch

import textpyramid.trainer as trainer_mod
from textpyramid.dataio import (
    Annotation,
    SceneSpec,
    generate_scene,
    make_ground_truth,
)
from textpyramid.detector import ModelConfig, TextDetector, load_checkpoint
from textpyramid.geometry import Polygon
from textpyramid.trainer import (
    TrainConfig,
    TrainingDiverged,
    _image_losses,
    augment,
    epochs_to_iters,
    flip_horizontal,
    pad_to_multiple,
    poly_lr,
    resize_sample,
    total_loss,
    train,
)

torch.set_num_threads(1)


# ---------------------------------------------------------------------------
# config validation


@pytest.mark.parametrize("kwargs", [
    {"lambda_gts": -0.1},
    {"base_lr": 0.0},
    {"poly_power": 0.0},
    {"max_iter": 0},
    {"batch_size": 0},
    {"scales": ()},
    {"flip_prob": 1.5},
])
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_epochs_to_iters():
    assert epochs_to_iters(40, 500, 4) == 5000
    assert epochs_to_iters(1, 5, 2) == 3
    assert epochs_to_iters(2, 4, 4) == 2


# ---------------------------------------------------------------------------
# total loss


def _scalars(*values):
    return [torch.tensor(float(v), dtype=torch.float64) for v in values]


def test_total_loss_zero_components():
    config = TrainConfig(max_iter=10)
    assert float(total_loss(*_scalars(0, 0, 0, 0, 0), config)) == 0.0


def test_total_loss_weighted_sum():
    config = TrainConfig(max_iter=10, lambda_cls=2.0, lambda_box=3.0,
                         lambda_mask=0.5, lambda_gts=4.0)
    got = float(total_loss(*_scalars(1, 1, 1, 1, 1), config))
    assert got == pytest.approx(1 + 2 + 3 + 0.5 + 4, abs=1e-12)


def test_total_loss_linear_in_seg_weight():
    """Doubling the segmentation weight adds exactly one more L_gts."""
    parts = _scalars(0.3, 0.7, 0.11, 0.45, 0.9)
    one = TrainConfig(max_iter=10, lambda_gts=1.0)
    two = TrainConfig(max_iter=10, lambda_gts=2.0)
    delta = float(total_loss(*parts, two)) - float(total_loss(*parts, one))
    assert delta == pytest.approx(0.9, abs=1e-12)


def test_total_loss_linear_in_each_weight():
    parts = _scalars(0.25, 0.5, 0.75, 1.25, 1.5)
    base = TrainConfig(max_iter=10)
    for name, component in [("lambda_cls", 0.5), ("lambda_box", 0.75),
                            ("lambda_mask", 1.25), ("lambda_gts", 1.5)]:
        bumped = TrainConfig(max_iter=10, **{name: 3.0})
        delta = float(total_loss(*parts, bumped)) - float(total_loss(*parts, base))
        assert delta == pytest.approx(2.0 * component, abs=1e-12)


def test_total_loss_names_nonfinite_term():
    parts = _scalars(0.1, 0.1, float("nan"), 0.1, 0.1)
    with pytest.raises(TrainingDiverged, match="L_box"):
        total_loss(*parts, TrainConfig(max_iter=10))
    parts = _scalars(0.1, 0.1, 0.1, float("inf"), 0.1)
    with pytest.raises(TrainingDiverged, match="L_mask"):
        total_loss(*parts, TrainConfig(max_iter=10))


# ---------------------------------------------------------------------------
# learning-rate schedule


def test_poly_lr_endpoints_exact():
    config = TrainConfig(base_lr=2e-3, max_iter=2000, poly_power=0.9)
    assert poly_lr(0, config) == 2e-3
    assert poly_lr(2000, config) == 0.0


def test_poly_lr_midpoint():
    config = TrainConfig(base_lr=2e-3, max_iter=2000, poly_power=0.9)
    assert poly_lr(1000, config) == pytest.approx(2e-3 * 0.5 ** 0.9, rel=1e-12)
    assert poly_lr(1000, config) == pytest.approx(1.0718e-3, rel=1e-4)


def test_poly_lr_strictly_decreasing():
    config = TrainConfig(base_lr=1e-2, max_iter=137, poly_power=0.9)
    values = [poly_lr(i, config) for i in range(138)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_poly_lr_rejects_out_of_range():
    config = TrainConfig(max_iter=100)
    with pytest.raises(ValueError):
        poly_lr(101, config)
    with pytest.raises(ValueError):
        poly_lr(-1, config)


# ---------------------------------------------------------------------------
# augmentation


def _triangle_sample(size=64):
    image = np.zeros((size, size, 3), dtype=np.uint8)
    image[:, : size // 8] = 255
    poly = Polygon(np.array([[8.0, 8.0], [24.0, 10.0], [12.0, 30.0]]))
    return image, [Annotation(poly, "abc")]


def test_resize_scales_coordinates_exactly():
    image, anns = _triangle_sample(64)
    resized, scaled = resize_sample(image, anns, 96)
    assert resized.shape == (96, 96, 3)
    factor = 96 / 64
    assert np.array_equal(scaled[0].polygon.vertices,
                          anns[0].polygon.vertices * factor)


def test_resize_non_square_uses_short_edge():
    image = np.zeros((64, 128, 3), dtype=np.uint8)
    anns = [Annotation(Polygon(np.array([[10.0, 10.0], [40.0, 12.0], [20.0, 30.0]])), "x")]
    resized, scaled = resize_sample(image, anns, 96)
    assert resized.shape == (96, 192, 3)
    assert np.array_equal(scaled[0].polygon.vertices,
                          anns[0].polygon.vertices * 1.5)


def test_flip_is_an_involution():
    image, anns = _triangle_sample(64)
    once_img, once = flip_horizontal(image, anns)
    twice_img, twice = flip_horizontal(once_img, once)
    assert np.array_equal(twice_img, image)
    assert np.allclose(twice[0].polygon.vertices, anns[0].polygon.vertices,
                       atol=1e-9)


def test_flip_mirrors_x():
    image, anns = _triangle_sample(64)
    _, flipped = flip_horizontal(image, anns)
    original_x = sorted(anns[0].polygon.vertices[:, 0])
    mirrored_x = sorted(64 - flipped[0].polygon.vertices[:, 0])
    assert np.allclose(original_x, mirrored_x)


def test_augment_draw_frequencies():
    """10^4 draws: flips near 1/2 and each scale near 1/3."""
    image, anns = _triangle_sample(64)
    config = TrainConfig(max_iter=10)
    rng = np.random.default_rng(123)
    flips = 0
    scale_counts = {s: 0 for s in config.scales}
    trials = 10_000
    for _ in range(trials):
        out, _ = augment(image, anns, config, rng)
        size = out.shape[0]
        scale_counts[size] += 1
        left = out[:, : size // 8].mean()
        right = out[:, -size // 8:].mean()
        if right > left:
            flips += 1
    assert 0.49 <= flips / trials <= 0.51
    for s, count in scale_counts.items():
        assert abs(count / trials - 1 / 3) <= 0.02, (s, count)


def test_pad_to_multiple():
    image = np.full((112, 112, 3), 9, dtype=np.uint8)
    padded = pad_to_multiple(image)
    assert padded.shape == (128, 128, 3)
    assert np.array_equal(padded[:112, :112], image)
    assert padded[112:].sum() == 0 and padded[:, 112:].sum() == 0
    exact = np.zeros((128, 64, 3), dtype=np.uint8)
    assert pad_to_multiple(exact) is exact


# ---------------------------------------------------------------------------
# gradients reach every branch


def test_gradients_reach_context_and_rpn():
    config = TrainConfig(max_iter=10)
    model = TextDetector(ModelConfig(),
                         generator=torch.Generator().manual_seed(1))
    image, anns = generate_scene(SceneSpec(seed=3))
    image = pad_to_multiple(image)
    gt = make_ground_truth(anns, image.shape[:2])
    losses = _image_losses(model, image, gt, {}, config,
                           np.random.default_rng(0))
    loss = total_loss(losses["L_rpn"], losses["L_cls"], losses["L_box"],
                      losses["L_mask"], losses["L_gts"], config)
    loss.backward()
    context_grad = model.context.conv1.weight.grad
    rpn_grad = model.rpn.conv.weight.grad
    assert context_grad is not None and float(context_grad.abs().sum()) > 0
    assert rpn_grad is not None and float(rpn_grad.abs().sum()) > 0
    for name, p in model.named_parameters():
        if p.grad is not None:
            assert torch.isfinite(p.grad).all(), name


# ---------------------------------------------------------------------------
# the loop


def _tiny_dataset(n, image_size=64):
    return [generate_scene(SceneSpec(seed=s, image_size=image_size))
            for s in range(n)]


def test_train_rejects_empty_dataset():
    with pytest.raises(ValueError):
        train([], TrainConfig(max_iter=1), ModelConfig())


def test_train_is_deterministic(tmp_path):
    """Same seed and config twice: identical losses and checkpoint bytes."""
    samples = _tiny_dataset(4)
    tconfig = TrainConfig(max_iter=6, batch_size=2, scales=(64,),
                          log_interval=1, seed=11)
    mconfig = ModelConfig()
    first = train(samples, tconfig, mconfig, out_dir=tmp_path / "a")
    second = train(samples, tconfig, mconfig, out_dir=tmp_path / "b")
    assert first.metrics_lines == second.metrics_lines
    assert first.final_loss == second.final_loss
    a = (tmp_path / "a" / "checkpoint.ckpt").read_bytes()
    b = (tmp_path / "b" / "checkpoint.ckpt").read_bytes()
    assert a == b


def test_train_seed_changes_outcome():
    samples = _tiny_dataset(4)
    mconfig = ModelConfig()
    one = train(samples, TrainConfig(max_iter=3, batch_size=2, scales=(64,),
                                     seed=1), mconfig)
    two = train(samples, TrainConfig(max_iter=3, batch_size=2, scales=(64,),
                                     seed=2), mconfig)
    assert one.final_loss != two.final_loss


def test_train_metrics_line_format():
    samples = _tiny_dataset(2)
    result = train(samples, TrainConfig(max_iter=3, batch_size=1, scales=(64,),
                                        log_interval=1, seed=0), ModelConfig())
    assert len(result.metrics_lines) == 3
    config = TrainConfig(max_iter=3, batch_size=1, scales=(64,), seed=0)
    for i, line in enumerate(result.metrics_lines):
        fields = line.split(", ")
        assert len(fields) == 8
        assert int(fields[0]) == i
        assert float(fields[1]) == pytest.approx(poly_lr(i, config), rel=1e-6)
        for value in fields[2:]:
            assert math.isfinite(float(value))


def test_train_without_context_branch_logs_zero_seg_loss():
    samples = _tiny_dataset(2)
    result = train(samples, TrainConfig(max_iter=2, batch_size=1, scales=(64,),
                                        log_interval=1, seed=0),
                   ModelConfig(tcm=False))
    for line in result.metrics_lines:
        assert float(line.split(", ")[-1]) == 0.0


def test_train_writes_loadable_checkpoint(tmp_path):
    samples = _tiny_dataset(2)
    mconfig = ModelConfig()
    result = train(samples, TrainConfig(max_iter=2, batch_size=1, scales=(64,),
                                        seed=0), mconfig, out_dir=tmp_path)
    assert result.checkpoint_path is not None
    reloaded = load_checkpoint(result.checkpoint_path)
    assert reloaded.config == mconfig
    got = dict(reloaded.named_parameters())
    want = dict(result.model.named_parameters())
    for name in want:
        assert torch.equal(got[name], want[name]), name


def test_train_divergence_aborts_with_named_term(monkeypatch):
    samples = _tiny_dataset(2)

    def poisoned(model, image, gt, cache, config, rng):
        bad = torch.tensor(float("nan"), requires_grad=True)
        zero = torch.tensor(0.0, requires_grad=True)
        return {"L_rpn": zero, "L_cls": bad, "L_box": zero,
                "L_mask": zero, "L_gts": zero}

    monkeypatch.setattr(trainer_mod, "_image_losses", poisoned)
    with pytest.raises(TrainingDiverged, match="L_cls") as info:
        train(samples, TrainConfig(max_iter=2, batch_size=1, scales=(64,),
                                   seed=0), ModelConfig())
    assert info.value.iteration == 0


def test_train_loss_descends():
    """A short run on a small synthetic set ends below its starting loss."""
    samples = _tiny_dataset(20, image_size=128)
    tconfig = TrainConfig(max_iter=200, batch_size=2, scales=(96,),
                          log_interval=1, seed=0)
    result = train(samples, tconfig, ModelConfig())
    first = float(result.metrics_lines[0].split(", ")[2])
    last = float(result.metrics_lines[-1].split(", ")[2])
    assert last < first
    # the tail should also beat the head on average, not just pointwise
    head = np.mean([float(l.split(", ")[2]) for l in result.metrics_lines[:10]])
    tail = np.mean([float(l.split(", ")[2]) for l in result.metrics_lines[-10:]])
    assert tail < head
