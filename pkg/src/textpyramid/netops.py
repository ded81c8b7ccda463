"""Differentiable operator toolkit for the detector.

Every operator the model uses is a thin, explicitly-shaped function over
torch tensors, registered in MODEL_OPERATORS together with a case factory so
the finite-difference harness can verify its gradient.  Feature maps are
(batch, channels, height, width).  Verification runs in float64; training
runs in float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch

__all__ = [
    "ShapeError",
    "conv2d",
    "linear",
    "relu",
    "sigmoid",
    "exp",
    "channel_softmax",
    "bilinear_resize",
    "roi_align",
    "roi_align_many",
    "smooth_l1",
    "bce_with_logits",
    "softmax_cross_entropy",
    "ConvLayer",
    "LinearLayer",
    "OperatorSpec",
    "MODEL_OPERATORS",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes that cannot be combined."""


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, padding: int = 0) -> torch.Tensor:
    """Cross-correlation; spatial output floor((in + 2 pad - k) / stride) + 1."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(
            f"conv2d needs 4-D input and kernel, got {tuple(x.shape)} and {tuple(weight.shape)}"
        )
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input {tuple(x.shape)} vs kernel {tuple(weight.shape)}"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    return torch.nn.functional.conv2d(x, weight, bias, stride=stride, padding=padding)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"linear mismatch: input {tuple(x.shape)} vs weight {tuple(weight.shape)}"
        )
    out = x @ weight.transpose(0, 1)
    return out if bias is None else out + bias


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp(x, min=0)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def exp(x: torch.Tensor) -> torch.Tensor:
    return torch.exp(x)


def channel_softmax(x: torch.Tensor) -> torch.Tensor:
    """Per-pixel softmax over the channel axis, stabilized by max subtraction."""
    if x.ndim != 4 or x.shape[1] < 2:
        raise ShapeError(f"channel_softmax needs (B, C>=2, H, W), got {tuple(x.shape)}")
    z = x - x.max(dim=1, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=1, keepdim=True)


def bilinear_resize(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear interpolation without corner alignment; constants stay constant."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be >= 1, got {out_h} x {out_w}")
    if x.shape[-2:] == (out_h, out_w):
        return x
    return torch.nn.functional.interpolate(
        x, size=(out_h, out_w), mode="bilinear", align_corners=False
    )


def _bilinear_sample(features: torch.Tensor, px: torch.Tensor, py: torch.Tensor) -> torch.Tensor:
    """Sample (C, H, W) features at continuous positions given in pixel-center
    units (position p lands on pixel index p exactly at p integral); borders
    are clamped.  px, py share shape (N, A, B); result is (N, C, A, B).
    """
    _, h, w = features.shape
    px = px.clamp(0.0, w - 1.0)
    py = py.clamp(0.0, h - 1.0)
    x0 = px.floor().long().clamp(0, w - 1)
    y0 = py.floor().long().clamp(0, h - 1)
    x1 = (x0 + 1).clamp(0, w - 1)
    y1 = (y0 + 1).clamp(0, h - 1)
    fx = (px - x0.to(px.dtype)).unsqueeze(1)
    fy = (py - y0.to(py.dtype)).unsqueeze(1)
    v00 = features[:, y0, x0].permute(1, 0, 2, 3)
    v01 = features[:, y0, x1].permute(1, 0, 2, 3)
    v10 = features[:, y1, x0].permute(1, 0, 2, 3)
    v11 = features[:, y1, x1].permute(1, 0, 2, 3)
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy


def roi_align_many(features: torch.Tensor, rois: torch.Tensor, stride: float,
                   out_size: int) -> torch.Tensor:
    """Pool N regions from one image's (1, C, H, W) features into
    (N, C, out, out) maps.  Each output bin averages a 2x2 grid of bilinear
    samples; rois are (N, 4) arrays of x0, y0, x1, y1 in input-image pixels.
    """
    if features.ndim != 4 or features.shape[0] != 1:
        raise ShapeError(f"expected (1, C, H, W) features, got {tuple(features.shape)}")
    if rois.ndim != 2 or rois.shape[1] != 4:
        raise ShapeError(f"expected (N, 4) rois, got {tuple(rois.shape)}")
    if out_size < 1:
        raise ValueError(f"out_size must be >= 1, got {out_size}")
    fmap = features[0]
    _, h, w = fmap.shape
    rois = rois.to(features.dtype) / stride
    if ((rois[:, 2] <= rois[:, 0]) | (rois[:, 3] <= rois[:, 1])).any():
        raise ValueError("roi has non-positive extent")
    if ((rois[:, 2] <= 0) | (rois[:, 0] >= w) | (rois[:, 3] <= 0) | (rois[:, 1] >= h)).any():
        raise ValueError("roi lies fully outside the feature map")
    n = rois.shape[0]
    bin_w = (rois[:, 2] - rois[:, 0]) / out_size
    bin_h = (rois[:, 3] - rois[:, 1]) / out_size
    # two sample offsets per bin axis, at the 2x2 subcell centers
    steps = torch.arange(out_size, dtype=features.dtype, device=features.device)
    offs = torch.tensor([0.25, 0.75], dtype=features.dtype, device=features.device)
    grid = (steps[:, None] + offs[None, :]).reshape(-1)  # (out*2,)
    px = rois[:, 0, None] + grid[None, :] * bin_w[:, None] - 0.5
    py = rois[:, 1, None] + grid[None, :] * bin_h[:, None] - 0.5
    pxx = px[:, None, :].expand(n, out_size * 2, out_size * 2)
    pyy = py[:, :, None].expand(n, out_size * 2, out_size * 2)
    sampled = _bilinear_sample(fmap, pxx, pyy)  # (N, C, out*2, out*2)
    c = sampled.shape[1]
    pooled = sampled.reshape(n, c, out_size, 2, out_size, 2).mean(dim=(3, 5))
    return pooled


def roi_align(features: torch.Tensor, roi, stride: float, out_size: int) -> torch.Tensor:
    """Single-region pooling; `roi` is AxisRect-like with x_min..y_max."""
    box = torch.tensor(
        [[float(roi.x_min), float(roi.y_min), float(roi.x_max), float(roi.y_max)]],
        dtype=features.dtype, device=features.device,
    )
    return roi_align_many(features, box, stride, out_size)[0]


def smooth_l1(pred: torch.Tensor, target: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Elementwise smooth-L1 (quadratic inside beta, linear outside)."""
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1 mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = torch.abs(pred - target)
    return torch.where(diff < beta, 0.5 * diff * diff / beta, diff - 0.5 * beta)


def bce_with_logits(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Elementwise binary cross-entropy on logits, computed stably."""
    if logits.shape != targets.shape:
        raise ShapeError(
            f"bce_with_logits mismatch: {tuple(logits.shape)} vs {tuple(targets.shape)}"
        )
    return torch.clamp(logits, min=0) - logits * targets + torch.log1p(
        torch.exp(-torch.abs(logits))
    )


def softmax_cross_entropy(logits: torch.Tensor, labels: torch.Tensor,
                          weight_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean negative log-likelihood under a softmax over axis 1.

    `logits` is (N, C) or (B, C, H, W); `labels` holds integer classes of the
    matching shape without the class axis.  `weight_mask`, when given, scales
    each position's contribution and the mean is taken over its total weight.
    """
    if logits.shape[0] != labels.shape[0] or logits.ndim != labels.ndim + 1:
        raise ShapeError(
            f"softmax_cross_entropy mismatch: {tuple(logits.shape)} vs {tuple(labels.shape)}"
        )
    z = logits - logits.max(dim=1, keepdim=True).values
    log_probs = z - torch.log(torch.exp(z).sum(dim=1, keepdim=True))
    picked = torch.gather(log_probs, 1, labels.unsqueeze(1).long()).squeeze(1)
    if weight_mask is None:
        return -picked.mean()
    total = weight_mask.sum()
    if float(total) <= 0:
        return logits.sum() * 0.0
    return -(picked * weight_mask).sum() / total


class ConvLayer(torch.nn.Module):
    """Convolution with explicit, generator-driven initialization."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 padding: int = 0, *, init: str, generator: torch.Generator) -> None:
        super().__init__()
        weight = torch.empty(out_ch, in_ch, kernel, kernel)
        fan_in = in_ch * kernel * kernel
        if init == "gaussian":
            std = 1e-3
        elif init == "kaiming":
            std = math.sqrt(2.0 / fan_in)
        else:
            raise ValueError(f"unknown init rule {init!r}")
        with torch.no_grad():
            weight.normal_(0.0, std, generator=generator)
        self.weight = torch.nn.Parameter(weight)
        self.bias = torch.nn.Parameter(torch.zeros(out_ch))
        self.stride = stride
        self.padding = padding

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class LinearLayer(torch.nn.Module):
    """Fully-connected layer with generator-driven Gaussian init."""

    def __init__(self, in_features: int, out_features: int, *, std: float = 1e-3,
                 generator: torch.Generator) -> None:
        super().__init__()
        weight = torch.empty(out_features, in_features)
        with torch.no_grad():
            weight.normal_(0.0, std, generator=generator)
        self.weight = torch.nn.Parameter(weight)
        self.bias = torch.nn.Parameter(torch.zeros(out_features))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return linear(x, self.weight, self.bias)


@dataclass(frozen=True)
class OperatorSpec:
    """Registry row tying an operator to a verifiable gradient test case."""

    name: str
    shape_note: str
    init_rule: str
    make_case: Callable[[int], tuple[Callable, tuple[torch.Tensor, ...]]]


def _gen(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def _rand(shape, seed, scale=1.0, offset=0.0):
    return (torch.randn(shape, generator=_gen(seed), dtype=torch.float64) * scale
            + offset)


def _away_from_zero(x: torch.Tensor, margin: float = 5e-3) -> torch.Tensor:
    sign = torch.where(x >= 0, 1.0, -1.0)
    return torch.where(x.abs() < margin, sign * margin, x)


def _conv_case(seed):
    x = _rand((1, 2, 5, 5), seed)
    w = _rand((3, 2, 3, 3), seed + 1)
    b = _rand((3,), seed + 2)
    return (lambda xi, wi, bi: conv2d(xi, wi, bi, stride=1, padding=1), (x, w, b))


def _linear_case(seed):
    x = _rand((4, 6), seed)
    w = _rand((3, 6), seed + 1)
    b = _rand((3,), seed + 2)
    return (linear, (x, w, b))


def _relu_case(seed):
    return (relu, (_away_from_zero(_rand((2, 3, 4, 4), seed)),))


def _sigmoid_case(seed):
    return (sigmoid, (_rand((2, 3, 4, 4), seed),))


def _exp_case(seed):
    return (exp, (_rand((2, 3, 4, 4), seed, scale=0.5),))


def _softmax_case(seed):
    return (channel_softmax, (_rand((1, 3, 4, 4), seed),))


def _resize_case(seed):
    return (lambda x: bilinear_resize(x, 7, 9), (_rand((1, 2, 4, 5), seed),))


def _roi_case(seed):
    x = _rand((1, 2, 8, 8), seed)
    # fractional roi away from sampling kinks
    rois = torch.tensor([[3.3, 2.7, 21.9, 17.1], [1.1, 1.3, 10.7, 9.9]],
                        dtype=torch.float64)
    return (lambda xi: roi_align_many(xi, rois, stride=4.0, out_size=7), (x,))


def _smooth_l1_case(seed):
    pred = _rand((3, 4), seed)
    target = pred + _away_from_zero(_rand((3, 4), seed + 1, scale=0.4), margin=5e-3)
    # keep |pred - target| away from the beta=1 kink
    diff = (pred - target).abs()
    target = torch.where((diff - 1.0).abs() < 5e-3, target + 0.05, target)
    return (lambda p: smooth_l1(p, target).sum(), (pred,))


def _bce_case(seed):
    logits = _rand((3, 4), seed)
    targets = (torch.rand((3, 4), generator=_gen(seed + 1), dtype=torch.float64) > 0.5).double()
    return (lambda z: bce_with_logits(z, targets).sum(), (logits,))


def _ce_case(seed):
    logits = _rand((1, 2, 4, 4), seed)
    labels = (torch.rand((1, 4, 4), generator=_gen(seed + 1)) > 0.5).long()
    return (lambda z: softmax_cross_entropy(z, labels), (logits,))


def _attention_branch(x, w1, b1, w2, b2, w3, b3):
    """conv-relu-conv-relu-conv-softmax-exp, the shared context branch."""
    h = relu(conv2d(x, w1, b1, padding=1))
    h = relu(conv2d(h, w2, b2, padding=1))
    return exp(channel_softmax(conv2d(h, w3, b3)))


def _branch_case(seed):
    # resample until every pre-relu activation clears the kink margin
    for sub in range(64):
        s = seed * 1000 + sub
        x = _rand((1, 3, 5, 5), s)
        w1, b1 = _rand((4, 3, 3, 3), s + 1), _rand((4,), s + 2)
        w2, b2 = _rand((4, 4, 3, 3), s + 3), _rand((4,), s + 4)
        w3, b3 = _rand((2, 4, 1, 1), s + 5), _rand((2,), s + 6)
        with torch.no_grad():
            a1 = conv2d(x, w1, b1, padding=1)
            a2 = conv2d(relu(a1), w2, b2, padding=1)
        if a1.abs().min() > 1e-2 and a2.abs().min() > 1e-2:
            return (_attention_branch, (x, w1, b1, w2, b2, w3, b3))
    raise RuntimeError("no kink-free sample found")


MODEL_OPERATORS: list[OperatorSpec] = [
    OperatorSpec("conv2d", "(B,Ci,H,W) x (Co,Ci,k,k) -> (B,Co,H',W')", "kaiming-or-gaussian", _conv_case),
    OperatorSpec("linear", "(N,Fi) x (Fo,Fi) -> (N,Fo)", "gaussian-0.001", _linear_case),
    OperatorSpec("relu", "elementwise", "none", _relu_case),
    OperatorSpec("sigmoid", "elementwise", "none", _sigmoid_case),
    OperatorSpec("exp", "elementwise", "none", _exp_case),
    OperatorSpec("channel_softmax", "(B,C,H,W) -> same, sums to 1 over C", "none", _softmax_case),
    OperatorSpec("bilinear_resize", "(B,C,H,W) -> (B,C,H2,W2)", "none", _resize_case),
    OperatorSpec("roi_align", "(1,C,H,W) x (N,4) -> (N,C,s,s)", "none", _roi_case),
    OperatorSpec("smooth_l1", "elementwise penalty", "none", _smooth_l1_case),
    OperatorSpec("bce_with_logits", "elementwise penalty", "none", _bce_case),
    OperatorSpec("softmax_cross_entropy", "(B,C,H,W) x (B,H,W) -> scalar", "none", _ce_case),
    OperatorSpec("attention_branch", "conv-relu-conv-relu-conv-softmax-exp", "gaussian-0.001", _branch_case),
]


def grad_check(fn: Callable, inputs: tuple[torch.Tensor, ...],
               tolerance: float = 1e-4, step: float = 1e-5,
               cotangent_seed: int = 0) -> float:
    """Max relative error between the analytic gradient and central finite
    differences, taken over every coordinate of every input.

    The output is contracted to a scalar with a fixed random cotangent so a
    single backward pass covers arbitrary output shapes.  `tolerance` is the
    caller's pass bound; it is returned untouched in comparisons, not
    enforced here.
    """
    del tolerance
    leaves = [t.detach().to(torch.float64).requires_grad_(True) for t in inputs]
    out = fn(*leaves)
    cot = torch.randn(out.shape, generator=_gen(cotangent_seed), dtype=torch.float64)
    scalar = (out * cot).sum()
    grads = torch.autograd.grad(scalar, leaves, allow_unused=True)

    def eval_at(vals) -> float:
        with torch.no_grad():
            return float((fn(*vals) * cot).sum())

    max_err = 0.0
    for idx, grad in enumerate(grads):
        if grad is None:
            continue
        base = leaves[idx].detach().clone()
        flat = base.reshape(-1)
        vals = [v.detach() for v in leaves]
        vals[idx] = base
        gflat = grad.reshape(-1)
        for k in range(flat.numel()):
            orig = float(flat[k])
            flat[k] = orig + step
            hi = eval_at(vals)
            flat[k] = orig - step
            lo = eval_at(vals)
            flat[k] = orig
            fd = (hi - lo) / (2.0 * step)
            analytic = float(gflat[k])
            err = abs(analytic - fd) / max(1.0, abs(analytic), abs(fd))
            max_err = max(max_err, err)
    return max_err
