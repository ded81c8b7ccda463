"""Text context module: a shared per-stage branch producing a global text
feature and a 2-channel text/non-text saliency map, the multiplicative
attention and additive fusion built on them, and the global segmentation map
with its loss.

One branch instance serves every pyramid stage, so its weights are shared by
construction.
"""

from __future__ import annotations

import torch

from .netops import (
    ConvLayer,
    ShapeError,
    bilinear_resize,
    channel_softmax,
    conv2d,
    relu,
    softmax_cross_entropy,
)

__all__ = [
    "TEXT_CHANNEL",
    "TextContextModule",
    "saliency_from_logits",
    "pyramid_attention",
    "pyramid_fusion",
    "global_seg_map",
    "seg_loss",
]

# channel 0 scores non-text, channel 1 scores text; the text channel gates
# the features and feeds the instance score
TEXT_CHANNEL = 1


class TextContextModule(torch.nn.Module):
    """Two 3x3 convolutions and one 1x1 convolution.

    The first conv's pre-activation output is the global text feature (C
    channels); the branch continues through relu, the second 3x3 conv, relu,
    and the 1x1 conv to the 2-channel saliency logits.
    """

    def __init__(self, channels: int, *, hidden: int = 16,
                 generator: torch.Generator) -> None:
        super().__init__()
        self.conv1 = ConvLayer(channels, channels, 3, padding=1,
                               init="gaussian", generator=generator)
        self.conv2 = ConvLayer(channels, hidden, 3, padding=1,
                               init="gaussian", generator=generator)
        self.conv3 = ConvLayer(hidden, 2, 1, init="gaussian", generator=generator)

    def forward(self, stage: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if stage.shape[1] != self.conv1.weight.shape[1]:
            raise ShapeError(
                f"stage has {stage.shape[1]} channels, branch expects "
                f"{self.conv1.weight.shape[1]}"
            )
        text_feature = conv2d(stage, self.conv1.weight, self.conv1.bias, padding=1)
        h = relu(conv2d(relu(text_feature), self.conv2.weight, self.conv2.bias, padding=1))
        logits = conv2d(h, self.conv3.weight, self.conv3.bias)
        return text_feature, logits


def saliency_from_logits(logits: torch.Tensor) -> torch.Tensor:
    """exp of the per-pixel channel softmax; values lie strictly in (1, e)."""
    return torch.exp(channel_softmax(logits))


def pyramid_attention(stage: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Scale every feature channel by the text-channel saliency at its pixel."""
    if stage.shape[-2:] != logits.shape[-2:]:
        raise ShapeError(
            f"stage {tuple(stage.shape)} and saliency logits {tuple(logits.shape)} "
            "are not spatially aligned"
        )
    scale = saliency_from_logits(logits)[:, TEXT_CHANNEL : TEXT_CHANNEL + 1]
    return stage * scale


def pyramid_fusion(attended: torch.Tensor, text_feature: torch.Tensor) -> torch.Tensor:
    if attended.shape != text_feature.shape:
        raise ShapeError(
            f"fusion shapes differ: {tuple(attended.shape)} vs {tuple(text_feature.shape)}"
        )
    return attended + text_feature


def global_seg_map(stage_logits: list[torch.Tensor],
                   out_size: tuple[int, int]) -> torch.Tensor:
    """Mean of the per-stage 2-channel logits, each bilinearly resized to the
    input resolution.  Probabilities are channel_softmax of the result.
    """
    if not stage_logits:
        raise ValueError("global_seg_map needs at least one stage")
    h, w = out_size
    resized = [bilinear_resize(m, h, w) for m in stage_logits]
    return torch.stack(resized).mean(dim=0)


def seg_loss(global_logits: torch.Tensor, gt_map: torch.Tensor,
             ignore_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean per-pixel 2-class softmax cross-entropy between the global map
    logits and the binary text map; pixels under `ignore_mask` contribute
    nothing when it is given.
    """
    labels = gt_map.long()
    weight = None
    if ignore_mask is not None:
        weight = 1.0 - ignore_mask.to(global_logits.dtype)
    return softmax_cross_entropy(global_logits, labels, weight)
