"""Detection skeleton: a small residual backbone, a four-stage feature
pyramid at strides 4/8/16/32, anchor machinery, the region proposal network,
and the box/class and mask heads, optionally gated by the text context
module.

The default configuration keeps the whole model under 200k parameters so it
trains on a single CPU core in minutes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import tcm as tcm_mod
from .netops import ConvLayer, LinearLayer, conv2d, linear, relu, roi_align_many

__all__ = [
    "ModelConfig",
    "PYRAMID_STRIDES",
    "TextDetector",
    "generate_anchors",
    "encode_box",
    "decode_box",
    "box_iou_matrix",
    "assign_rpn_targets",
    "axis_nms",
    "clip_boxes",
    "fpn_level_for_boxes",
    "pool_pyramid_features",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

PYRAMID_STRIDES = (4, 8, 16, 32)
CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and proposal-filtering knobs."""

    channels: int = 64
    tcm: bool = True
    anchor_ratios: tuple[float, ...] = (0.2, 0.5, 1.0, 2.0, 5.0)
    anchor_bases: tuple[float, ...] = (16.0, 32.0, 64.0, 128.0)
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_nms_iou: float = 0.7
    rpn_pre_nms_top_k: int = 1000
    rpn_post_nms_top_m: int = 300

    def __post_init__(self) -> None:
        if self.channels < 8:
            raise ValueError("channels must be >= 8")
        if len(self.anchor_bases) != len(PYRAMID_STRIDES):
            raise ValueError("one anchor base size per pyramid stage is required")
        if not (0 < self.rpn_neg_iou <= self.rpn_pos_iou < 1):
            raise ValueError("need 0 < rpn_neg_iou <= rpn_pos_iou < 1")

    def config_hash(self) -> str:
        payload = repr(sorted(asdict(self).items()))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# anchors and box parameterization (numpy; proposals carry no gradient)


def generate_anchors(level_sizes: list[tuple[int, int]],
                     strides=PYRAMID_STRIDES,
                     bases=(16.0, 32.0, 64.0, 128.0),
                     ratios=(0.2, 0.5, 1.0, 2.0, 5.0)) -> np.ndarray:
    """All anchors over the pyramid as an (N, 4) x0,y0,x1,y1 array.

    Ratio r = width/height with the area held at base² (w = base·√r,
    h = base/√r).  Order is level-major, then row-major over locations, with
    the ratio index fastest, matching the (B, A, H, W) logit layout after a
    (H, W, A) permute.
    """
    out = []
    for (h, w), stride, base in zip(level_sizes, strides, bases):
        rs = np.asarray(ratios, dtype=np.float64)
        ws = base * np.sqrt(rs)
        hs = base / np.sqrt(rs)
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        cx = (xs.reshape(-1, 1) + 0.5) * stride
        cy = (ys.reshape(-1, 1) + 0.5) * stride
        boxes = np.stack([
            np.broadcast_to(cx - ws / 2, (h * w, len(ratios))),
            np.broadcast_to(cy - hs / 2, (h * w, len(ratios))),
            np.broadcast_to(cx + ws / 2, (h * w, len(ratios))),
            np.broadcast_to(cy + hs / 2, (h * w, len(ratios))),
        ], axis=2)
        out.append(boxes.reshape(-1, 4))
    return np.concatenate(out, axis=0)


def _to_cwh(boxes: np.ndarray) -> tuple[np.ndarray, ...]:
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return boxes[:, 0] + w / 2, boxes[:, 1] + h / 2, w, h


def encode_box(targets: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Regression deltas (dx, dy, dw, dh) taking each anchor to its target."""
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    tx, ty, tw, th = _to_cwh(targets)
    ax, ay, aw, ah = _to_cwh(anchors)
    if (tw <= 0).any() or (th <= 0).any() or (aw <= 0).any() or (ah <= 0).any():
        raise ValueError("encode_box requires positive box extents")
    return np.stack([(tx - ax) / aw, (ty - ay) / ah,
                     np.log(tw / aw), np.log(th / ah)], axis=1)


def decode_box(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    deltas = np.atleast_2d(np.asarray(deltas, dtype=np.float64))
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    ax, ay, aw, ah = _to_cwh(anchors)
    if (aw <= 0).any() or (ah <= 0).any():
        raise ValueError("decode_box requires positive anchor extents")
    cx = deltas[:, 0] * aw + ax
    cy = deltas[:, 1] * ah + ay
    # clamp the log-scale terms so early-training garbage cannot overflow
    w = np.exp(np.clip(deltas[:, 2], -8.0, 8.0)) * aw
    h = np.exp(np.clip(deltas[:, 3], -8.0, 8.0)) * ah
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) axis-aligned boxes."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    x0 = np.maximum(a[:, None, 0], b[None, :, 0])
    y0 = np.maximum(a[:, None, 1], b[None, :, 1])
    x1 = np.minimum(a[:, None, 2], b[None, :, 2])
    y1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x1 - x0, 0, None) * np.clip(y1 - y0, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / union, 0.0)


def assign_rpn_targets(anchors: np.ndarray, gt_boxes: np.ndarray,
                       pos_iou: float = 0.7, neg_iou: float = 0.3
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor labels (1 positive, 0 negative, -1 ignored) and encoded
    deltas toward each anchor's best-overlapping ground-truth box.

    Positives are anchors with IoU >= pos_iou against some box, plus every
    box's argmax anchor (when that IoU is nonzero); negatives fall below
    neg_iou; the rest are ignored.
    """
    n = len(anchors)
    labels = np.full(n, -1, dtype=np.int64)
    deltas = np.zeros((n, 4), dtype=np.float64)
    if len(gt_boxes) == 0:
        labels[:] = 0
        return labels, deltas
    iou = box_iou_matrix(anchors, gt_boxes)
    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(n), best_gt]
    labels[best_iou < neg_iou] = 0
    labels[best_iou >= pos_iou] = 1
    gt_max = iou.max(axis=0)
    force = (iou == gt_max[None, :]) & (gt_max[None, :] > 0)
    labels[force.any(axis=1)] = 1
    pos = labels == 1
    if pos.any():
        deltas[pos] = encode_box(gt_boxes[best_gt[pos]], anchors[pos])
    return labels, deltas


def axis_nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy axis-aligned suppression; returns kept indices, best first.

    A box is dropped exactly when its IoU with an already kept box exceeds
    the threshold; ties in score keep the lower original index first.
    """
    order = np.lexsort((np.arange(len(scores)), -scores))
    ranked = boxes[order]
    alive = np.ones(len(order), dtype=bool)
    kept: list[int] = []
    for pos in range(len(order)):
        if not alive[pos]:
            continue
        kept.append(int(order[pos]))
        if pos + 1 < len(order):
            row = box_iou_matrix(ranked[pos:pos + 1], ranked[pos + 1:])[0]
            alive[pos + 1:] &= ~(row > iou_threshold)
    return np.asarray(kept, dtype=np.int64)


def clip_boxes(boxes: np.ndarray, height: int, width: int) -> np.ndarray:
    out = boxes.copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0.0, float(width))
    out[:, 1::2] = np.clip(out[:, 1::2], 0.0, float(height))
    return out


def fpn_level_for_boxes(boxes: np.ndarray, canonical_size: float = 224.0,
                        canonical_level: int = 4) -> np.ndarray:
    """Standard pyramid assignment floor(k0 + log2(sqrt(wh)/224)), clamped
    to stages 2..5; returned as indices 0..3 into the stage list.
    """
    boxes = np.atleast_2d(np.asarray(boxes, dtype=np.float64))
    scale = np.sqrt(np.clip((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1]),
                            1e-6, None))
    levels = np.floor(canonical_level + np.log2(scale / canonical_size))
    return (np.clip(levels, 2, 5) - 2).astype(np.int64)


def pool_pyramid_features(pyramid: list[torch.Tensor], boxes: np.ndarray,
                          out_size: int) -> torch.Tensor:
    """RoI-align each box from its assigned stage; rows follow input order."""
    if len(boxes) == 0:
        c = pyramid[0].shape[1]
        return torch.zeros(0, c, out_size, out_size, dtype=pyramid[0].dtype)
    levels = fpn_level_for_boxes(boxes)
    chunks: list[torch.Tensor] = []
    index: list[np.ndarray] = []
    for lvl in range(4):
        sel = np.nonzero(levels == lvl)[0]
        if len(sel) == 0:
            continue
        rois = torch.from_numpy(np.ascontiguousarray(boxes[sel])).to(pyramid[lvl].dtype)
        chunks.append(roi_align_many(pyramid[lvl], rois, float(PYRAMID_STRIDES[lvl]),
                                     out_size))
        index.append(sel)
    pooled = torch.cat(chunks, dim=0)
    order = np.concatenate(index).argsort(kind="stable")
    return pooled[torch.from_numpy(np.ascontiguousarray(order))]


# ---------------------------------------------------------------------------
# network modules


class _ResidualBlock(torch.nn.Module):
    """Stride-2 residual unit: two 3x3 convs with a 1x1 projection skip."""

    def __init__(self, in_ch: int, out_ch: int, generator: torch.Generator) -> None:
        super().__init__()
        self.conv1 = ConvLayer(in_ch, out_ch, 3, stride=2, padding=1,
                               init="kaiming", generator=generator)
        self.conv2 = ConvLayer(out_ch, out_ch, 3, padding=1,
                               init="kaiming", generator=generator)
        self.skip = ConvLayer(in_ch, out_ch, 1, stride=2,
                              init="kaiming", generator=generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = relu(self.conv1(x))
        h = self.conv2(h)
        return relu(h + self.skip(x))


class _Backbone(torch.nn.Module):
    """Stem plus four stride-2 blocks; taps at strides 4, 8, 16, 32."""

    widths = (8, 12, 16, 24, 32)

    def __init__(self, generator: torch.Generator) -> None:
        super().__init__()
        w = self.widths
        self.stem = ConvLayer(3, w[0], 3, stride=2, padding=1,
                              init="kaiming", generator=generator)
        self.block1 = _ResidualBlock(w[0], w[1], generator)
        self.block2 = _ResidualBlock(w[1], w[2], generator)
        self.block3 = _ResidualBlock(w[2], w[3], generator)
        self.block4 = _ResidualBlock(w[3], w[4], generator)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = relu(self.stem(x))
        c2 = self.block1(h)
        c3 = self.block2(c2)
        c4 = self.block3(c3)
        c5 = self.block4(c4)
        return [c2, c3, c4, c5]


class _FeaturePyramid(torch.nn.Module):
    """Lateral 1x1 projections merged top-down with bilinear upsampling."""

    def __init__(self, channels: int, generator: torch.Generator) -> None:
        super().__init__()
        self.laterals = torch.nn.ModuleList([
            ConvLayer(w, channels, 1, init="kaiming", generator=generator)
            for w in _Backbone.widths[1:]
        ])

    def forward(self, stages: list[torch.Tensor]) -> list[torch.Tensor]:
        lat = [conv(s) for conv, s in zip(self.laterals, stages)]
        out = [lat[-1]]
        for lower in reversed(lat[:-1]):
            h, w = lower.shape[-2:]
            upper = torch.nn.functional.interpolate(
                out[0], size=(h, w), mode="bilinear", align_corners=False)
            out.insert(0, lower + upper)
        return out


class _RpnHead(torch.nn.Module):
    """Shared 3x3 conv, then 1x1 objectness and delta predictors."""

    def __init__(self, channels: int, num_anchors: int,
                 generator: torch.Generator) -> None:
        super().__init__()
        self.conv = ConvLayer(channels, channels, 3, padding=1,
                              init="gaussian", generator=generator)
        self.objectness = ConvLayer(channels, num_anchors, 1,
                                    init="gaussian", generator=generator)
        self.deltas = ConvLayer(channels, num_anchors * 4, 1,
                                init="gaussian", generator=generator)

    def forward(self, pyramid: list[torch.Tensor]
                ) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        obj, dlt = [], []
        for stage in pyramid:
            h = relu(self.conv(stage))
            obj.append(self.objectness(h))
            dlt.append(self.deltas(h))
        return obj, dlt


class _RcnnHead(torch.nn.Module):
    """7x7 RoI features to 2-class scores and class-agnostic box deltas."""

    def __init__(self, channels: int, generator: torch.Generator) -> None:
        super().__init__()
        self.reduce = ConvLayer(channels, 32, 3, stride=2, padding=1,
                                init="gaussian", generator=generator)
        self.fc = LinearLayer(32 * 4 * 4, 48, generator=generator)
        self.cls = LinearLayer(48, 2, generator=generator)
        self.box = LinearLayer(48, 4, generator=generator)

    def forward(self, pooled: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = relu(self.reduce(pooled))
        h = relu(self.fc(h.reshape(h.shape[0], -1)))
        return self.cls(h), self.box(h)


class _MaskHead(torch.nn.Module):
    """14x14 RoI features to a single-channel text mask logit grid."""

    def __init__(self, channels: int, generator: torch.Generator) -> None:
        super().__init__()
        self.conv1 = ConvLayer(channels, 32, 3, padding=1,
                               init="gaussian", generator=generator)
        self.conv2 = ConvLayer(32, 32, 3, padding=1,
                               init="gaussian", generator=generator)
        self.out = ConvLayer(32, 1, 1, init="gaussian", generator=generator)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        h = relu(self.conv1(pooled))
        h = relu(self.conv2(h))
        return self.out(h)


class TextDetector(torch.nn.Module):
    """The full model; construction is deterministic given the generator."""

    def __init__(self, config: ModelConfig, *, generator: torch.Generator) -> None:
        super().__init__()
        self.config = config
        self.backbone = _Backbone(generator)
        self.fpn = _FeaturePyramid(config.channels, generator)
        self.context = (tcm_mod.TextContextModule(config.channels, generator=generator)
                        if config.tcm else None)
        self.rpn = _RpnHead(config.channels, len(config.anchor_ratios), generator)
        self.rcnn = _RcnnHead(config.channels, generator)
        self.mask = _MaskHead(config.channels, generator)

    @staticmethod
    def preprocess(image: np.ndarray) -> torch.Tensor:
        """uint8 HxWx3 image to a normalized (1, 3, H, W) float tensor.

        The result is C-contiguous on purpose: numpy ufuncs preserve the
        transposed layout, and strided conv inputs hit a memory bug in the
        CPU convolution backward of the torch build this targets.
        """
        arr = np.ascontiguousarray(image.astype(np.float32).transpose(2, 0, 1)[None])
        return torch.from_numpy((arr - 127.5) / 64.0)

    def build_pyramid(self, images: torch.Tensor
                      ) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        """Pyramid stages for RPN/heads plus the per-stage saliency logits
        (empty when the context module is disabled).  Stage k has stride
        4·2^k and the configured channel count.
        """
        h, w = images.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(
                f"input {h}x{w} is not divisible by 32; pad the image first"
            )
        stages = self.fpn(self.backbone(images))
        if self.context is None:
            return stages, []
        fused, stage_logits = [], []
        for stage in stages:
            text_feature, logits = self.context(stage)
            attended = tcm_mod.pyramid_attention(stage, logits)
            fused.append(tcm_mod.pyramid_fusion(attended, text_feature))
            stage_logits.append(logits)
        return fused, stage_logits

    def rpn_forward(self, pyramid: list[torch.Tensor]
                    ) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        return self.rpn(pyramid)

    def rcnn_heads(self, pyramid: list[torch.Tensor], boxes: np.ndarray,
                   mask_rows: np.ndarray | None = None
                   ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Per-proposal 2-class scores, box deltas, and 14x14 mask logits.

        mask_rows restricts the (expensive) mask branch to a row subset;
        the returned mask tensor then follows mask_rows order.  Scores and
        deltas always cover every box.
        """
        if len(boxes) == 0:
            dtype = pyramid[0].dtype
            return (torch.zeros(0, 2, dtype=dtype), torch.zeros(0, 4, dtype=dtype),
                    torch.zeros(0, 1, 14, 14, dtype=dtype))
        cls, deltas = self.rcnn(pool_pyramid_features(pyramid, boxes, 7))
        mask_boxes = boxes if mask_rows is None else boxes[mask_rows]
        if len(mask_boxes):
            mask_logits = self.mask(pool_pyramid_features(pyramid, mask_boxes, 14))
        else:
            mask_logits = torch.zeros(0, 1, 14, 14, dtype=pyramid[0].dtype)
        return cls, deltas, mask_logits

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def flatten_rpn_outputs(obj: list[torch.Tensor], deltas: list[torch.Tensor]
                        ) -> tuple[torch.Tensor, torch.Tensor]:
    """(B, A, H, W) objectness and (B, 4A, H, W) deltas across levels into
    (B, N) and (B, N, 4) tensors whose N axis matches generate_anchors order.
    """
    flat_obj, flat_dlt = [], []
    for o, d in zip(obj, deltas):
        b, a, h, w = o.shape
        flat_obj.append(o.permute(0, 2, 3, 1).reshape(b, h * w * a))
        flat_dlt.append(d.reshape(b, a, 4, h, w).permute(0, 3, 4, 1, 2)
                        .reshape(b, h * w * a, 4))
    return torch.cat(flat_obj, dim=1), torch.cat(flat_dlt, dim=1)


def proposals_from_rpn(anchors: np.ndarray, objectness: torch.Tensor,
                       deltas: torch.Tensor, image_size: tuple[int, int],
                       config: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Decode one image's RPN outputs into scored proposals.

    Keeps the pre-NMS top-K by objectness, decodes and clips, drops boxes
    under 1 px, suppresses at the configured axis IoU, and returns up to
    top-M boxes with their scores.  Outputs carry no gradient.
    """
    height, width = image_size
    scores = torch.sigmoid(objectness).detach().cpu().numpy().astype(np.float64)
    dl = deltas.detach().cpu().numpy().astype(np.float64)
    k = min(config.rpn_pre_nms_top_k, len(scores))
    top = np.argsort(-scores, kind="stable")[:k]
    boxes = decode_box(dl[top], anchors[top])
    boxes = clip_boxes(boxes, height, width)
    ok = (boxes[:, 2] - boxes[:, 0] >= 1.0) & (boxes[:, 3] - boxes[:, 1] >= 1.0)
    boxes, kept_scores = boxes[ok], scores[top][ok]
    if len(boxes) == 0:
        return np.zeros((0, 4)), np.zeros(0)
    keep = axis_nms(boxes, kept_scores, config.rpn_nms_iou)[:config.rpn_post_nms_top_m]
    return boxes[keep], kept_scores[keep]


# ---------------------------------------------------------------------------
# checkpointing: a single-line JSON header plus raw little-endian tensors,
# so identical models serialize to identical bytes


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(model: TextDetector, path) -> None:
    path = Path(path)
    names = sorted(dict(model.state_dict()).keys())
    state = model.state_dict()
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(model.config),
        "config_hash": model.config.config_hash(),
        "tensors": [
            {"name": n, "shape": list(state[n].shape), "dtype": "float32"}
            for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for n in names:
            fh.write(state[n].detach().cpu().to(torch.float32).numpy()
                     .astype("<f4").tobytes())


def load_checkpoint(path) -> TextDetector:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        header_len = int.from_bytes(fh.read(8), "little")
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable checkpoint header in {path}") from exc
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint format {header.get('format_version')!r}"
            )
        raw = header["config"]
        config = ModelConfig(
            channels=raw["channels"], tcm=raw["tcm"],
            anchor_ratios=tuple(raw["anchor_ratios"]),
            anchor_bases=tuple(raw["anchor_bases"]),
            rpn_pos_iou=raw["rpn_pos_iou"], rpn_neg_iou=raw["rpn_neg_iou"],
            rpn_nms_iou=raw["rpn_nms_iou"],
            rpn_pre_nms_top_k=raw["rpn_pre_nms_top_k"],
            rpn_post_nms_top_m=raw["rpn_post_nms_top_m"],
        )
        if config.config_hash() != header["config_hash"]:
            raise CheckpointError(
                f"config hash mismatch in {path}: stored configuration "
                "does not reproduce its own hash"
            )
        model = TextDetector(config, generator=torch.Generator().manual_seed(0))
        state = {}
        for entry in header["tensors"]:
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            buf = fh.read(count * 4)
            if len(buf) != count * 4:
                raise CheckpointError(f"truncated tensor data in {path}")
            arr = np.frombuffer(buf, dtype="<f4").reshape(entry["shape"]).copy()
            state[entry["name"]] = torch.from_numpy(arr)
        try:
            model.load_state_dict(state)
        except RuntimeError as exc:
            raise CheckpointError(f"checkpoint/model structure mismatch: {exc}") from exc
    return model
