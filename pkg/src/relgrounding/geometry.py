"""Axis-aligned box arithmetic.

Scalar helpers operate on :class:`Box` / :class:`Offset` values; the
``*_t`` variants are their batched torch counterparts over trailing
dimension 4 and are what the network uses.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import torch

# log-size deltas are clamped before exponentiation (ratio ~62x)
SIZE_DELTA_CLIP = math.log(1000.0 / 16)


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def is_valid(self) -> bool:
        return self.x1 <= self.x2 and self.y1 <= self.y2


class Offset(NamedTuple):
    tx: float
    ty: float
    tw: float
    th: float


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def encode_offset(src: Box, dst: Box) -> Offset:
    """Center/log-size deltas that move ``src`` onto ``dst``."""
    if src.width <= 0 or src.height <= 0:
        raise ValueError(f"source box must have positive size, got {src}")
    if dst.width <= 0 or dst.height <= 0:
        raise ValueError(f"target box must have positive size, got {dst}")
    (scx, scy), (dcx, dcy) = src.center, dst.center
    return Offset(
        (dcx - scx) / src.width,
        (dcy - scy) / src.height,
        math.log(dst.width / src.width),
        math.log(dst.height / src.height),
    )


def apply_offset(src: Box, d: Offset, bounds: Box) -> Box:
    if src.width <= 0 or src.height <= 0:
        raise ValueError(f"source box must have positive size, got {src}")
    cx, cy = src.center
    cx += d.tx * src.width
    cy += d.ty * src.height
    w = src.width * math.exp(min(d.tw, SIZE_DELTA_CLIP))
    h = src.height * math.exp(min(d.th, SIZE_DELTA_CLIP))
    return clip_box(Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h), bounds)


def clip_box(box: Box, bounds: Box) -> Box:
    def clamp(v: float, lo: float, hi: float) -> float:
        return min(max(v, lo), hi)

    x1 = clamp(box.x1, bounds.x1, bounds.x2)
    x2 = clamp(box.x2, bounds.x1, bounds.x2)
    y1 = clamp(box.y1, bounds.y1, bounds.y2)
    y2 = clamp(box.y2, bounds.y1, bounds.y2)
    return Box(x1, y1, max(x1, x2), max(y1, y2))


def center_in(pred: Box, gt: Box) -> bool:
    """Point-game hit; a center on the gt boundary counts as inside."""
    cx, cy = pred.center
    return gt.x1 <= cx <= gt.x2 and gt.y1 <= cy <= gt.y2


# -- batched torch versions -------------------------------------------------


def area_t(boxes: torch.Tensor) -> torch.Tensor:
    wh = (boxes[..., 2:] - boxes[..., :2]).clamp(min=0)
    return wh[..., 0] * wh[..., 1]


def iou_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise IoU of broadcastable ``(..., 4)`` box tensors."""
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_t(a) + area_t(b) - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def encode_offset_t(src: torch.Tensor, dst: torch.Tensor) -> torch.Tensor:
    sw = src[..., 2] - src[..., 0]
    sh = src[..., 3] - src[..., 1]
    dw = dst[..., 2] - dst[..., 0]
    dh = dst[..., 3] - dst[..., 1]
    tx = 0.5 * ((dst[..., 0] + dst[..., 2]) - (src[..., 0] + src[..., 2])) / sw
    ty = 0.5 * ((dst[..., 1] + dst[..., 3]) - (src[..., 1] + src[..., 3])) / sh
    return torch.stack([tx, ty, torch.log(dw / sw), torch.log(dh / sh)], dim=-1)


def apply_offset_t(src: torch.Tensor, d: torch.Tensor, bounds: torch.Tensor) -> torch.Tensor:
    """Decode ``d`` onto ``src`` and clip to ``bounds`` (broadcastable (..., 4))."""
    sw = src[..., 2] - src[..., 0]
    sh = src[..., 3] - src[..., 1]
    cx = 0.5 * (src[..., 0] + src[..., 2]) + d[..., 0] * sw
    cy = 0.5 * (src[..., 1] + src[..., 3]) + d[..., 1] * sh
    w = sw * torch.exp(d[..., 2].clamp(max=SIZE_DELTA_CLIP))
    h = sh * torch.exp(d[..., 3].clamp(max=SIZE_DELTA_CLIP))
    out = torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)
    return clip_t(out, bounds)


def clip_t(boxes: torch.Tensor, bounds: torch.Tensor) -> torch.Tensor:
    bounds = bounds.expand_as(boxes)
    x1 = torch.minimum(torch.maximum(boxes[..., 0], bounds[..., 0]), bounds[..., 2])
    x2 = torch.minimum(torch.maximum(boxes[..., 2], bounds[..., 0]), bounds[..., 2])
    y1 = torch.minimum(torch.maximum(boxes[..., 1], bounds[..., 1]), bounds[..., 3])
    y2 = torch.minimum(torch.maximum(boxes[..., 3], bounds[..., 1]), bounds[..., 3])
    return torch.stack([x1, y1, torch.maximum(x1, x2), torch.maximum(y1, y2)], dim=-1)
