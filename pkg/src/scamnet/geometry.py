"""Box geometry: IoU, anchors, delta coding, matching, NMS, patch expansion.

All boxes are axis-aligned, in continuous pixel units, center/size form.
Everything here is a pure function of its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")

    def extent(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) corners."""
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    @staticmethod
    def from_extent(x0, y0, x1, y1) -> "Box":
        return Box((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def area(self) -> float:
        return self.w * self.h

    def clip(self, width: float, height: float) -> "Box":
        """Intersect with the image rectangle [0,W]x[0,H]."""
        x0, y0, x1, y1 = self.extent()
        x0, y0 = max(x0, 0.0), max(y0, 0.0)
        x1, y1 = min(x1, width), min(y1, height)
        if x1 <= x0 or y1 <= y0:
            raise ValueError(f"box {self} lies entirely outside a {width}x{height} image")
        return Box.from_extent(x0, y0, x1, y1)


def iou(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a.extent()
    bx0, by0, bx1, by1 = b.extent()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area() + b.area() - inter)


@dataclass(frozen=True)
class BoxDelta:
    """Offsets between an anchor and a target box (dx, dy dimensionless; dw, dh log-scale)."""

    dx: float
    dy: float
    dw: float
    dh: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh])


def encode_box_delta(anchor: Box, gt: Box) -> BoxDelta:
    return BoxDelta(
        dx=(gt.cx - anchor.cx) / anchor.w,
        dy=(gt.cy - anchor.cy) / anchor.h,
        dw=float(np.log(gt.w / anchor.w)),
        dh=float(np.log(gt.h / anchor.h)),
    )


def decode_box_delta(anchor: Box, d: BoxDelta) -> Box:
    return Box(
        cx=anchor.cx + d.dx * anchor.w,
        cy=anchor.cy + d.dy * anchor.h,
        w=anchor.w * float(np.exp(d.dw)),
        h=anchor.h * float(np.exp(d.dh)),
    )


@dataclass(frozen=True)
class AnchorLevelConfig:
    stride: int
    sizes: tuple[float, ...]
    ratios: tuple[float, ...]  # height/width


@dataclass
class AnchorGrid:
    """Flattened anchor list with per-anchor provenance into the pyramid.

    ``flat_index[i]`` locates anchor i inside its level's (A*?, H, W) head
    output: (level, anchor_slot, row, col).
    """

    boxes: list[Box]
    provenance: list[tuple[int, int, int, int]]
    levels: list[AnchorLevelConfig]

    def __len__(self):
        return len(self.boxes)


def generate_anchors(image_size: int, levels: list[AnchorLevelConfig]) -> AnchorGrid:
    """Tile anchors over each pyramid level, centers at cell centers."""
    if not levels:
        raise ValueError("anchor config must name at least one level")
    boxes, prov = [], []
    for li, lv in enumerate(levels):
        if image_size % lv.stride:
            raise ValueError(f"stride {lv.stride} does not divide image size {image_size}")
        cells = image_size // lv.stride
        for i in range(cells):
            cy = (i + 0.5) * lv.stride
            for j in range(cells):
                cx = (j + 0.5) * lv.stride
                slot = 0
                for size in lv.sizes:
                    for ratio in lv.ratios:
                        # keep area = size^2, aspect h/w = ratio
                        w = size / np.sqrt(ratio)
                        h = size * np.sqrt(ratio)
                        boxes.append(Box(cx, cy, float(w), float(h)))
                        prov.append((li, slot, i, j))
                        slot += 1
    return AnchorGrid(boxes=boxes, provenance=prov, levels=list(levels))


def match_anchors(anchors: list[Box], gt_boxes: list[Box], pos_iou: float = 0.5,
                  neg_iou: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    """Assign each anchor POSITIVE/NEGATIVE/IGNORE plus its best gt index.

    Positive when max-IoU >= pos_iou, negative when < neg_iou, ignored in
    between; the best anchor of every gt box is forced positive so no gt goes
    unmatched. Returns (labels, best_gt_index).
    """
    if pos_iou <= neg_iou:
        raise ValueError("pos_iou must exceed neg_iou")
    n = len(anchors)
    if not gt_boxes:
        return np.full(n, NEGATIVE, dtype=np.int64), np.full(n, -1, dtype=np.int64)
    ious = np.array([[iou(a, g) for g in gt_boxes] for a in anchors])
    best_gt = ious.argmax(axis=1)
    best = ious[np.arange(n), best_gt]
    labels = np.full(n, IGNORE, dtype=np.int64)
    labels[best >= pos_iou] = POSITIVE
    labels[best < neg_iou] = NEGATIVE
    # force-match every gt to its best anchor
    for g in range(len(gt_boxes)):
        a = int(ious[:, g].argmax())
        labels[a] = POSITIVE
        best_gt[a] = g
    return labels, best_gt


def nms(boxes: list[Box], scores, iou_thresh: float, top_k: int) -> list[int]:
    """Greedy NMS by descending score; ties keep the lower index."""
    if len(boxes) != len(scores):
        raise ValueError(f"nms: {len(boxes)} boxes vs {len(scores)} scores")
    order = sorted(range(len(boxes)), key=lambda i: (-float(scores[i]), i))
    kept: list[int] = []
    for i in order:
        if len(kept) >= top_k:
            break
        if all(iou(boxes[i], boxes[j]) <= iou_thresh for j in kept):
            kept.append(i)
    return kept


def expand_patch(b: Box, factor: float, width: float, height: float) -> Box:
    """Scale a box about its center, then intersect with the image rectangle."""
    if factor < 1.0:
        raise ValueError(f"expansion factor must be >= 1, got {factor}")
    return Box(b.cx, b.cy, b.w * factor, b.h * factor).clip(width, height)
