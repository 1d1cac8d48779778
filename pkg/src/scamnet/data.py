"""Synthetic multi-label scene generation and dataset serialization.

Scenes are 6-category shape compositions over a noisy background. The "dot"
category (3-5 px) is only ever placed next to a square, giving the dataset a
built-in spatial-context correlation that a tight-patch classifier cannot see
but an expanded-patch classifier can.

On disk a dataset split is a directory of binary PPM images plus a JSONL
manifest; generation is a pure function of (spec, seed).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, iou
from .ppm import read_ppm, write_ppm

CATEGORIES = ("square", "circle", "triangle", "cross", "ring", "dot")
SQUARE, CIRCLE, TRIANGLE, CROSS, RING, DOT = range(6)

_MAX_PLACEMENT_RETRIES = 25
_MAX_OVERLAP_IOU = 0.3


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (3,H,W) float64 in [0,1]
    labels: np.ndarray  # (C,) 0/1
    boxes: list[tuple[int, Box]]


@dataclass
class DatasetSpec:
    num_train: int = 2000
    num_val: int = 500
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 4
    noise: float = 0.08
    seed: int = 42

    def __post_init__(self):
        if self.num_train < 1 or self.num_val < 1:
            raise ValueError("num_train and num_val must be positive")
        if self.image_size < 32:
            raise ValueError("image_size must be at least 32")


def _shape_mask(category: int, cx: float, cy: float, size: float, hw: int) -> np.ndarray:
    yy, xx = np.mgrid[0:hw, 0:hw] + 0.5
    dx, dy = xx - cx, yy - cy
    half = size / 2
    if category == SQUARE:
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if category in (CIRCLE, DOT):
        return dx * dx + dy * dy <= half * half
    if category == TRIANGLE:
        t = dy + half  # distance below the apex row
        return (t >= 0) & (t <= size) & (np.abs(dx) <= t / 2)
    if category == CROSS:
        arm = size / 6
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= half)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= half))
    if category == RING:
        r2 = dx * dx + dy * dy
        return (r2 <= half * half) & (r2 >= (0.6 * half) ** 2)
    raise ValueError(f"unknown category index {category}")


def _mask_box(mask: np.ndarray) -> Box:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return Box.from_extent(cols[0], rows[0], cols[-1] + 1.0, rows[-1] + 1.0)


def _pick_color(rng: np.random.Generator) -> np.ndarray:
    # keep channels away from the mid-gray background
    lo = rng.uniform(0.0, 0.25, size=3)
    hi = rng.uniform(0.75, 1.0, size=3)
    return np.where(rng.random(3) < 0.5, lo, hi)


def render_scene(spec: DatasetSpec, rng: np.random.Generator, sample_id: str) -> Sample:
    """Draw one scene: 1..max_objects shapes, dots only adjacent to squares."""
    hw = spec.image_size
    canvas = np.full((hw, hw, 3), 0.5) + rng.uniform(-spec.noise, spec.noise, size=(hw, hw, 3))
    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    cats = list(rng.integers(0, len(CATEGORIES), size=n_objects))
    if DOT in cats and SQUARE not in cats:
        cats[cats.index(DOT)] = SQUARE
    cats.sort()  # squares (index 0) land before their dependent dots

    boxes: list[tuple[int, Box]] = []
    squares: list[tuple[float, float, float]] = []  # (cx, cy, size)
    for cat in cats:
        for _ in range(_MAX_PLACEMENT_RETRIES):
            if cat == DOT:
                if not squares:
                    break
                scx, scy, ssize = squares[int(rng.integers(len(squares)))]
                size = float(rng.uniform(3.0, 5.0))
                # inside the x2-expanded square patch, outside the square itself
                dist = ssize * rng.uniform(0.6, 0.95)
                ang = rng.uniform(0, 2 * np.pi)
                cx, cy = scx + dist * np.cos(ang), scy + dist * np.sin(ang)
                if not (size / 2 + 1 <= cx <= hw - size / 2 - 1 and size / 2 + 1 <= cy <= hw - size / 2 - 1):
                    continue
            else:
                size = float(rng.uniform(12.0, 22.0))
                cx = float(rng.uniform(size / 2 + 1, hw - size / 2 - 1))
                cy = float(rng.uniform(size / 2 + 1, hw - size / 2 - 1))
            mask = _shape_mask(cat, cx, cy, size, hw)
            if not mask.any():
                continue
            box = _mask_box(mask)
            if any(iou(box, b) > _MAX_OVERLAP_IOU for _, b in boxes):
                continue
            canvas[mask] = _pick_color(rng)
            boxes.append((cat, box))
            if cat == SQUARE:
                squares.append((cx, cy, size))
            break

    if not boxes:  # placement never fully fails for non-dot shapes, but keep the invariant
        mask = _shape_mask(SQUARE, hw / 2, hw / 2, 16, hw)
        canvas[mask] = _pick_color(rng)
        boxes.append((SQUARE, _mask_box(mask)))

    labels = np.zeros(len(CATEGORIES), dtype=np.int64)
    for cat, _ in boxes:
        labels[cat] = 1
    image = np.clip(canvas, 0.0, 1.0).transpose(2, 0, 1)
    return Sample(id=sample_id, image=image, labels=labels, boxes=boxes)


def _quantize(image_chw: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image_chw.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)


def generate_split(spec: DatasetSpec, split: str, out_dir: str) -> dict[str, int]:
    """Render one split to <out_dir>/<split>/ and write its manifest."""
    split_id = {"train": 0, "val": 1}[split]
    count = spec.num_train if split == "train" else spec.num_val
    split_dir = os.path.join(out_dir, split)
    os.makedirs(split_dir, exist_ok=True)
    counts = {c: 0 for c in CATEGORIES}
    lines = []
    for i in range(count):
        rng = np.random.default_rng([spec.seed, split_id, i])
        sample_id = f"{split}-{i:05d}"
        s = render_scene(spec, rng, sample_id)
        write_ppm(os.path.join(split_dir, f"{sample_id}.ppm"), _quantize(s.image))
        for c in np.flatnonzero(s.labels):
            counts[CATEGORIES[c]] += 1
        record = {
            "id": s.id,
            "image": f"{sample_id}.ppm",
            "labels": [int(c) for c in np.flatnonzero(s.labels)],
            "boxes": [{"class": int(cat), "cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h}
                      for cat, b in s.boxes],
        }
        lines.append(json.dumps(record))
    with open(os.path.join(split_dir, "manifest.jsonl"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return counts


def generate_dataset(spec: DatasetSpec, out_dir: str) -> dict:
    """Render train and val splits; returns the per-category count summary."""
    os.makedirs(out_dir, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"output path {out_dir} is not writable")
    summary = {
        "image_size": spec.image_size,
        "categories": list(CATEGORIES),
        "train": generate_split(spec, "train", out_dir),
        "val": generate_split(spec, "val", out_dir),
    }
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
    return summary


class ManifestError(ValueError):
    pass


def load_split(split_dir: str) -> list[Sample]:
    """Load a split directory; validates every record against the invariants."""
    manifest = os.path.join(split_dir, "manifest.jsonl")
    if not os.path.exists(manifest):
        raise ManifestError(f"missing manifest: {manifest}")
    samples = []
    with open(manifest, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{manifest}:{lineno}: malformed JSON ({e})") from None
            sid = rec.get("id", f"<line {lineno}>")
            img_path = os.path.join(split_dir, rec["image"])
            if not os.path.exists(img_path):
                raise ManifestError(f"{manifest}:{lineno}: sample {sid}: missing image {rec['image']}")
            pixels = read_ppm(img_path)
            h, w, _ = pixels.shape
            boxes = []
            for bi, b in enumerate(rec["boxes"]):
                if b["w"] <= 0 or b["h"] <= 0:
                    raise ManifestError(
                        f"{manifest}:{lineno}: sample {sid}: box {bi} has non-positive size")
                box = Box(b["cx"], b["cy"], b["w"], b["h"])
                x0, y0, x1, y1 = box.extent()
                if x0 < -1e-9 or y0 < -1e-9 or x1 > w + 1e-9 or y1 > h + 1e-9:
                    raise ManifestError(
                        f"{manifest}:{lineno}: sample {sid}: box {bi} outside {w}x{h} image")
                boxes.append((int(b["class"]), box))
            labels = np.zeros(len(CATEGORIES), dtype=np.int64)
            for c in rec["labels"]:
                labels[c] = 1
            if set(rec["labels"]) != {c for c, _ in boxes}:
                raise ManifestError(f"{manifest}:{lineno}: sample {sid}: labels/boxes disagree")
            if not boxes:
                raise ManifestError(f"{manifest}:{lineno}: sample {sid}: no boxes")
            image = pixels.astype(np.float64).transpose(2, 0, 1) / 255.0
            samples.append(Sample(id=rec["id"], image=image, labels=labels, boxes=boxes))
    return samples
