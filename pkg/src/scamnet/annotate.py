"""Direct-pixel annotation of predictions: box outlines and category tags."""
from __future__ import annotations

import numpy as np

from .geometry import Box

OBJECT_COLOR = (230, 40, 40)
CONTEXT_COLOR = (250, 210, 40)

# 3x5 uppercase glyphs for the letters the category names use
_FONT = {
    "a": ("010", "101", "111", "101", "101"),
    "c": ("011", "100", "100", "100", "011"),
    "d": ("110", "101", "101", "101", "110"),
    "e": ("111", "100", "110", "100", "111"),
    "g": ("011", "100", "101", "101", "011"),
    "i": ("111", "010", "010", "010", "111"),
    "l": ("100", "100", "100", "100", "111"),
    "n": ("101", "111", "111", "101", "101"),
    "o": ("010", "101", "101", "101", "010"),
    "q": ("010", "101", "101", "110", "011"),
    "r": ("110", "101", "110", "101", "101"),
    "s": ("011", "100", "010", "001", "110"),
    "t": ("111", "010", "010", "010", "010"),
    "u": ("101", "101", "101", "101", "111"),
}


def _put(img, y, x, color):
    if 0 <= y < img.shape[0] and 0 <= x < img.shape[1]:
        img[y, x] = color


def draw_box(img: np.ndarray, box: Box, color, dashed: bool = False) -> None:
    x0, y0, x1, y1 = (int(round(v)) for v in box.extent())
    x1, y1 = x1 - 1, y1 - 1
    for step, x in enumerate(range(x0, x1 + 1)):
        if dashed and (step // 2) % 2:
            continue
        _put(img, y0, x, color)
        _put(img, y1, x, color)
    for step, y in enumerate(range(y0, y1 + 1)):
        if dashed and (step // 2) % 2:
            continue
        _put(img, y, x0, color)
        _put(img, y, x1, color)


def draw_text(img: np.ndarray, y: int, x: int, text: str, color) -> None:
    for ch in text:
        glyph = _FONT.get(ch)
        if glyph is not None:
            for gy, row in enumerate(glyph):
                for gx, bit in enumerate(row):
                    if bit == "1":
                        _put(img, y + gy, x + gx, color)
        x += 4


def annotate(image: np.ndarray, boxes: list[tuple[Box, str]], context_boxes: list[Box]) -> np.ndarray:
    """Return a copy of an (H,W,3) uint8 image with prediction overlays."""
    out = image.copy()
    for b in context_boxes:
        draw_box(out, b, CONTEXT_COLOR, dashed=True)
    for b, tag in boxes:
        draw_box(out, b, OBJECT_COLOR)
        x0, y0, _, _ = b.extent()
        ty = int(round(y0)) - 6
        draw_text(out, max(ty, 0), max(int(round(x0)), 0), tag, OBJECT_COLOR)
    return out
