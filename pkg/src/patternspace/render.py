"""Static figures: box overlays and nearest-neighbor contact sheets."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw, PngImagePlugin

from patternspace.dataset import Box

PRED_COLOR = (255, 140, 0)  # orange
GT_COLOR = (0, 90, 255)  # blue
TILE = 64
GAP = 4


def _png_info(meta: dict | None) -> PngImagePlugin.PngInfo:
    info = PngImagePlugin.PngInfo()
    for k, v in (meta or {}).items():
        info.add_text(str(k), str(v))
    return info


def draw_boxes(pixels: np.ndarray, preds: Sequence[Box], gts: Sequence[Box] | None = None,
               line_width: int = 2) -> Image.Image:
    """Ground truth in blue under predictions in orange."""
    img = Image.fromarray(np.asarray(pixels, dtype=np.uint8)).convert("RGB")
    d = ImageDraw.Draw(img)
    for boxes, color in ((gts or [], GT_COLOR), (preds, PRED_COLOR)):
        for b in boxes:
            x1, y1 = int(round(b.x)), int(round(b.y))
            x2, y2 = int(round(b.x + b.w)) - 1, int(round(b.y + b.h)) - 1
            d.rectangle([x1, y1, max(x1, x2), max(y1, y2)], outline=color, width=line_width)
    return img


def save_overlay(path: str | os.PathLike, pixels: np.ndarray, preds: Sequence[Box],
                 gts: Sequence[Box] | None = None, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    draw_boxes(pixels, preds, gts).save(path, pnginfo=_png_info(meta))
    return path


def contact_sheet(rows: Sequence[Sequence[np.ndarray]], tile: int = TILE, gap: int = GAP) -> Image.Image:
    """One row per query: the query tile, a wider gap, then its neighbors."""
    n_cols = max((len(r) for r in rows), default=0)
    if not rows or n_cols == 0:
        raise ValueError("contact sheet needs at least one non-empty row")
    width = n_cols * (tile + gap) + 2 * gap
    height = len(rows) * (tile + gap) + gap
    sheet = Image.new("RGB", (width, height), (255, 255, 255))
    for r, row in enumerate(rows):
        y = gap + r * (tile + gap)
        for c, patch in enumerate(row):
            x = gap + c * (tile + gap) + (2 * gap if c > 0 else 0)
            im = Image.fromarray(np.asarray(patch, dtype=np.uint8)).resize((tile, tile), Image.NEAREST)
            sheet.paste(im, (x, y))
    return sheet


def save_contact_sheet(path: str | os.PathLike, rows: Sequence[Sequence[np.ndarray]],
                       meta: dict | None = None, tile: int = TILE) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    contact_sheet(rows, tile).save(path, pnginfo=_png_info(meta))
    return path


def sheet_columns(sheet: Image.Image, tile: int = TILE, gap: int = GAP) -> int:
    return (sheet.width - 2 * gap) // (tile + gap)
