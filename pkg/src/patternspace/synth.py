"""Synthetic scenes: one shared textured object (height = 3 x width) placed
1-3 times on per-image random backgrounds. Ground truth is known by
construction."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from patternspace.dataset import Box, ScaledImage, write_annotations_jsonl

WIDTH = 256
HEIGHT = 192


def object_template(unit: int = 8) -> np.ndarray:
    """A figure of 3 x 9 units: head, striped torso, legs."""
    w, h = 3 * unit, 9 * unit
    img = Image.new("RGB", (w, h), (0, 0, 0))
    d = ImageDraw.Draw(img)
    d.rectangle([0, 0, w, h], fill=(250, 250, 250))
    d.ellipse([unit * 0.6, 0, unit * 2.4, unit * 1.8], fill=(230, 170, 120))
    for k in range(5):
        color = (200, 20, 30) if k % 2 == 0 else (250, 210, 20)
        y0 = int(unit * (2 + k * 0.8))
        d.rectangle([0, y0, w - 1, int(y0 + unit * 0.8)], fill=color)
    d.rectangle([0, unit * 6, w // 2 - 2, h - 1], fill=(20, 40, 160))
    d.rectangle([w // 2 + 1, unit * 6, w - 1, h - 1], fill=(20, 40, 160))
    arr = np.asarray(img).copy()
    arr[:, :, :][arr.sum(axis=2) == 750] = (0, 0, 0)  # background of the template stays transparent
    return arr


def _background(rng: np.random.Generator) -> np.ndarray:
    c0 = rng.integers(0, 256, 3)
    c1 = rng.integers(0, 256, 3)
    t = np.linspace(0, 1, WIDTH if rng.random() < 0.5 else HEIGHT)
    grad = c0[None] * (1 - t[:, None]) + c1[None] * t[:, None]
    if len(t) == WIDTH:
        bg = np.broadcast_to(grad[None], (HEIGHT, WIDTH, 3))
    else:
        bg = np.broadcast_to(grad[:, None], (HEIGHT, WIDTH, 3))
    img = Image.fromarray(bg.astype(np.uint8))
    d = ImageDraw.Draw(img)
    for _ in range(rng.integers(4, 10)):
        x0, y0 = rng.integers(-40, WIDTH), rng.integers(-40, HEIGHT)
        sx, sy = rng.integers(15, 90, 2)
        color = tuple(int(c) for c in rng.integers(0, 256, 3))
        if rng.random() < 0.5:
            d.ellipse([x0, y0, x0 + sx, y0 + sy], fill=color)
        else:
            d.rectangle([x0, y0, x0 + sx, y0 + sy], fill=color)
    arr = np.asarray(img).astype(np.float64)
    arr += rng.normal(0, 6, arr.shape)
    return np.clip(arr, 0, 255).astype(np.uint8)


def _place(rng: np.random.Generator, boxes: list[Box], h: int, w: int, tries: int = 50) -> Box | None:
    for _ in range(tries):
        x = int(rng.integers(0, WIDTH - w + 1))
        y = int(rng.integers(0, HEIGHT - h + 1))
        gap = 4
        if all(x + w + gap <= b.x or b.x + b.w + gap <= x or y + h + gap <= b.y or b.y + b.h + gap <= y
               for b in boxes):
            return Box(x, y, w, h)
    return None


def make_scene(rng: np.random.Generator, template: np.ndarray, image_id: str,
               min_height: int = 66, max_height: int = 150) -> ScaledImage:
    pixels = _background(rng)
    boxes: list[Box] = []
    for _ in range(int(rng.integers(1, 4))):
        h = int(rng.integers(min_height // 3, max_height // 3 + 1)) * 3
        box = _place(rng, boxes, h, h // 3)
        if box is None:
            continue
        sprite = np.asarray(Image.fromarray(template).resize((int(box.w), int(box.h)), Image.NEAREST))
        mask = sprite.sum(axis=2) > 0
        region = pixels[int(box.y):int(box.y + box.h), int(box.x):int(box.x + box.w)]
        region[mask] = sprite[mask]
        boxes.append(box)
    return ScaledImage(image_id, pixels, 1.0, boxes)


def make_dataset(n_images: int = 100, seed: int = 0, min_height: int = 66,
                 max_height: int = 150) -> list[ScaledImage]:
    rng = np.random.default_rng(seed)
    template = object_template()
    return [make_scene(rng, template, f"synth_{i:04d}", min_height, max_height) for i in range(n_images)]


def write_dataset(images: list[ScaledImage], out_dir: str | os.PathLike, name: str = "synthetic") -> Path:
    """PNG images, annotations.jsonl and a manifest.json that ``prepare`` reads."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for img in images:
        Image.fromarray(img.pixels).save(out / "images" / f"{img.image_id}.png")
        entries.append({"id": img.image_id, "path": f"images/{img.image_id}.png"})
    write_annotations_jsonl(out / "annotations.jsonl", ((i.image_id, i.gt_boxes) for i in images))
    manifest = {"name": name, "format": "jsonl", "annotations": "annotations.jsonl", "images": entries}
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)
    return out / "manifest.json"
