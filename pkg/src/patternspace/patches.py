"""Random patch sampling, IoU-paired patches and encoder input tensors."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from patternspace.dataset import Box, ScaledImage

PATCH_SIZE = 32
LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)
SOBEL_MAX = 4.0


class PatchRejected(Exception):
    """No feasible patch geometry; the caller should resample."""


@dataclass(frozen=True)
class PatchSpec:
    image_id: str
    x: int
    y: int
    w: int
    h: int
    scale: float
    ratio: float

    @property
    def box(self) -> Box:
        return Box(self.x, self.y, self.w, self.h)

    def inside(self, height: int, width: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= width and self.y + self.h <= height


@dataclass
class PixelPatch:
    spec: PatchSpec
    rgb: np.ndarray  # 32 x 32 x 3 uint8


@dataclass
class GradientPatch:
    spec: PatchSpec | None
    grads: np.ndarray  # 2 x 32 x 32 float32, (dx, dy)


@dataclass
class SamplerConfig:
    scale_min: float = 20.0
    scale_max: float = 256.0
    ratio_min: float = 3.0
    ratio_max: float = 3.0
    iou_min: float = 0.75
    pair_jitter_max: float = 0.10
    pair_scale_min: float = 0.93
    pair_scale_max: float = 1.08
    pair_retries: int = 50
    scale_sampling: str = "uniform"  # or "log_uniform"

    def __post_init__(self):
        if not 0 < self.scale_min <= self.scale_max:
            raise ValueError(f"need 0 < scale_min <= scale_max, got {self.scale_min}, {self.scale_max}")
        if not 0 < self.ratio_min <= self.ratio_max:
            raise ValueError(f"need 0 < ratio_min <= ratio_max, got {self.ratio_min}, {self.ratio_max}")
        if not 0 < self.iou_min < 1:
            raise ValueError(f"iou_min must lie in (0, 1), got {self.iou_min}")
        if self.pair_jitter_max < 0 or not 0 < self.pair_scale_min <= self.pair_scale_max:
            raise ValueError("invalid pair jitter range")
        if self.scale_sampling not in ("uniform", "log_uniform"):
            raise ValueError(f"unknown scale_sampling {self.scale_sampling!r}")


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two (x, y, w, h) boxes."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise ValueError(f"iou of zero-area box: {tuple(a)}, {tuple(b)}")
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(inter / (aw * ah + bw * bh - inter))


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) arrays of (x, y, w, h)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax1, ay1 = a[:, 0:1], a[:, 1:2]
    ax2, ay2 = ax1 + a[:, 2:3], ay1 + a[:, 3:4]
    bx1, by1 = b[:, 0], b[:, 1]
    bx2, by2 = bx1 + b[:, 2], by1 + b[:, 3]
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0, None)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + b[:, 2] * b[:, 3] - inter
    return inter / union


def _geometry(h: int, ratio: float, height: int, width: int) -> tuple[int, int]:
    h = min(h, height)
    w = int(round(h / ratio))
    if w > width:
        w = width
        h = min(int(round(width * ratio)), height)
    return w, h


def sample_patch(image_dims: tuple[int, int], cfg: SamplerConfig, rng: np.random.Generator,
                 image_id: str = "", max_tries: int = 100) -> PatchSpec:
    """Patch with uniformly drawn scale (target height) and aspect ratio h/w,
    placed uniformly among all in-bounds positions."""
    height, width = image_dims
    for _ in range(max_tries):
        if cfg.scale_sampling == "log_uniform":
            scale = float(math.exp(rng.uniform(math.log(cfg.scale_min), math.log(cfg.scale_max))))
        else:
            scale = float(rng.uniform(cfg.scale_min, cfg.scale_max))
        ratio = float(rng.uniform(cfg.ratio_min, cfg.ratio_max))
        w, h = _geometry(int(round(scale)), ratio, height, width)
        if w < 1 or h < 1:
            continue
        x = int(rng.integers(0, width - w + 1))
        y = int(rng.integers(0, height - h + 1))
        return PatchSpec(image_id, x, y, w, h, scale, ratio)
    raise PatchRejected(f"no feasible patch in a {height}x{width} image")


def jitter_patch(p: PatchSpec, image_dims: tuple[int, int], cfg: SamplerConfig,
                 rng: np.random.Generator) -> PatchSpec:
    """Shifted and rescaled copy of ``p``, clamped back into the image."""
    height, width = image_dims
    m = rng.uniform(cfg.pair_scale_min, cfg.pair_scale_max)
    dx = rng.uniform(-cfg.pair_jitter_max, cfg.pair_jitter_max) * p.w
    dy = rng.uniform(-cfg.pair_jitter_max, cfg.pair_jitter_max) * p.h
    h2 = max(1, int(round(p.h * m)))
    w2, h2 = _geometry(h2, p.h / p.w, height, width)
    w2 = max(w2, 1)
    cx = p.x + p.w / 2 + dx
    cy = p.y + p.h / 2 + dy
    x2 = int(min(max(round(cx - w2 / 2), 0), width - w2))
    y2 = int(min(max(round(cy - h2 / 2), 0), height - h2))
    scale = min(max(p.scale * m, cfg.scale_min), cfg.scale_max)
    return PatchSpec(p.image_id, x2, y2, w2, h2, scale, h2 / w2)


def sample_pair(image_dims: tuple[int, int], cfg: SamplerConfig, rng: np.random.Generator,
                image_id: str = "", max_restarts: int = 100) -> tuple[PatchSpec, PatchSpec]:
    """Two patches with IoU above ``cfg.iou_min``.

    The second patch is a jittered copy of the first; after ``cfg.pair_retries``
    rejected jitters the first patch is redrawn.
    """
    for _ in range(max_restarts):
        p1 = sample_patch(image_dims, cfg, rng, image_id)
        for _ in range(cfg.pair_retries):
            p2 = jitter_patch(p1, image_dims, cfg, rng)
            if iou(p1.box, p2.box) > cfg.iou_min:
                return p1, p2
    raise PatchRejected(f"no pair with IoU > {cfg.iou_min} in a {image_dims} image")


# ---------------------------------------------------------------------------
# pixel and gradient tensors

def _check_inside(img: ScaledImage, spec: PatchSpec) -> None:
    if spec.w < 1 or spec.h < 1 or not spec.inside(img.height, img.width):
        raise ValueError(f"patch {spec} outside image {img.image_id} ({img.height}x{img.width})")


def extract(img: ScaledImage, spec: PatchSpec) -> PixelPatch:
    """Crop ``spec`` and bilinearly resize it to 32x32 RGB."""
    return PixelPatch(spec, extract_batch(img, [spec])[0])


def extract_batch(img: ScaledImage, specs: Iterable[PatchSpec], size: int = PATCH_SIZE) -> np.ndarray:
    specs = list(specs)
    out = np.empty((len(specs), size, size, 3), dtype=np.uint8)
    pil = Image.fromarray(img.pixels)
    for i, s in enumerate(specs):
        _check_inside(img, s)
        out[i] = np.asarray(pil.resize((size, size), Image.BILINEAR, box=(s.x, s.y, s.x + s.w, s.y + s.h)))
    return out


def sobel_batch(rgb: np.ndarray) -> np.ndarray:
    """(n, H, W, 3) uint8 -> (n, 2, H, W) float32 Sobel (dx, dy) of the luma.

    Responses are divided by 4 (the kernel's response to a unit step) and
    clipped to [-1, 1]; borders use mirror padding.
    """
    rgb = np.asarray(rgb)
    if rgb.ndim == 3:
        rgb = rgb[None]
    luma = (rgb.astype(np.float32) / 255.0) @ LUMA
    padded = np.pad(luma, ((0, 0), (1, 1), (1, 1)), mode="reflect")
    n, h, w = luma.shape
    # separable form: smooth [1, 2, 1] across, difference [-1, 0, 1] along
    smooth_v = padded[:, :-2, :] + 2 * padded[:, 1:-1, :] + padded[:, 2:, :]
    smooth_h = padded[:, :, :-2] + 2 * padded[:, :, 1:-1] + padded[:, :, 2:]
    out = np.empty((n, 2, h, w), dtype=np.float32)
    out[:, 0] = smooth_v[:, :, 2:] - smooth_v[:, :, :-2]
    out[:, 1] = smooth_h[:, 2:, :] - smooth_h[:, :-2, :]
    return np.clip(out / SOBEL_MAX, -1.0, 1.0)


def sobel(p: PixelPatch) -> GradientPatch:
    return GradientPatch(p.spec, sobel_batch(p.rgb)[0])


# ---------------------------------------------------------------------------
# serialization

def write_patch_specs(path: str | os.PathLike, specs: Iterable[PatchSpec]) -> None:
    with open(path, "w") as f:
        for s in specs:
            f.write(json.dumps(asdict(s)) + "\n")


def read_patch_specs(path: str | os.PathLike) -> list[PatchSpec]:
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                out.append(PatchSpec(d["image_id"], int(d["x"]), int(d["y"]), int(d["w"]), int(d["h"]),
                                     float(d["scale"]), float(d["ratio"])))
    return out


def specs_to_array(specs: Sequence[PatchSpec]) -> np.ndarray:
    return np.array([[s.x, s.y, s.w, s.h] for s in specs], dtype=np.float64).reshape(-1, 4)
