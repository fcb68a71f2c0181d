"""Closed-form objectness of a patch.

hscore: Hellinger distance between the hue-saturation histograms of a patch
and of the band surrounding it. bscore: distance in pixel space from the patch
to the nearest of k background cluster centers, normalized by its maximum
over the fitting pool.
"""

from __future__ import annotations

import json
import logging
import os
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from patternspace.dataset import ScaledImage
from patternspace.patches import PatchSpec, PixelPatch

logger = logging.getLogger(__name__)

N_HUE = 30
N_SAT = 32


class DegenerateBackgroundModel(ValueError):
    pass


@dataclass
class Histogram2D:
    bins: np.ndarray  # n_h x n_s counts

    @property
    def n_h(self) -> int:
        return self.bins.shape[0]

    @property
    def n_s(self) -> int:
        return self.bins.shape[1]

    @property
    def total(self) -> float:
        return float(self.bins.sum())


@dataclass(frozen=True)
class BandGeometry:
    band_factor: float = 0.35

    def outer(self, spec: PatchSpec, height: int, width: int) -> tuple[int, int, int, int]:
        """Outer rectangle as clipped (x1, y1, x2, y2)."""
        mx = int(round(self.band_factor * spec.w))
        my = int(round(self.band_factor * spec.h))
        return (max(spec.x - mx, 0), max(spec.y - my, 0),
                min(spec.x + spec.w + mx, width), min(spec.y + spec.h + my, height))


# ---------------------------------------------------------------------------
# histograms

def rgb_to_hs(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hue in degrees [0, 360) and saturation in [0, 1] of uint8 RGB pixels."""
    rgb = np.asarray(pixels, dtype=np.float64).reshape(-1, 3) / 255.0
    r, g, b = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    mx = rgb.max(axis=1)
    mn = rgb.min(axis=1)
    delta = mx - mn
    sat = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    hue = np.where(mx == r, ((g - b) / safe) % 6.0,
                   np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    hue = np.where(delta > 0, hue * 60.0, 0.0) % 360.0
    shape = np.asarray(pixels).shape[:-1]
    return hue.reshape(shape), sat.reshape(shape)


def hs_bin_index(pixels: np.ndarray, n_h: int = N_HUE, n_s: int = N_SAT) -> np.ndarray:
    """Flat H-S bin index (h_bin * n_s + s_bin) of every pixel.

    Integer arithmetic, so pixels on a bin boundary land in the same bin as
    exact rational hue/saturation would put them.
    """
    px = np.asarray(pixels, dtype=np.int64)
    r, g, b = px[..., 0], px[..., 1], px[..., 2]
    mx = px.max(axis=-1)
    d = mx - px.min(axis=-1)
    safe_d = np.where(d > 0, d, 1)
    # hue / 60 degrees as num / d, num in [0, 6d)
    num = np.where(mx == r, (g - b) % (6 * safe_d),
                   np.where(mx == g, b - r + 2 * d, r - g + 4 * d))
    hb = np.where(d > 0, num * n_h // (6 * safe_d), 0)
    sb = np.where(mx > 0, d * n_s // np.where(mx > 0, mx, 1), 0)
    return np.minimum(hb, n_h - 1) * n_s + np.minimum(sb, n_s - 1)


def hs_histogram(pixels: np.ndarray, n_h: int = N_HUE, n_s: int = N_SAT) -> Histogram2D:
    idx = hs_bin_index(pixels, n_h, n_s).ravel()
    if idx.size == 0:
        raise ValueError("histogram of an empty pixel set")
    return Histogram2D(np.bincount(idx, minlength=n_h * n_s).reshape(n_h, n_s).astype(np.float64))


def hellinger(h1: Histogram2D | np.ndarray, h2: Histogram2D | np.ndarray) -> float:
    """d = sqrt(1 - sum sqrt(H1*H2) / sqrt(mean(H1) * mean(H2) * N^2)), N = bin count."""
    a = np.asarray(h1.bins if isinstance(h1, Histogram2D) else h1, dtype=np.float64)
    b = np.asarray(h2.bins if isinstance(h2, Histogram2D) else h2, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"histogram layouts differ: {a.shape} vs {b.shape}")
    n = a.size
    m1, m2 = a.mean(), b.mean()
    if m1 <= 0 or m2 <= 0:
        raise ValueError("hellinger of a zero-total histogram")
    bc = np.sqrt(a * b).sum() / np.sqrt(m1 * m2 * n * n)
    return float(np.sqrt(np.clip(1.0 - bc, 0.0, 1.0)))


def _hellinger_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = a.shape[1]
    bc = np.sqrt(a * b).sum(axis=1) / np.sqrt(a.mean(axis=1) * b.mean(axis=1) * n * n)
    return np.sqrt(np.clip(1.0 - bc, 0.0, 1.0))


# ---------------------------------------------------------------------------
# hscore

def hscore_raw_batch(img: ScaledImage, specs: Sequence[PatchSpec], geom: BandGeometry = BandGeometry(),
                     n_h: int = N_HUE, n_s: int = N_SAT,
                     bin_index: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Raw hscores of many patches of one image.

    Returns ``(scores, degenerate)``; a patch whose band is empty after
    clipping scores 0.0 and is flagged.
    """
    if bin_index is None:
        bin_index = hs_bin_index(img.pixels, n_h, n_s)
    nb = n_h * n_s
    height, width = bin_index.shape
    inner = np.zeros((len(specs), nb))
    band = np.zeros((len(specs), nb))
    for i, s in enumerate(specs):
        if s.w < 1 or s.h < 1 or not s.inside(height, width):
            raise ValueError(f"patch {s} outside image {img.image_id}")
        x1, y1, x2, y2 = geom.outer(s, height, width)
        hin = np.bincount(bin_index[s.y:s.y + s.h, s.x:s.x + s.w].ravel(), minlength=nb)
        hout = np.bincount(bin_index[y1:y2, x1:x2].ravel(), minlength=nb)
        inner[i] = hin
        band[i] = hout - hin
    degenerate = band.sum(axis=1) <= 0
    scores = np.zeros(len(specs))
    ok = ~degenerate
    if ok.any():
        scores[ok] = _hellinger_rows(inner[ok], band[ok])
    return scores, degenerate


def hscore_raw(img: ScaledImage, spec: PatchSpec, geom: BandGeometry = BandGeometry(),
               n_h: int = N_HUE, n_s: int = N_SAT) -> float:
    scores, degenerate = hscore_raw_batch(img, [spec], geom, n_h, n_s)
    if degenerate[0]:
        logger.debug("empty band around %s in %s", spec, img.image_id)
    return float(scores[0])


def hscore_adjusted(raw, population_mean: float, k: float = 0.5):
    """Mean-subtracted hscore; negative values push a pair apart."""
    return raw - k * population_mean


def pair_hscore(s_i, s_j):
    return 0.5 * (s_i + s_j)


class RollingMean:
    """Mean of the last ``capacity`` values pushed."""

    def __init__(self, capacity: int = 50_000):
        self.capacity = capacity
        self._buf = np.zeros(capacity)
        self._n = 0
        self._pos = 0

    def push(self, values) -> None:
        v = np.asarray(values, dtype=np.float64).ravel()[-self.capacity:]
        end = self._pos + len(v)
        if end <= self.capacity:
            self._buf[self._pos:end] = v
        else:
            cut = self.capacity - self._pos
            self._buf[self._pos:] = v[:cut]
            self._buf[:end - self.capacity] = v[cut:]
        self._pos = end % self.capacity
        self._n = min(self._n + len(v), self.capacity)

    @property
    def count(self) -> int:
        return self._n

    @property
    def mean(self) -> float:
        if self._n == 0:
            return 0.0
        return float(self._buf[:self._n].mean())


# ---------------------------------------------------------------------------
# background model

@dataclass
class BackgroundModel:
    centers: np.ndarray  # k x 3072, pixel values scaled to [0, 1]
    maxscore: float
    seed: int | None = None
    pool_size: int = 0

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    def save(self, prefix: str | os.PathLike) -> None:
        prefix = Path(prefix)
        np.save(prefix.with_suffix(".npy"), self.centers)
        with open(prefix.with_suffix(".json"), "w") as f:
            json.dump({"k": self.k, "maxscore": self.maxscore, "seed": self.seed,
                       "pool_size": self.pool_size}, f, indent=1)

    @classmethod
    def load(cls, prefix: str | os.PathLike) -> "BackgroundModel":
        prefix = Path(prefix)
        with open(prefix.with_suffix(".json")) as f:
            meta = json.load(f)
        centers = np.load(prefix.with_suffix(".npy"))
        if centers.shape[0] != meta["k"]:
            raise ValueError(f"{prefix}: center count {centers.shape[0]} != k {meta['k']}")
        return cls(centers, float(meta["maxscore"]), meta.get("seed"), int(meta.get("pool_size", 0)))


def _flatten(patches) -> np.ndarray:
    if isinstance(patches, np.ndarray):
        arr = patches
    else:
        arr = np.stack([p.rgb if isinstance(p, PixelPatch) else p for p in patches]) if len(patches) else np.zeros((0, 32, 32, 3))
    return arr.reshape(len(arr), -1).astype(np.float64) / 255.0


def min_center_distance(vectors: np.ndarray, centers: np.ndarray, chunk: int = 1024) -> np.ndarray:
    out = np.empty(len(vectors))
    for start in range(0, len(vectors), chunk):
        diff = vectors[start:start + chunk, None, :] - centers[None, :, :]
        out[start:start + chunk] = np.sqrt((diff ** 2).sum(axis=2)).min(axis=1)
    return out


def fit_background_model(patch_pool, k: int = 5, seed: int = 0, n_init: int = 10,
                         max_iter: int = 300, tol: float = 1e-4) -> BackgroundModel:
    """k-means over flattened 32x32x3 patches (k-means++ init, best of ``n_init``)."""
    from sklearn.cluster import KMeans

    x = _flatten(patch_pool)
    if len(x) < k:
        raise ValueError(f"background pool has {len(x)} patches, need at least k={k}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # duplicate points -> fewer distinct clusters than k
        km = KMeans(n_clusters=k, init="k-means++", n_init=n_init, max_iter=max_iter, tol=tol,
                    random_state=seed).fit(x)
    centers = km.cluster_centers_.astype(np.float64)
    maxscore = float(min_center_distance(x, centers).max())
    if not maxscore > 1e-12:
        raise DegenerateBackgroundModel("all pool patches coincide with a center (maxscore = 0)")
    return BackgroundModel(centers, maxscore, seed, len(x))


def bscore_raw_batch(patches, model: BackgroundModel) -> np.ndarray:
    return min_center_distance(_flatten(patches), model.centers)


def bscore_norm_batch(patches, model: BackgroundModel) -> np.ndarray:
    if not model.maxscore > 0:
        raise DegenerateBackgroundModel("background model has maxscore 0")
    return np.clip(bscore_raw_batch(patches, model) / model.maxscore, 0.0, 1.0)


def bscore_norm(p: PixelPatch | np.ndarray, model: BackgroundModel) -> float:
    rgb = p.rgb if isinstance(p, PixelPatch) else p
    return float(bscore_norm_batch(np.asarray(rgb)[None], model)[0])


def combine_g(a, b, k1: float = 1.0, k2: float = 1.0):
    return k1 * a + k2 * b
