"""Per-patch tensors and objectness scores, shared by training and discovery."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from patternspace.dataset import ScaledImage
from patternspace.objectness import (
    N_HUE,
    N_SAT,
    BackgroundModel,
    BandGeometry,
    bscore_norm_batch,
    hs_bin_index,
    hscore_raw_batch,
)
from patternspace.patches import PatchSpec, extract_batch, sobel_batch


@dataclass
class ObjectnessConfig:
    band_factor: float = 0.35
    n_hue: int = N_HUE
    n_sat: int = N_SAT
    bg_k: int = 5
    bg_patches_per_image: int = 50
    hscore_k: float = 0.5
    k1: float = 1.0
    k2: float = 1.0
    population_capacity: int = 50_000

    def __post_init__(self):
        if self.band_factor <= 0:
            raise ValueError("band_factor must be positive")
        if self.bg_k < 1 or self.n_hue < 1 or self.n_sat < 1:
            raise ValueError("bin and cluster counts must be positive")

    @property
    def geometry(self) -> BandGeometry:
        return BandGeometry(self.band_factor)


@dataclass
class PatchBatch:
    specs: list[PatchSpec]
    rgb: np.ndarray  # n x 32 x 32 x 3 uint8
    grads: np.ndarray  # n x 2 x 32 x 32 float32
    hscore: np.ndarray | None = None  # raw Hellinger scores
    bscore: np.ndarray | None = None  # normalized background distances


class ImageContext:
    """A scaled image with its H-S bin map computed once."""

    def __init__(self, img: ScaledImage, cfg: ObjectnessConfig):
        self.img = img
        self.cfg = cfg
        self._bins = None

    @property
    def bins(self) -> np.ndarray:
        if self._bins is None:
            self._bins = hs_bin_index(self.img.pixels, self.cfg.n_hue, self.cfg.n_sat)
        return self._bins

    def features(self, specs: Sequence[PatchSpec], bg_model: BackgroundModel | None = None,
                 with_hscore: bool = True) -> PatchBatch:
        rgb = extract_batch(self.img, specs)
        batch = PatchBatch(list(specs), rgb, sobel_batch(rgb))
        if with_hscore:
            batch.hscore, _ = hscore_raw_batch(self.img, specs, self.cfg.geometry, self.cfg.n_hue,
                                               self.cfg.n_sat, bin_index=self.bins)
        if bg_model is not None:
            batch.bscore = bscore_norm_batch(rgb, bg_model)
        return batch
