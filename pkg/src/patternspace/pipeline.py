"""Seeded end-to-end steps shared by the CLI and the acceptance runs."""

from __future__ import annotations

import dataclasses
import logging
from typing import Callable, Sequence

import numpy as np

from patternspace.config import PipelineConfig
from patternspace.dataset import Box, ScaledImage
from patternspace.discovery import Detection, DiscoveryResult, discover, sample_pool_specs
from patternspace.embedding.train import Checkpoint, train
from patternspace.evaluation import EvalReport, aggregate
from patternspace.objectness import BackgroundModel, fit_background_model
from patternspace.patches import extract_batch

logger = logging.getLogger(__name__)


def needs_background(cfg: PipelineConfig) -> bool:
    uses_b = cfg.train.modulation and cfg.objectness.k2 != 0
    return uses_b or cfg.discovery.post_objectness


def fit_background(images: Sequence[ScaledImage], cfg: PipelineConfig) -> BackgroundModel:
    obj = cfg.objectness
    specs = sample_pool_specs(images, obj.bg_patches_per_image, cfg.sampler, cfg.seed_for("background"))
    pool = np.concatenate([extract_batch(img, s) for img, s in zip(images, specs)])
    model = fit_background_model(pool, obj.bg_k, seed=cfg.seed_for("kmeans"))
    logger.info("background model: %d centers from %d patches, maxscore %.3f", model.k, len(pool), model.maxscore)
    return model


def train_config(cfg: PipelineConfig):
    """The training config with its seed drawn from the master seed."""
    return dataclasses.replace(cfg.train, seed=cfg.seed_for("train"))


def run_training(images: Sequence[ScaledImage], cfg: PipelineConfig, bg_model: BackgroundModel | None,
                 resume: Checkpoint | None = None,
                 on_epoch: Callable[[int, dict], None] | None = None,
                 on_batch: Callable[[dict], None] | None = None) -> Checkpoint:
    meta = {"config_hash": cfg.config_hash(), "seed": cfg.seed}
    return train(images, train_config(cfg), cfg.sampler, cfg.objectness, bg_model, resume, meta,
                 on_epoch, on_batch)


def run_discovery(images: Sequence[ScaledImage], checkpoint: Checkpoint, bg_model: BackgroundModel | None,
                  cfg: PipelineConfig, n_runs: int | None = None,
                  cache_dir=None) -> list[DiscoveryResult]:
    """Independent inference runs; run ``r`` samples its pool from substream (inference, r)."""
    n_runs = cfg.eval.n_runs if n_runs is None else n_runs
    seed = cfg.seed_for("inference")
    bg = bg_model if cfg.discovery.post_objectness else None
    results = []
    for r in range(n_runs):
        res = discover(images, checkpoint, bg, cfg.discovery, cfg.sampler, cfg.objectness,
                       seed=seed, run=r, cache_dir=cache_dir)
        logger.info("discovery run %d/%d: %d detections", r + 1, n_runs,
                    sum(len(v) for v in res.detections.values()))
        results.append(res)
    return results


def run_evaluation(runs: Sequence[dict[str, list[Detection]]], gts: dict[str, list[Box]],
                   cfg: PipelineConfig) -> list[EvalReport]:
    runs = list(runs) or [{}]
    return [aggregate(runs, gts, t, cfg.eval.max_predictions, cfg.eval.corloc_top1, cfg.label())
            for t in cfg.eval.iou_thres]
