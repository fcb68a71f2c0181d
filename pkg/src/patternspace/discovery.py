"""Object extraction by 1-mean clustering of pattern vectors.

Every image contributes a fixed number of random patches to one pool; a
patch's distance to the pool mean (lscore), optionally plus the
post-objectness penalty, ranks it, and per-image NMS over the lowest-scoring
candidates yields the discovered boxes.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from patternspace.dataset import Box, ScaledImage
from patternspace.embedding.model import PatternVAE
from patternspace.embedding.train import Checkpoint, embed_arrays
from patternspace.features import ImageContext, ObjectnessConfig
from patternspace.objectness import BackgroundModel
from patternspace.patches import PatchRejected, PatchSpec, SamplerConfig, iou_matrix, sample_patch, specs_to_array


@dataclass
class DiscoveryConfig:
    n_per_image: int = 200
    n_candidate: int = 20
    max_keep: int = 5
    iou_nms: float = 0.5
    post_objectness: bool = True
    alpha_h: float | None = None  # None: mean lscore of the pool
    alpha_b: float | None = None

    def __post_init__(self):
        if self.n_per_image < 1 or self.n_candidate < 1 or self.max_keep < 1:
            raise ValueError("patch, candidate and keep counts must be positive")
        if not 0 < self.iou_nms <= 1:
            raise ValueError("iou_nms must lie in (0, 1]")


@dataclass
class Detection:
    image_id: str
    box: Box
    score: float
    rank: int


@dataclass
class PatternPool:
    specs: list[PatchSpec]
    image_index: np.ndarray  # entry -> position in image_ids
    image_ids: list[str]
    z_mean: np.ndarray
    hscore: np.ndarray
    bscore: np.ndarray
    center: np.ndarray = field(init=False)
    lscore: np.ndarray = field(init=False)

    def __post_init__(self):
        self.center = self.z_mean.mean(axis=0)
        self.lscore = np.linalg.norm(self.z_mean - self.center, axis=1)

    def __len__(self) -> int:
        return len(self.specs)

    def entries_of(self, image_id: str) -> np.ndarray:
        return np.flatnonzero(self.image_index == self.image_ids.index(image_id))

    def index_of(self, spec: PatchSpec) -> int:
        for i, s in enumerate(self.specs):
            if s == spec:
                return i
        raise KeyError(f"{spec} not in pool")

    def save(self, path: str | os.PathLike) -> None:
        np.savez(path, boxes=specs_to_array(self.specs),
                 scale_ratio=np.array([[s.scale, s.ratio] for s in self.specs]).reshape(-1, 2),
                 image_index=self.image_index, image_ids=np.array(self.image_ids),
                 z_mean=self.z_mean, hscore=self.hscore, bscore=self.bscore)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PatternPool":
        d = np.load(path)
        ids = [str(s) for s in d["image_ids"]]
        idx = d["image_index"]
        specs = [PatchSpec(ids[k], int(b[0]), int(b[1]), int(b[2]), int(b[3]), float(sr[0]), float(sr[1]))
                 for k, b, sr in zip(idx, d["boxes"], d["scale_ratio"])]
        return cls(specs, idx, ids, d["z_mean"], d["hscore"], d["bscore"])


def specs_hash(specs: Sequence[PatchSpec]) -> str:
    h = hashlib.sha256()
    for s in specs:
        h.update(f"{s.image_id}|{s.x}|{s.y}|{s.w}|{s.h}\n".encode())
    return h.hexdigest()[:16]


def sample_pool_specs(images: Sequence[ScaledImage], n_per_image: int, sampler: SamplerConfig,
                      seed: int, run: int = 0) -> list[list[PatchSpec]]:
    """Per-image patch lists; image ``i`` of run ``r`` draws from substream (seed, r, i)."""
    out = []
    for i, img in enumerate(images):
        rng = np.random.default_rng([seed, run, i, 2])
        specs = []
        while len(specs) < n_per_image:
            try:
                specs.append(sample_patch(img.dims, sampler, rng, img.image_id))
            except PatchRejected:
                continue
        out.append(specs)
    return out


def build_pool(images: Sequence[ScaledImage], model: PatternVAE | Checkpoint,
               bg_model: BackgroundModel | None, n_per_image: int = 200,
               sampler: SamplerConfig | None = None, obj: ObjectnessConfig | None = None,
               seed: int = 0, run: int = 0, cache_dir: str | os.PathLike | None = None) -> PatternPool:
    if not images:
        raise ValueError("cannot build a pattern pool from an empty dataset")
    sampler = sampler or SamplerConfig()
    obj = obj or ObjectnessConfig()
    if isinstance(model, Checkpoint):
        ckpt_hash = model.weights_hash()
        model = model.build_model()
    else:
        ckpt_hash = None
    per_image = sample_pool_specs(images, n_per_image, sampler, seed, run)
    specs = [s for group in per_image for s in group]
    image_index = np.repeat(np.arange(len(images)), [len(g) for g in per_image])

    cache = None
    if cache_dir is not None and ckpt_hash is not None:
        h = hashlib.sha256(json.dumps(asdict(obj), sort_keys=True).encode())
        if bg_model is not None:
            h.update(np.ascontiguousarray(bg_model.centers).tobytes())
            h.update(repr(bg_model.maxscore).encode())
        key = f"{ckpt_hash}_{specs_hash(specs)}_{h.hexdigest()[:8]}"
        cache = Path(cache_dir) / f"patterns_{key}.npz"
        if cache.exists():
            d = np.load(cache)
            return PatternPool(specs, image_index, [im.image_id for im in images],
                               d["z_mean"], d["hscore"], d["bscore"])

    grads, hs, bs = [], [], []
    for img, group in zip(images, per_image):
        feats = ImageContext(img, obj).features(group, bg_model, with_hscore=True)
        grads.append(feats.grads)
        hs.append(feats.hscore)
        bs.append(feats.bscore if feats.bscore is not None else np.zeros(len(group)))
    z_mean, _ = embed_arrays(model, np.concatenate(grads))
    pool = PatternPool(specs, image_index, [im.image_id for im in images], z_mean,
                       np.concatenate(hs), np.concatenate(bs))
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        np.savez(cache, z_mean=pool.z_mean, hscore=pool.hscore, bscore=pool.bscore)
    return pool


def po_score(lscore, hscore, bscore, alpha_h: float, alpha_b: float):
    """lscore + alpha_h (1 - hscore) + alpha_b (1 - bscore); lower is more object-like."""
    return lscore + alpha_h * (1.0 - hscore) + alpha_b * (1.0 - bscore)


def pool_scores(pool: PatternPool, cfg: DiscoveryConfig) -> tuple[np.ndarray, float, float]:
    if not cfg.post_objectness:
        return pool.lscore.copy(), 0.0, 0.0
    mean_l = float(pool.lscore.mean())
    ah = mean_l if cfg.alpha_h is None else cfg.alpha_h
    ab = mean_l if cfg.alpha_b is None else cfg.alpha_b
    return po_score(pool.lscore, pool.hscore, pool.bscore, ah, ab), ah, ab


def select_candidates(pool: PatternPool, image_id: str, scores: np.ndarray, n_candidate: int = 20) -> np.ndarray:
    """Pool indices of the ``n_candidate`` lowest-score patches of an image,
    ascending by score, ties by sampling order."""
    entries = pool.entries_of(image_id)
    order = np.lexsort((entries, scores[entries]))
    return entries[order[:n_candidate]]


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thres: float = 0.5, max_keep: int = 5) -> list[int]:
    """Greedy suppression keeping the lowest score first.

    Returns positions into ``boxes`` of the kept candidates, best first.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = list(np.argsort(np.asarray(scores), kind="stable"))
    overlaps = iou_matrix(boxes, boxes)
    keep: list[int] = []
    while order and len(keep) < max_keep:
        i = order.pop(0)
        keep.append(int(i))
        order = [j for j in order if overlaps[i, j] <= iou_thres]
    return keep


@dataclass
class DiscoveryResult:
    detections: dict[str, list[Detection]]
    pool: PatternPool
    alpha_h: float
    alpha_b: float
    meta: dict = field(default_factory=dict)


def extract_objects(pool: PatternPool, cfg: DiscoveryConfig) -> tuple[dict[str, list[Detection]], float, float]:
    scores, ah, ab = pool_scores(pool, cfg)
    detections: dict[str, list[Detection]] = {}
    for image_id in pool.image_ids:
        cand = select_candidates(pool, image_id, scores, cfg.n_candidate)
        boxes = specs_to_array([pool.specs[i] for i in cand])
        kept = nms(boxes, scores[cand], cfg.iou_nms, cfg.max_keep)
        detections[image_id] = [
            Detection(image_id, pool.specs[cand[k]].box, float(scores[cand[k]]), rank + 1)
            for rank, k in enumerate(kept)
        ]
    return detections, ah, ab


def discover(images: Sequence[ScaledImage], checkpoint: Checkpoint | PatternVAE, bg_model: BackgroundModel | None,
             cfg: DiscoveryConfig | None = None, sampler: SamplerConfig | None = None,
             obj: ObjectnessConfig | None = None, seed: int = 0, run: int = 0,
             cache_dir: str | os.PathLike | None = None) -> DiscoveryResult:
    cfg = cfg or DiscoveryConfig()
    if cfg.post_objectness and bg_model is None:
        raise ValueError("post-objectness scoring needs a background model")
    pool = build_pool(images, checkpoint, bg_model, cfg.n_per_image, sampler, obj, seed, run, cache_dir)
    detections, ah, ab = extract_objects(pool, cfg)
    meta = {"seed": seed, "run": run, "alpha_h": ah, "alpha_b": ab, "discovery": asdict(cfg)}
    return DiscoveryResult(detections, pool, ah, ab, meta)


def nearest_neighbors(pool: PatternPool, query: PatchSpec | int, k: int = 10,
                      exclude_same_image: bool = True) -> list[tuple[int, float]]:
    """``k`` nearest pool entries to ``query`` in z_mean space as (index, distance)."""
    qi = query if isinstance(query, (int, np.integer)) else pool.index_of(query)
    d = np.linalg.norm(pool.z_mean - pool.z_mean[qi], axis=1)
    eligible = np.arange(len(pool)) != qi
    if exclude_same_image:
        eligible &= pool.image_index != pool.image_index[qi]
    idx = np.flatnonzero(eligible)
    order = np.lexsort((idx, d[idx]))[:k]
    return [(int(idx[o]), float(d[idx[o]])) for o in order]


# ---------------------------------------------------------------------------
# detections file

def write_detections(path: str | os.PathLike, runs: Sequence[dict[str, list[Detection]]],
                     scale_factors: dict[str, float], meta: dict | None = None) -> None:
    """Line-delimited JSON: a ``{"meta": ...}`` header, then one detection per
    line in scaled-image coordinates with the image's ``scale_factor``."""
    with open(path, "w") as f:
        f.write(json.dumps({"meta": meta or {}}, sort_keys=True) + "\n")
        for run, dets in enumerate(runs):
            for image_id in sorted(dets):
                for d in dets[image_id]:
                    f.write(json.dumps({
                        "image_id": image_id, "x": d.box.x, "y": d.box.y, "w": d.box.w, "h": d.box.h,
                        "score": round(d.score, 6), "rank": d.rank, "run": run,
                        "scale_factor": scale_factors.get(image_id, 1.0),
                    }, sort_keys=True) + "\n")


def read_detections(path: str | os.PathLike) -> tuple[list[dict[str, list[Detection]]], dict]:
    runs: dict[int, dict[str, list[Detection]]] = {}
    meta: dict = {}
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "meta" in rec and "image_id" not in rec:
                meta = rec["meta"]
                continue
            run = int(rec.get("run", 0))
            det = Detection(rec["image_id"], Box(rec["x"], rec["y"], rec["w"], rec["h"]),
                            float(rec["score"]), int(rec["rank"]))
            runs.setdefault(run, {}).setdefault(det.image_id, []).append(det)
    n_runs = max(int(meta.get("n_runs", 0)), max(runs, default=-1) + 1)
    out = []
    for r in range(n_runs):
        dets = runs.get(r, {})
        for v in dets.values():
            v.sort(key=lambda d: d.rank)
        out.append(dets)
    return out, meta
