"""Objectness-modulated contrastive VAE training and pattern-vector inference."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from patternspace.dataset import ScaledImage
from patternspace.embedding.losses import NonFiniteLoss, modulated_batch_loss
from patternspace.embedding.model import LATENT_DIM, PatternVAE
from patternspace.features import ImageContext, ObjectnessConfig
from patternspace.objectness import BackgroundModel, RollingMean, combine_g, hscore_adjusted, pair_hscore
from patternspace.patches import PatchRejected, SamplerConfig, sample_pair

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 256
    tau: float = 0.2
    lambda_contrastive: float = 1.0
    lambda_recon: float = 1.0
    lambda_kld: float = 0.1
    lr: float = 3e-4
    epochs: int = 200
    patches_per_image_per_epoch: int = 40
    modulation: bool = True
    width: int = 64
    latent_dim: int = LATENT_DIM
    contrastive_latent: str = "mean"  # "mean": z_mean, "sampled": reparameterized z
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2: the contrastive loss needs negatives")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if min(self.lambda_contrastive, self.lambda_recon, self.lambda_kld) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lr <= 0 or self.epochs < 0 or self.patches_per_image_per_epoch < 1 or self.width < 1:
            raise ValueError("invalid training hyperparameters")
        if self.contrastive_latent not in ("mean", "sampled"):
            raise ValueError("contrastive_latent must be 'mean' or 'sampled'")


@dataclass
class PatternVector:
    z_mean: np.ndarray
    sigma: np.ndarray

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.z_mean + self.sigma * rng.standard_normal(self.z_mean.shape)


def reparameterize(v: PatternVector, rng: np.random.Generator) -> np.ndarray:
    return v.sample(rng)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class Checkpoint:
    model_state: dict
    train_config: dict
    epoch: int = 0
    loss_history: list = field(default_factory=list)
    optimizer_state: dict | None = None
    meta: dict = field(default_factory=dict)  # config hash, seed, background model reference

    def build_model(self) -> PatternVAE:
        cfg = self.train_config
        model = PatternVAE(width=cfg["width"], latent_dim=cfg["latent_dim"])
        model.load_state_dict(self.model_state)
        model.eval()
        return model

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.model_state):
            h.update(k.encode())
            h.update(self.model_state[k].detach().cpu().numpy().tobytes())
        return h.hexdigest()[:16]

    def metadata(self) -> dict:
        return {"epoch": self.epoch, "train_config": self.train_config,
                "loss_history": self.loss_history, **self.meta}

    def save(self, path: str | os.PathLike) -> Path:
        """Atomic write of ``path`` (torch) plus ``path``.json metadata."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {"model_state": self.model_state, "optimizer_state": self.optimizer_state,
                   "train_config": self.train_config, "epoch": self.epoch,
                   "loss_history": self.loss_history, "meta": self.meta}
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        os.close(fd)
        torch.save(payload, tmp)
        os.replace(tmp, path)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w") as f:
            json.dump(self.metadata(), f, indent=1)
        os.replace(tmp, str(path) + ".json")
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        d = torch.load(path, map_location="cpu", weights_only=False)
        return cls(d["model_state"], d["train_config"], d["epoch"], d["loss_history"],
                   d.get("optimizer_state"), d.get("meta", {}))


# ---------------------------------------------------------------------------
# epoch data

@dataclass
class EpochData:
    grads1: np.ndarray
    grads2: np.ndarray
    weights: np.ndarray | None
    image_index: np.ndarray


def sample_epoch(contexts: Sequence[ImageContext], n_pairs: int, sampler: SamplerConfig,
                 rng: np.random.Generator, obj: ObjectnessConfig, bg_model: BackgroundModel | None,
                 population: RollingMean | None, modulation: bool) -> EpochData:
    """Draw ``n_pairs`` IoU pairs, each from an independently chosen image,
    and their modulation weights g(hscore, bscore)."""
    image_index = rng.integers(0, len(contexts), size=n_pairs)
    specs1, specs2 = [None] * n_pairs, [None] * n_pairs
    for i, k in enumerate(image_index):
        img = contexts[k].img
        while True:
            try:
                specs1[i], specs2[i] = sample_pair(img.dims, sampler, rng, img.image_id)
                break
            except PatchRejected:
                continue

    grads1 = np.empty((n_pairs, 2, 32, 32), dtype=np.float32)
    grads2 = np.empty_like(grads1)
    need_h = modulation and obj.k1 != 0
    need_b = modulation and obj.k2 != 0
    h1 = np.zeros(n_pairs)
    h2 = np.zeros(n_pairs)
    b1 = np.zeros(n_pairs)
    b2 = np.zeros(n_pairs)
    for k in np.unique(image_index):
        rows = np.flatnonzero(image_index == k)
        ctx = contexts[k]
        specs = [specs1[i] for i in rows] + [specs2[i] for i in rows]
        feats = ctx.features(specs, bg_model if need_b else None, with_hscore=need_h)
        n = len(rows)
        grads1[rows] = feats.grads[:n]
        grads2[rows] = feats.grads[n:]
        if need_h:
            h1[rows], h2[rows] = feats.hscore[:n], feats.hscore[n:]
        if need_b:
            b1[rows], b2[rows] = feats.bscore[:n], feats.bscore[n:]

    weights = None
    if modulation:
        hpair = np.zeros(n_pairs)
        if need_h:
            population.push(np.concatenate([h1, h2]))
            mean = population.mean
            hpair = pair_hscore(hscore_adjusted(h1, mean, obj.hscore_k), hscore_adjusted(h2, mean, obj.hscore_k))
        bpair = pair_hscore(b1, b2)
        weights = combine_g(hpair, bpair, obj.k1, obj.k2)
    return EpochData(grads1, grads2, weights, image_index)


# ---------------------------------------------------------------------------
# training

def init_checkpoint(cfg: TrainConfig, meta: dict | None = None) -> Checkpoint:
    torch.manual_seed(cfg.seed)
    model = PatternVAE(width=cfg.width, latent_dim=cfg.latent_dim)
    return Checkpoint(copy.deepcopy(model.state_dict()), asdict(cfg), 0, [], None, dict(meta or {}))


def train(images: Sequence[ScaledImage], cfg: TrainConfig, sampler: SamplerConfig | None = None,
          obj: ObjectnessConfig | None = None, bg_model: BackgroundModel | None = None,
          resume: Checkpoint | None = None, meta: dict | None = None,
          on_epoch: Callable[[int, dict], None] | None = None,
          on_batch: Callable[[dict], None] | None = None) -> Checkpoint:
    """Train the pattern-space VAE; returns the final checkpoint.

    ``on_batch`` receives the detached tensors of every batch (for live checks).

    Sampling for epoch ``e`` draws from the substream ``(seed, e)`` so a
    resumed run matches an uninterrupted one.
    """
    sampler = sampler or SamplerConfig()
    obj = obj or ObjectnessConfig()
    if cfg.modulation and obj.k2 != 0 and bg_model is None:
        raise ValueError("background modulation requested but no background model given")
    if not images:
        raise ValueError("no training images")

    ckpt = resume if resume is not None else init_checkpoint(cfg, meta)
    if resume is not None and meta:
        ckpt.meta.update(meta)
    ckpt.train_config = asdict(cfg)
    model = PatternVAE(width=cfg.width, latent_dim=cfg.latent_dim)
    model.load_state_dict(ckpt.model_state)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    if ckpt.optimizer_state is not None:
        optimizer.load_state_dict(ckpt.optimizer_state)

    contexts = [ImageContext(img, obj) for img in images]
    population = RollingMean(obj.population_capacity)
    n_pairs = cfg.patches_per_image_per_epoch * len(images)

    for epoch in range(ckpt.epoch, cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch, 1])
        gen = torch.Generator().manual_seed(cfg.seed * 100_003 + epoch)
        data = sample_epoch(contexts, n_pairs, sampler, rng, obj, bg_model, population, cfg.modulation)
        order = rng.permutation(n_pairs)
        model.train()
        sums: dict[str, float] = {}
        n_batches = 0
        try:
            for start in range(0, n_pairs, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                if len(idx) < 2:
                    continue
                x = torch.from_numpy(np.concatenate([data.grads1[idx], data.grads2[idx]]))
                z_mean, logvar, z, recon = model(x, generator=gen)
                w = None if data.weights is None else torch.from_numpy(data.weights[idx]).float()
                zc = z_mean if cfg.contrastive_latent == "mean" else z
                loss, parts = modulated_batch_loss(
                    zc, z_mean, logvar, recon, x, w, cfg.tau,
                    cfg.lambda_contrastive, cfg.lambda_recon, cfg.lambda_kld)
                if on_batch is not None:
                    on_batch({"z": zc.detach(), "z_mean": z_mean.detach(), "logvar": logvar.detach(),
                              "weights": w, "tau": cfg.tau, "parts": parts})
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v
                n_batches += 1
        except NonFiniteLoss as e:
            dump = Path(tempfile.gettempdir()) / f"nonfinite_batch_epoch{epoch}.pt"
            torch.save(e.dump, dump)
            raise TrainingDiverged(f"loss diverged in epoch {epoch} (batch dump: {dump})", ckpt) from e

        record = {k: v / max(n_batches, 1) for k, v in sums.items()}
        record["epoch"] = epoch + 1
        if data.weights is not None:
            record["mean_weight"] = float(np.mean(data.weights))
        ckpt = Checkpoint(copy.deepcopy(model.state_dict()), asdict(cfg), epoch + 1,
                          ckpt.loss_history + [record], copy.deepcopy(optimizer.state_dict()), ckpt.meta)
        logger.info("epoch %d/%d %s", epoch + 1, cfg.epochs,
                    " ".join(f"{k}={v:.4f}" for k, v in record.items() if k != "epoch"))
        if on_epoch is not None:
            on_epoch(epoch + 1, record)
    return ckpt


# ---------------------------------------------------------------------------
# inference

@torch.no_grad()
def embed_arrays(model: PatternVAE, grads: np.ndarray, batch_size: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """(n, 2, 32, 32) gradients -> (z_mean, sigma), each (n, latent_dim)."""
    grads = np.asarray(grads, dtype=np.float32)
    if grads.ndim != 4 or grads.shape[1:] != (2, 32, 32):
        raise ValueError(f"expected (n, 2, 32, 32) gradient patches, got {grads.shape}")
    model.eval()
    means, sigmas = [], []
    for start in range(0, len(grads), batch_size):
        z_mean, logvar = model.encoder(torch.from_numpy(grads[start:start + batch_size]))
        means.append(z_mean.double().numpy())
        sigmas.append(torch.exp(0.5 * logvar).double().numpy())
    if not means:
        d = model.encoder.latent_dim
        return np.zeros((0, d)), np.zeros((0, d))
    return np.concatenate(means), np.concatenate(sigmas)


def encode(grads: np.ndarray, model: PatternVAE) -> PatternVector:
    z_mean, sigma = embed_arrays(model, np.asarray(grads)[None])
    return PatternVector(z_mean[0], sigma[0])


@torch.no_grad()
def decode(z: np.ndarray, model: PatternVAE) -> np.ndarray:
    model.eval()
    z = torch.as_tensor(np.atleast_2d(z), dtype=torch.float32)
    return model.decoder(z).double().numpy()


def embed_patches(checkpoint: Checkpoint | PatternVAE, grads, batch_size: int = 512) -> list[PatternVector]:
    model = checkpoint.build_model() if isinstance(checkpoint, Checkpoint) else checkpoint
    arr = np.stack([g.grads if hasattr(g, "grads") else g for g in grads]) if len(grads) else np.zeros((0, 2, 32, 32))
    z_mean, sigma = embed_arrays(model, arr, batch_size)
    return [PatternVector(m, s) for m, s in zip(z_mean, sigma)]
