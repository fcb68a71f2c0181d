"""Pipeline configuration: one structured file, CLI overrides, seed substreams."""

from __future__ import annotations

import hashlib
import json
import os
import zlib
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from patternspace.discovery import DiscoveryConfig
from patternspace.embedding.train import TrainConfig
from patternspace.features import ObjectnessConfig
from patternspace.patches import SamplerConfig

MODES = ("none", "hist", "bgnd", "both")
OUTPUT_ENV = "PATTERNSPACE_OUTPUT"


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    iou_thres: list[float] = field(default_factory=lambda: [0.5, 0.4])
    n_runs: int = 10
    max_predictions: int = 5
    corloc_top1: bool = False

    def __post_init__(self):
        if self.n_runs < 1 or self.max_predictions < 1:
            raise ValueError("n_runs and max_predictions must be positive")
        if not all(0 < t < 1 for t in self.iou_thres):
            raise ValueError("iou thresholds must lie in (0, 1)")


@dataclass
class PipelineConfig:
    manifest: str | None = None
    output_dir: str = "runs/default"
    seed: int = 0
    name: str = "default"
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    objectness: ObjectnessConfig = field(default_factory=ObjectnessConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    discovery: DiscoveryConfig = field(default_factory=DiscoveryConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("manifest")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    @property
    def mode(self) -> str:
        if not self.train.modulation:
            return "none"
        k1, k2 = self.objectness.k1, self.objectness.k2
        if k1 and k2:
            return "both"
        return "hist" if k1 else "bgnd"

    def label(self) -> dict:
        return {"modulation": self.train.modulation, "post_objectness": self.discovery.post_objectness,
                "mode": self.mode, "name": self.name}

    def seed_for(self, name: str, *index: int) -> int:
        return substream_seed(self.seed, name, *index)


def substream_seed(master: int, name: str, *index: int) -> int:
    """Deterministic 32-bit seed for the named substream of ``master``."""
    ss = np.random.SeedSequence(entropy=master, spawn_key=(zlib.crc32(name.encode()), *index))
    return int(ss.generate_state(1)[0])


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for key, value in data.items():
        default = getattr(defaults, key)
        if is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{where}.{key}")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data or {}, "config")


def load_config(path: str | os.PathLike | None = None, overrides: list[str] | None = None,
                **flags: Any) -> PipelineConfig:
    """Defaults < file < ``key.sub=value`` overrides < explicit flags."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path) as f:
            data = yaml.safe_load(f) or {}
        parent = data.pop("extends", None)
        if parent:
            base = load_config(path.parent / parent).to_dict()
            data = _merge(base, data)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        _set_path(data, key.strip().split("."), yaml.safe_load(raw))
    cfg = from_dict(data)
    if flags.get("seed") is not None:
        cfg.seed = int(flags["seed"])
    if flags.get("output") is not None:
        cfg.output_dir = str(flags["output"])
    elif os.environ.get(OUTPUT_ENV):
        cfg.output_dir = os.environ[OUTPUT_ENV]
    if flags.get("manifest") is not None:
        cfg.manifest = str(flags["manifest"])
    if flags.get("mode") is not None:
        apply_mode(cfg, flags["mode"])
    if flags.get("post_objectness") is not None:
        cfg.discovery.post_objectness = bool(flags["post_objectness"])
    return cfg


def apply_mode(cfg: PipelineConfig, mode: str) -> PipelineConfig:
    """Loss modulation mode: none | hist (k2 = 0) | bgnd (k1 = 0) | both."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {MODES}")
    cfg.train.modulation = mode != "none"
    if mode in ("hist", "both") and not cfg.objectness.k1:
        cfg.objectness.k1 = 1.0
    if mode in ("bgnd", "both") and not cfg.objectness.k2:
        cfg.objectness.k2 = 1.0
    if mode == "hist":
        cfg.objectness.k2 = 0.0
    elif mode == "bgnd":
        cfg.objectness.k1 = 0.0
    return cfg


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _set_path(d: dict, keys: list[str], value) -> None:
    for k in keys[:-1]:
        d = d.setdefault(k, {})
        if not isinstance(d, dict):
            raise ConfigError(f"cannot override inside non-mapping key {k!r}")
    d[keys[-1]] = value


def dump_config(cfg: PipelineConfig, path: str | os.PathLike) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)
