"""Command-line entry point.

Layout of an output directory::

    config.yaml              resolved configuration
    prepared/                normalized images, annotations.jsonl, index.json
    background.npy/.json     k-means background model
    checkpoint.pt(.json)     model weights and training state
    loss.csv                 per-epoch loss components
    detections.jsonl         one line per box, all inference runs
    report_iou{t}.json/.txt  evaluation at each IoU threshold
    render/, neighbors/      figures
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from patternspace import pipeline
from patternspace.config import MODES, ConfigError, PipelineConfig, dump_config, load_config
from patternspace.dataset import (
    DatasetError,
    DatasetManifest,
    PreparedDataset,
    filter_inria_ez,
    load_dataset,
    load_prepared,
    normalize_image,
    save_prepared,
)
from patternspace.discovery import build_pool, nearest_neighbors, read_detections, write_detections
from patternspace.embedding.train import Checkpoint
from patternspace.evaluation import format_table
from patternspace.objectness import BackgroundModel
from patternspace.patches import extract_batch
from patternspace.render import save_contact_sheet, save_overlay

logger = logging.getLogger("patternspace")

LOSS_COLUMNS = ["epoch", "total", "contrastive", "nce", "recon", "kld", "mean_weight"]


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# paths and shared state

class Run:
    """Resolved config plus the files of one output directory."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)

    prepared = property(lambda self: self.out / "prepared")
    background = property(lambda self: self.out / "background")
    checkpoint = property(lambda self: self.out / "checkpoint.pt")
    loss_csv = property(lambda self: self.out / "loss.csv")
    detections = property(lambda self: self.out / "detections.jsonl")
    cache = property(lambda self: self.out / "cache")

    def report(self, thres: float, ext: str) -> Path:
        return self.out / f"report_iou{thres:g}.{ext}"

    @property
    def meta(self) -> dict:
        return {"config_hash": self.cfg.config_hash(), "seed": self.cfg.seed}

    def load_images(self) -> PreparedDataset:
        return load_prepared(self.prepared)

    def load_background(self) -> BackgroundModel | None:
        if not self.background.with_suffix(".json").exists():
            return None
        return BackgroundModel.load(self.background)

    def load_checkpoint(self) -> Checkpoint:
        if not self.checkpoint.exists():
            raise CommandError(f"no checkpoint at {self.checkpoint}; run `train` first")
        return Checkpoint.load(self.checkpoint)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args, run: Run) -> int:
    from patternspace.synth import make_dataset, write_dataset

    target = Path(args.dest) if args.dest else run.out / "synthetic"
    path = write_dataset(make_dataset(args.n_images, args.synth_seed, args.min_height, args.max_height), target)
    print(path)
    return 0


def cmd_prepare(args, run: Run) -> int:
    cfg = run.cfg
    if not cfg.manifest:
        raise ConfigError("no dataset manifest: pass --manifest or set `manifest` in the config")
    manifest = DatasetManifest.load(cfg.manifest)
    images = load_dataset(manifest)
    if manifest.filter:
        images = filter_inria_ez(images, **manifest.filter)
    annotated = manifest.format != "none"
    ds = PreparedDataset(manifest.name, [normalize_image(i) for i in images], annotated)
    save_prepared(ds, run.prepared, run.meta)
    print(f"{len(ds.images)} images / {ds.n_boxes} boxes")
    return 0


def _write_loss_csv(path: Path, history: list[dict], meta: dict) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# config_hash={meta['config_hash']} seed={meta['seed']}\n")
        w = csv.DictWriter(f, fieldnames=LOSS_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for rec in history:
            w.writerow({k: rec.get(k, "") for k in LOSS_COLUMNS})


def cmd_train(args, run: Run) -> int:
    cfg = run.cfg
    images = run.load_images().images
    if not images:
        raise DatasetError("prepared dataset is empty")
    bg = None
    if pipeline.needs_background(cfg):
        bg = run.load_background() if args.resume else None
        if bg is None:
            bg = pipeline.fit_background(images, cfg)
            bg.save(run.background)
    resume = None
    if args.resume and run.checkpoint.exists():
        resume = Checkpoint.load(run.checkpoint)
        logger.info("resuming from epoch %d", resume.epoch)

    def on_epoch(epoch, record):
        history.append(record)
        _write_loss_csv(run.loss_csv, history, run.meta)

    history = list(resume.loss_history) if resume else []
    ckpt = pipeline.run_training(images, cfg, bg, resume, on_epoch)
    ckpt.save(run.checkpoint)
    _write_loss_csv(run.loss_csv, ckpt.loss_history, run.meta)
    print(run.checkpoint)
    return 0


def cmd_discover(args, run: Run) -> int:
    cfg = run.cfg
    ds = run.load_images()
    ckpt = run.load_checkpoint()
    bg = run.load_background()
    if cfg.discovery.post_objectness and bg is None:
        raise CommandError("post-objectness is on but no background model exists; run `train` first")
    results = pipeline.run_discovery(ds.images, ckpt, bg, cfg, args.runs, cache_dir=run.cache)
    meta = {**run.meta, "n_runs": len(results), "checkpoint": ckpt.weights_hash(),
            "alphas": [[r.alpha_h, r.alpha_b] for r in results], "label": cfg.label()}
    scale = {img.image_id: img.scale_factor for img in ds.images}
    write_detections(run.detections, [r.detections for r in results], scale, meta)
    n = sum(len(v) for r in results for v in r.detections.values())
    print(f"{n} detections over {len(results)} run(s) -> {run.detections}")
    return 0


def cmd_evaluate(args, run: Run) -> int:
    cfg = run.cfg
    ds = run.load_images()
    if not ds.annotated:
        print("dataset has no annotations; nothing to evaluate")
        return 0
    path = Path(args.detections) if args.detections else run.detections
    if not path.exists():
        raise CommandError(f"detections file not found: {path}")
    runs, det_meta = read_detections(path)
    gts = {img.image_id: img.gt_boxes for img in ds.images}
    reports = pipeline.run_evaluation(runs, gts, cfg)
    for rep in reports:
        payload = {"meta": {**run.meta, "detections": str(path)}, **rep.to_dict()}
        run.report(rep.iou_thres, "json").write_text(json.dumps(payload, indent=1, sort_keys=True))
        table = format_table([rep], title=f"iou_thres = {rep.iou_thres:g}  ({rep.n_runs} runs)")
        run.report(rep.iou_thres, "txt").write_text(table + "\n")
        print(table)
    return 0


def cmd_render(args, run: Run) -> int:
    ds = run.load_images()
    path = Path(args.detections) if args.detections else run.detections
    runs, _ = read_detections(path)
    dets = runs[args.run] if args.run < len(runs) else {}
    out_dir = run.out / "render"
    images = ds.images[:args.limit] if args.limit else ds.images
    for img in images:
        boxes = [d.box for d in dets.get(img.image_id, [])]
        gts = img.gt_boxes if ds.annotated and not args.no_gt else None
        fname = "".join(c if c.isalnum() or c in "._-" else "_" for c in img.image_id) + ".png"
        save_overlay(out_dir / fname, img.pixels, boxes, gts, {**run.meta, "image_id": img.image_id})
    print(f"{len(images)} overlays -> {out_dir}")
    return 0


def cmd_neighbors(args, run: Run) -> int:
    cfg = run.cfg
    ds = run.load_images()
    ckpt = run.load_checkpoint()
    pool = build_pool(ds.images, ckpt, None, cfg.discovery.n_per_image, cfg.sampler, cfg.objectness,
                      cfg.seed_for("inference"), 0, cache_dir=run.cache)
    by_id = {img.image_id: img for img in ds.images}
    # queries: the patches of the pool closest to its center, one per image
    order = np.argsort(pool.lscore, kind="stable")
    queries, seen = [], set()
    for i in order:
        if pool.image_index[i] not in seen:
            seen.add(pool.image_index[i])
            queries.append(int(i))
        if len(queries) == args.queries:
            break

    def crop(i):
        s = pool.specs[i]
        return extract_batch(by_id[s.image_id], [s])[0]

    def as_dict(i, dist=None):
        s = pool.specs[i]
        d = {"image_id": s.image_id, "x": s.x, "y": s.y, "w": s.w, "h": s.h}
        if dist is not None:
            d["distance"] = dist
        return d

    records, rows = [], []
    for q in queries:
        nn = nearest_neighbors(pool, q, args.k)
        records.append({"query": as_dict(q), "neighbors": [as_dict(i, d) for i, d in nn]})
        rows.append([crop(q)] + [crop(i) for i, _ in nn])
    out = run.out / "neighbors"
    out.mkdir(parents=True, exist_ok=True)
    (out / "neighbors.json").write_text(json.dumps({"meta": {**run.meta, "k": args.k}, "queries": records}, indent=1))
    save_contact_sheet(out / "neighbors.png", rows, {**run.meta, "k": args.k})
    print(f"{len(queries)} queries x {args.k} neighbors -> {out}")
    return 0


def cmd_run(args, run: Run) -> int:
    """prepare -> train -> discover -> evaluate -> render in one invocation."""
    for step in (cmd_prepare, cmd_train, cmd_discover, cmd_evaluate, cmd_render):
        step(args, run)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "discover": cmd_discover,
    "evaluate": cmd_evaluate,
    "render": cmd_render,
    "neighbors": cmd_neighbors,
    "run": cmd_run,
}


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. train.epochs=5 (repeatable)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--mode", choices=MODES, help="loss modulation: none, hist, bgnd or both")
    common.add_argument("--post-objectness", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--output", help="output directory (env PATTERNSPACE_OUTPUT)")
    common.add_argument("--manifest", help="dataset manifest JSON")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="patternspace", description="Label-free object discovery in pattern space.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write the synthetic scene dataset")
    p.add_argument("--n-images", type=int, default=100)
    p.add_argument("--synth-seed", type=int, default=0)
    p.add_argument("--min-height", type=int, default=66, help="smallest object height in pixels")
    p.add_argument("--max-height", type=int, default=150, help="largest object height in pixels")
    p.add_argument("--dest", help="target directory (default OUTPUT/synthetic)")

    sub.add_parser("prepare", parents=[common], help="normalize a dataset")
    p = sub.add_parser("train", parents=[common], help="fit the background model and train")
    p.add_argument("--resume", action="store_true", help="continue from OUTPUT/checkpoint.pt")
    p = sub.add_parser("discover", parents=[common], help="extract objects")
    p.add_argument("--runs", type=int, help="inference runs (default eval.n_runs)")
    p = sub.add_parser("evaluate", parents=[common], help="score detections")
    p.add_argument("--detections")
    p = sub.add_parser("render", parents=[common], help="draw detections over images")
    p.add_argument("--detections")
    p.add_argument("--run", type=int, default=0)
    p.add_argument("--limit", type=int, default=0, help="render only the first N images")
    p.add_argument("--no-gt", action="store_true")
    p = sub.add_parser("neighbors", parents=[common], help="nearest-neighbor contact sheets")
    p.add_argument("--queries", type=int, default=8)
    p.add_argument("-k", type=int, default=10)
    p = sub.add_parser("run", parents=[common], help="prepare, train, discover, evaluate and render")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--runs", type=int)
    p.add_argument("--detections")
    p.add_argument("--run", type=int, default=0)
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--no-gt", action="store_true")
    return parser


def _one_line(e: BaseException) -> str:
    msg = " ".join(str(e).split()) or repr(e)
    return f"error: {type(e).__name__}: {msg}"


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.overrides, seed=args.seed, output=args.output,
                          manifest=args.manifest, mode=args.mode, post_objectness=args.post_objectness)
        run = Run(cfg)
        run.out.mkdir(parents=True, exist_ok=True)
        lock = FileLock(str(run.out / ".lock"))
        try:
            lock.acquire(timeout=0)
        except Timeout:
            raise CommandError(f"output directory {run.out} is locked by another process") from None
        try:
            dump_config(cfg, run.out / "config.yaml")
            return COMMANDS[args.command](args, run)
        finally:
            lock.release()
    except KeyboardInterrupt:
        print("error: KeyboardInterrupt: interrupted", file=sys.stderr)
        return 130
    except Exception as e:  # noqa: BLE001 - every failure becomes one parseable line
        logger.debug("command failed", exc_info=True)
        print(_one_line(e), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
