"""CorLoc, precision, recall and F1 of discovered boxes, with the sweep over
the per-image prediction cap and aggregation over repeated inference runs."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from patternspace.dataset import Box
from patternspace.discovery import Detection
from patternspace.patches import iou_matrix

METRICS = ("corloc", "recall", "precision", "f1")


@dataclass
class MatchResult:
    tp: list[bool]  # per prediction, in score order
    matched_gt: list[int | None]
    unmatched_gt: list[int]
    iou_thres: float

    @property
    def n_tp(self) -> int:
        return sum(self.tp)

    @property
    def n_fp(self) -> int:
        return len(self.tp) - self.n_tp

    @property
    def n_fn(self) -> int:
        return len(self.unmatched_gt)


def match(preds: Sequence[Detection | Box], gts: Sequence[Box], iou_thres: float = 0.5) -> MatchResult:
    """Greedy one-to-one matching in prediction order.

    Each prediction claims the unclaimed ground truth of highest IoU if that
    IoU exceeds ``iou_thres``; otherwise it is a false positive.
    """
    boxes = [p.box if isinstance(p, Detection) else p for p in preds]
    tp: list[bool] = []
    matched: list[int | None] = []
    claimed = np.zeros(len(gts), dtype=bool)
    if boxes and len(gts):
        overlaps = iou_matrix(np.array(boxes, dtype=float), np.array(gts, dtype=float))
    for i in range(len(boxes)):
        j = None
        if len(gts):
            cand = np.where(claimed, -1.0, overlaps[i])
            best = int(np.argmax(cand))
            if cand[best] > iou_thres:
                j = best
                claimed[best] = True
        tp.append(j is not None)
        matched.append(j)
    return MatchResult(tp, matched, [int(k) for k in np.flatnonzero(~claimed)], iou_thres)


def corloc(matches: Sequence[MatchResult]) -> float:
    """Percentage of images with at least one true positive."""
    if not matches:
        return 0.0
    return 100.0 * sum(m.n_tp > 0 for m in matches) / len(matches)


def prf1(tp: int, fp: int, total_gt: int) -> tuple[float, float, float]:
    """Precision, recall, F1 in percent; precision is 0 without predictions."""
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / total_gt if total_gt > 0 else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return 100.0 * p, 100.0 * r, 100.0 * f1


@dataclass
class Metrics:
    corloc: float
    recall: float
    precision: float
    f1: float
    tp: int
    fp: int
    n_gt: int
    max_predictions: int | None = None


def evaluate(detections: Mapping[str, Sequence[Detection]], gts: Mapping[str, Sequence[Box]],
             iou_thres: float = 0.5, max_predictions: int | None = None,
             corloc_top1: bool = False) -> Metrics:
    """Metrics over all images of ``gts`` with each image's detections cut to
    the best ``max_predictions`` ranks."""
    matches = []
    top1 = []
    for image_id, boxes in gts.items():
        preds = sorted(detections.get(image_id, []), key=lambda d: (d.rank, d.score))
        if max_predictions is not None:
            preds = preds[:max_predictions]
        matches.append(match(preds, boxes, iou_thres))
        if corloc_top1:
            top1.append(match(preds[:1], boxes, iou_thres))
    tp = sum(m.n_tp for m in matches)
    fp = sum(m.n_fp for m in matches)
    n_gt = sum(len(b) for b in gts.values())
    p, r, f1 = prf1(tp, fp, n_gt)
    cl = corloc(top1 if corloc_top1 else matches)
    return Metrics(cl, r, p, f1, tp, fp, n_gt, max_predictions)


@dataclass
class SweepResult:
    best_m: int
    best: Metrics
    per_m: list[Metrics]


def f1_sweep(detections: Mapping[str, Sequence[Detection]], gts: Mapping[str, Sequence[Box]],
             iou_thres: float = 0.5, max_m: int = 5, corloc_top1: bool = False) -> SweepResult:
    """Evaluate caps m = 1..max_m and report the m of maximal F1 (smallest m on ties)."""
    per_m = [evaluate(detections, gts, iou_thres, m, corloc_top1) for m in range(1, max_m + 1)]
    best = max(range(len(per_m)), key=lambda i: (per_m[i].f1, -i))
    return SweepResult(best + 1, per_m[best], per_m)


@dataclass
class EvalReport:
    iou_thres: float
    n_runs: int
    mean: dict[str, float]
    std: dict[str, float]
    best_max_predictions: list[int]
    per_run: list[dict] = field(default_factory=list)
    label: dict = field(default_factory=dict)  # e.g. {"modulation": True, "post_objectness": True}

    @property
    def corloc(self) -> float:
        return self.mean["corloc"]

    @property
    def recall(self) -> float:
        return self.mean["recall"]

    @property
    def precision(self) -> float:
        return self.mean["precision"]

    @property
    def f1(self) -> float:
        return self.mean["f1"]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample (n - 1) standard deviation; std is 0 for a single value."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return 0.0, 0.0
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def aggregate(runs: Sequence[Mapping[str, Sequence[Detection]]], gts: Mapping[str, Sequence[Box]],
              iou_thres: float = 0.5, max_m: int = 5, corloc_top1: bool = False,
              label: dict | None = None) -> EvalReport:
    sweeps = [f1_sweep(dets, gts, iou_thres, max_m, corloc_top1) for dets in runs]
    per_run = [asdict(s.best) for s in sweeps]
    mean, std = {}, {}
    for k in METRICS:
        mean[k], std[k] = mean_std([r[k] for r in per_run])
    return EvalReport(iou_thres, len(runs), mean, std, [s.best_m for s in sweeps], per_run, dict(label or {}))


def multi_run(pipeline: Callable[[int], Mapping[str, Sequence[Detection]]], gts: Mapping[str, Sequence[Box]],
              n_runs: int = 10, seeds: Sequence[int] | None = None, iou_thres: float = 0.5,
              label: dict | None = None) -> EvalReport:
    """Run ``pipeline(seed)`` once per seed and aggregate the max-F1 metrics."""
    seeds = list(seeds) if seeds is not None else list(range(n_runs))
    return aggregate([pipeline(s) for s in seeds], gts, iou_thres, label=label)


# ---------------------------------------------------------------------------
# text tables

def _mark(flag) -> str:
    if flag is None:
        return "-"
    return "v" if flag else "x"


def format_table(reports: Sequence[EvalReport], title: str | None = None) -> str:
    """Two lines per report: metric means, then their ±STD."""
    head = f"{'Modulation':>10} {'Post-Obj':>8} {'CorLoc':>8} {'Recall':>8} {'Precision':>9} {'F1':>8}"
    lines = []
    if title:
        lines.append(title)
    lines += [head, "-" * len(head)]
    for r in reports:
        mod = _mark(r.label.get("modulation"))
        po = _mark(r.label.get("post_objectness"))
        m, s = r.mean, r.std
        lines.append(f"{mod:>10} {po:>8} {m['corloc']:8.2f} {m['recall']:8.2f} {m['precision']:9.2f} {m['f1']:8.2f}")
        lines.append(f"{'':>10} {'':>8} {'±' + format(s['corloc'], '.2f'):>8} {'±' + format(s['recall'], '.2f'):>8}"
                     f" {'±' + format(s['precision'], '.2f'):>9} {'±' + format(s['f1'], '.2f'):>8}")
    return "\n".join(lines)


def is_finite_report(r: EvalReport) -> bool:
    return all(math.isfinite(r.mean[k]) and math.isfinite(r.std[k]) for k in METRICS)
