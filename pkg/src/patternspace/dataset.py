"""Image collections, ground-truth annotations and the dataset subsets.

Annotations are normalized to an internal line-delimited JSON format
(one ``{"image_id": ..., "boxes": [[x, y, w, h], ...]}`` object per line).
Converters read PASCAL v1.00 annotation text (Penn-Fudan, INRIA person) and
PASCAL VOC XML.
"""

from __future__ import annotations

import json
import logging
import os
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

TARGET_WIDTH = 256

ANNOTATION_FORMATS = ("jsonl", "pascal_text", "pascal_xml", "none")


class DatasetError(Exception):
    pass


class Box(NamedTuple):
    """Axis-aligned rectangle, top-left corner plus size, in pixels."""

    x: float
    y: float
    w: float
    h: float

    @property
    def area(self) -> float:
        return self.w * self.h

    def scaled(self, factor: float) -> "Box":
        return Box(self.x * factor, self.y * factor, self.w * factor, self.h * factor)


@dataclass
class AnnotatedImage:
    image_id: str
    pixels: np.ndarray  # H x W x 3 uint8
    gt_boxes: list[Box]
    source_path: str = ""

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class ScaledImage:
    """Image resized to width 256; ``scale_factor`` = original width / 256."""

    image_id: str
    pixels: np.ndarray
    scale_factor: float
    gt_boxes: list[Box]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def dims(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    def to_original(self, box: Box) -> Box:
        return box.scaled(self.scale_factor)


@dataclass
class ManifestEntry:
    image_id: str
    path: str
    annotation: str | None = None


@dataclass
class DatasetManifest:
    """A named list of images plus how to read their annotations.

    JSON layout::

        {"name": "pennfudan", "format": "pascal_text", "root": "/data/PennFudanPed",
         "images": [{"id": "FudanPed00001", "path": "PNGImages/FudanPed00001.png",
                     "annotation": "Annotation/FudanPed00001.txt"}, ...],
         "filter": {"max_people": 5, "min_box_area": 10000}}

    With ``format == "jsonl"`` a top-level ``"annotations"`` path names the
    line-delimited annotation file and per-image ``annotation`` is ignored.
    Relative paths resolve against ``root`` (default: the manifest's folder).
    """

    name: str
    images: list[ManifestEntry]
    format: str = "jsonl"
    root: str = "."
    annotations: str | None = None
    filter: dict | None = None
    clip_boxes: bool = False

    def __post_init__(self):
        if self.format not in ANNOTATION_FORMATS:
            raise DatasetError(f"unknown annotation format {self.format!r}")
        ids = [e.image_id for e in self.images]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DatasetError(f"duplicate image ids in manifest {self.name!r}: {dupes[:5]}")

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.root) / p

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | os.PathLike = ".") -> "DatasetManifest":
        root = d.get("root", ".")
        if not os.path.isabs(root):
            root = str(Path(base_dir) / root)
        entries = [ManifestEntry(e["id"], e["path"], e.get("annotation")) for e in d.get("images", [])]
        return cls(
            name=d.get("name", "dataset"),
            images=entries,
            format=d.get("format", "jsonl"),
            root=root,
            annotations=d.get("annotations"),
            filter=d.get("filter"),
            clip_boxes=bool(d.get("clip_boxes", False)),
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise DatasetError(f"manifest not found: {path}")
        with open(path) as f:
            return cls.from_dict(json.load(f), base_dir=path.parent)

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "format": self.format,
            "root": self.root,
            "images": [
                {"id": e.image_id, "path": e.path, **({"annotation": e.annotation} if e.annotation else {})}
                for e in self.images
            ],
        }
        if self.annotations:
            d["annotations"] = self.annotations
        if self.filter:
            d["filter"] = self.filter
        if self.clip_boxes:
            d["clip_boxes"] = True
        return d

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)


# ---------------------------------------------------------------------------
# annotation parsers

_PASCAL_TEXT_BOX = re.compile(
    r"Bounding box for object\s+\d+.*?:\s*\(\s*(-?\d+)\s*,\s*(-?\d+)\s*\)\s*-\s*\(\s*(-?\d+)\s*,\s*(-?\d+)\s*\)"
)


def parse_pascal_text(text: str) -> list[Box]:
    """Boxes from a PASCAL v1.00 annotation (Penn-Fudan and INRIA person).

    Corners are 1-based inclusive pixel indices.
    """
    boxes = []
    for m in _PASCAL_TEXT_BOX.finditer(text):
        x1, y1, x2, y2 = map(int, m.groups())
        boxes.append(Box(x1 - 1, y1 - 1, x2 - x1 + 1, y2 - y1 + 1))
    return boxes


def parse_pascal_xml(text: str) -> list[Box]:
    root = ET.fromstring(text)
    boxes = []
    for obj in root.iter("object"):
        bb = obj.find("bndbox")
        if bb is None:
            continue
        x1, y1, x2, y2 = (float(bb.find(k).text) for k in ("xmin", "ymin", "xmax", "ymax"))
        boxes.append(Box(x1 - 1, y1 - 1, x2 - x1 + 1, y2 - y1 + 1))
    return boxes


def read_annotations_jsonl(path: str | os.PathLike) -> dict[str, list[Box]]:
    out: dict[str, list[Box]] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "image_id" not in rec:
                continue  # header / metadata line
            out[rec["image_id"]] = [Box(*map(float, b)) for b in rec.get("boxes", [])]
    return out


def write_annotations_jsonl(path: str | os.PathLike, records: Iterable[tuple[str, list[Box]]],
                            meta: dict | None = None) -> None:
    with open(path, "w") as f:
        if meta is not None:
            f.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
        for image_id, boxes in records:
            f.write(json.dumps({"image_id": image_id, "boxes": [list(map(float, b)) for b in boxes]}) + "\n")


# ---------------------------------------------------------------------------
# loading

def read_rgb(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except OSError as e:
        raise DatasetError(f"cannot read image {path}: {e}") from e


def _check_boxes(image_id: str, boxes: list[Box], width: int, height: int, clip: bool) -> list[Box]:
    checked = []
    for b in boxes:
        if clip:
            x1, y1 = max(b.x, 0.0), max(b.y, 0.0)
            x2, y2 = min(b.x + b.w, width), min(b.y + b.h, height)
            b = Box(x1, y1, x2 - x1, y2 - y1)
        if b.w <= 0 or b.h <= 0:
            raise DatasetError(f"{image_id}: degenerate box {tuple(b)}")
        if b.x < 0 or b.y < 0 or b.x + b.w > width or b.y + b.h > height:
            raise DatasetError(f"{image_id}: box {tuple(b)} outside image {width}x{height}")
        checked.append(b)
    return checked


def load_dataset(manifest: DatasetManifest) -> list[AnnotatedImage]:
    """Read every image of ``manifest`` in manifest order, with pixel-space boxes."""
    table = None
    if manifest.format == "jsonl" and manifest.images:
        if not manifest.annotations:
            raise DatasetError(f"manifest {manifest.name!r} has format jsonl but no 'annotations' file")
        ann_path = manifest.resolve(manifest.annotations)
        if not ann_path.exists():
            raise DatasetError(f"annotation file not found: {ann_path}")
        table = read_annotations_jsonl(ann_path)

    images = []
    for entry in manifest.images:
        img_path = manifest.resolve(entry.path)
        pixels = read_rgb(img_path)
        if manifest.format == "none":
            boxes: list[Box] = []
        elif table is not None:
            boxes = table.get(entry.image_id, [])
        else:
            if entry.annotation is None:
                raise DatasetError(f"{entry.image_id}: no annotation path")
            ann_path = manifest.resolve(entry.annotation)
            if not ann_path.exists():
                raise DatasetError(f"annotation not found: {ann_path}")
            text = ann_path.read_text(encoding="latin-1")
            boxes = parse_pascal_text(text) if manifest.format == "pascal_text" else parse_pascal_xml(text)
        h, w = pixels.shape[:2]
        boxes = _check_boxes(entry.image_id, boxes, w, h, manifest.clip_boxes)
        images.append(AnnotatedImage(entry.image_id, pixels, boxes, str(img_path)))
    logger.info("loaded %d images / %d boxes from %s", len(images),
                sum(len(i.gt_boxes) for i in images), manifest.name)
    return images


# ---------------------------------------------------------------------------
# subsets and normalization

def filter_inria_ez(images: list[AnnotatedImage], max_people: int = 5,
                    min_box_area: float = 10000) -> list[AnnotatedImage]:
    """INRIA-EZ: images with at most ``max_people`` annotated people, keeping
    boxes of area strictly above ``min_box_area``; images left empty are dropped.

    People are counted before the area filter.
    """
    out = []
    for img in images:
        if len(img.gt_boxes) > max_people:
            continue
        kept = [b for b in img.gt_boxes if b.area > min_box_area]
        if kept:
            out.append(AnnotatedImage(img.image_id, img.pixels, kept, img.source_path))
    return out


def normalize_image(img: AnnotatedImage, width: int = TARGET_WIDTH) -> ScaledImage:
    """Bilinear resize to ``width`` columns, preserving aspect; boxes follow."""
    h, w = img.pixels.shape[:2]
    if w < 1:
        raise DatasetError(f"{img.image_id}: empty image")
    factor = w / width
    if w == width:
        pixels = img.pixels
    else:
        new_h = max(1, int(round(h / factor)))
        pixels = np.asarray(Image.fromarray(img.pixels).resize((width, new_h), Image.BILINEAR))
    new_h = pixels.shape[0]
    boxes = []
    for b in img.gt_boxes:
        b = b.scaled(1.0 / factor)
        # rounding of the output height can push a bottom edge past the border by < 1 px
        boxes.append(Box(b.x, b.y, min(b.w, width - b.x), min(b.h, new_h - b.y)))
    return ScaledImage(img.image_id, pixels, factor, boxes)


# ---------------------------------------------------------------------------
# manifest builders for the public datasets (local copies only)

def pennfudan_manifest(root: str | os.PathLike) -> DatasetManifest:
    root = Path(root)
    pngs = sorted((root / "PNGImages").glob("*.png"))
    if not pngs:
        raise DatasetError(f"no PNGImages under {root}")
    entries = [ManifestEntry(p.stem, f"PNGImages/{p.name}", f"Annotation/{p.stem}.txt") for p in pngs]
    return DatasetManifest("pennfudan", entries, format="pascal_text", root=str(root))


def inria_manifest(root: str | os.PathLike) -> DatasetManifest:
    """Train + Test positive images of the INRIA person set (902 images)."""
    root = Path(root)
    entries = []
    for split in ("Train", "Test"):
        ann_dir = root / split / "annotations"
        for ann in sorted(ann_dir.glob("*.txt")):
            text = ann.read_text(encoding="latin-1")
            m = re.search(r'Image filename\s*:\s*"([^"]+)"', text)
            rel = m.group(1) if m else f"{split}/pos/{ann.stem}.png"
            # annotation paths are relative to the dataset root, e.g. "Train/pos/crop_000010.png"
            rel = rel.split("/", 1)[1] if rel.startswith("INRIAPerson/") else rel
            entries.append(ManifestEntry(f"{split}/{ann.stem}", rel, str(ann.relative_to(root))))
    if not entries:
        raise DatasetError(f"no INRIA annotations under {root}")
    return DatasetManifest("inria", entries, format="pascal_text", root=str(root),
                           filter={"max_people": 5, "min_box_area": 10000})


def fddb_manifest(root: str | os.PathLike, n_images: int = 100) -> DatasetManifest:
    """First ``n_images`` images in FDDB fold order, without annotations."""
    root = Path(root)
    paths: list[str] = []
    for k in range(1, 11):
        fold = root / "FDDB-folds" / f"FDDB-fold-{k:02d}.txt"
        if not fold.exists():
            break
        paths.extend(line.strip() for line in fold.read_text().splitlines() if line.strip())
        if len(paths) >= n_images:
            break
    if not paths:
        raise DatasetError(f"no FDDB fold lists under {root}")
    entries = [ManifestEntry(p.replace("/", "_"), f"{p}.jpg") for p in paths[:n_images]]
    return DatasetManifest("fddb100", entries, format="none", root=str(root))


@dataclass
class PreparedDataset:
    """Normalized images written to disk by ``prepare``."""

    name: str
    images: list[ScaledImage] = field(default_factory=list)
    annotated: bool = True

    @property
    def n_boxes(self) -> int:
        return sum(len(i.gt_boxes) for i in self.images)


def save_prepared(ds: PreparedDataset, out_dir: str | os.PathLike, meta: dict | None = None) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    index = []
    for img in ds.images:
        fname = re.sub(r"[^A-Za-z0-9_.-]", "_", img.image_id) + ".png"
        Image.fromarray(img.pixels).save(out / "images" / fname)
        index.append({"id": img.image_id, "path": f"images/{fname}", "scale_factor": img.scale_factor})
    write_annotations_jsonl(out / "annotations.jsonl", ((i.image_id, i.gt_boxes) for i in ds.images), meta)
    with open(out / "index.json", "w") as f:
        json.dump({"name": ds.name, "annotated": ds.annotated, "images": index, "meta": meta or {}}, f, indent=1)
    return out


def load_prepared(out_dir: str | os.PathLike) -> PreparedDataset:
    out = Path(out_dir)
    index_path = out / "index.json"
    if not index_path.exists():
        raise DatasetError(f"prepared dataset not found: {index_path}")
    with open(index_path) as f:
        index = json.load(f)
    boxes = read_annotations_jsonl(out / "annotations.jsonl")
    images = [
        ScaledImage(e["id"], read_rgb(out / e["path"]), float(e["scale_factor"]), boxes.get(e["id"], []))
        for e in index["images"]
    ]
    return PreparedDataset(index["name"], images, index.get("annotated", True))
