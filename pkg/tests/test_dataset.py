import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from patternspace.dataset import (
    AnnotatedImage,
    Box,
    DatasetError,
    DatasetManifest,
    filter_inria_ez,
    load_dataset,
    load_prepared,
    normalize_image,
    parse_pascal_text,
    parse_pascal_xml,
    PreparedDataset,
    save_prepared,
    write_annotations_jsonl,
)

PASCAL_TEXT = """# Compatible with PASCAL Annotation Version 1.00
Image filename : "PennFudanPed/PNGImages/FudanPed00001.png"
Image size (X x Y x C) : 559 x 536 x 3
Objects with ground truth : 2 { "PASpersonWalking" "PASpersonWalking" }
Bounding box for object 1 "PASpersonWalking" (Xmin, Ymin) - (Xmax, Ymax) : (160, 182) - (302, 431)
Bounding box for object 2 "PASpersonWalking" (Xmin, Ymin) - (Xmax, Ymax) : (420, 171) - (535, 486)
"""

PASCAL_XML = """<annotation><size><width>100</width><height>80</height></size>
<object><name>person</name><bndbox><xmin>11</xmin><ymin>21</ymin><xmax>40</xmax><ymax>70</ymax></bndbox></object>
</annotation>"""


def _image(image_id, boxes, w=100, h=80):
    return AnnotatedImage(image_id, np.zeros((h, w, 3), np.uint8), [Box(*b) for b in boxes])


def _write_dataset(tmp_path, n=3, boxes=None):
    (tmp_path / "img").mkdir()
    entries = []
    recs = []
    for i in range(n):
        Image.fromarray(np.full((60, 90, 3), 10 * i, np.uint8)).save(tmp_path / "img" / f"{i}.png")
        entries.append({"id": f"im{i}", "path": f"img/{i}.png"})
        recs.append((f"im{i}", boxes or [Box(1, 2, 10, 20)]))
    write_annotations_jsonl(tmp_path / "ann.jsonl", recs)
    manifest = {"name": "t", "format": "jsonl", "annotations": "ann.jsonl", "images": entries}
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    return tmp_path / "manifest.json"


class TestParsers:
    def test_pascal_text(self):
        boxes = parse_pascal_text(PASCAL_TEXT)
        assert boxes == [Box(159, 181, 143, 250), Box(419, 170, 116, 316)]

    def test_pascal_xml(self):
        assert parse_pascal_xml(PASCAL_XML) == [Box(10, 20, 30, 50)]


class TestLoadDataset:
    def test_jsonl_manifest(self, tmp_path):
        images = load_dataset(DatasetManifest.load(_write_dataset(tmp_path)))
        assert [i.image_id for i in images] == ["im0", "im1", "im2"]
        assert images[1].pixels.shape == (60, 90, 3)
        assert images[0].gt_boxes == [Box(1, 2, 10, 20)]

    def test_order_is_deterministic(self, tmp_path):
        m = DatasetManifest.load(_write_dataset(tmp_path, n=5))
        a = [i.image_id for i in load_dataset(m)]
        b = [i.image_id for i in load_dataset(m)]
        assert a == b == [e.image_id for e in m.images]

    def test_empty_manifest(self):
        assert load_dataset(DatasetManifest("empty", [])) == []

    def test_missing_image_names_path(self, tmp_path):
        path = _write_dataset(tmp_path)
        (tmp_path / "img" / "1.png").unlink()
        with pytest.raises(DatasetError, match="1.png"):
            load_dataset(DatasetManifest.load(path))

    def test_box_outside_image_names_image(self, tmp_path):
        path = _write_dataset(tmp_path, boxes=[Box(80, 0, 20, 10)])
        with pytest.raises(DatasetError, match="im0"):
            load_dataset(DatasetManifest.load(path))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError, match="nope.json"):
            DatasetManifest.load(tmp_path / "nope.json")

    def test_duplicate_ids_rejected(self):
        from patternspace.dataset import ManifestEntry
        with pytest.raises(DatasetError, match="duplicate"):
            DatasetManifest("d", [ManifestEntry("a", "x.png"), ManifestEntry("a", "y.png")])

    def test_pascal_text_manifest(self, tmp_path):
        Image.fromarray(np.zeros((536, 559, 3), np.uint8)).save(tmp_path / "a.png")
        (tmp_path / "a.txt").write_text(PASCAL_TEXT)
        m = DatasetManifest.from_dict({"name": "pf", "format": "pascal_text",
                                       "images": [{"id": "a", "path": "a.png", "annotation": "a.txt"}]},
                                      base_dir=tmp_path)
        (img,) = load_dataset(m)
        assert len(img.gt_boxes) == 2


class TestInriaEz:
    def test_six_people_excluded(self):
        img = _image("six", [(0, 0, 20, 60)] * 6)
        assert filter_inria_ez([img]) == []

    def test_box_area_boundary(self):
        # 9999 px^2 box dropped, 20000 px^2 box kept
        img = _image("two", [(0, 0, 99, 101), (0, 0, 100, 200)], w=300, h=300)
        (kept,) = filter_inria_ez([img])
        assert kept.gt_boxes == [Box(0, 0, 100, 200)]

    def test_exactly_10000_is_not_larger(self):
        img = _image("eq", [(0, 0, 100, 100)], w=300, h=300)
        assert filter_inria_ez([img]) == []

    def test_image_left_empty_is_dropped(self):
        img = _image("small", [(0, 0, 10, 30)])
        assert filter_inria_ez([img]) == []

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.lists(st.tuples(st.integers(1, 150), st.integers(1, 250)), max_size=8), max_size=6))
    def test_idempotent(self, sizes):
        images = [_image(f"i{k}", [(0, 0, w, h) for w, h in s], w=200, h=300) for k, s in enumerate(sizes)]
        once = filter_inria_ez(images)
        twice = filter_inria_ez(once)
        assert [(i.image_id, i.gt_boxes) for i in once] == [(i.image_id, i.gt_boxes) for i in twice]


class TestNormalize:
    def test_downscale(self):
        img = AnnotatedImage("a", np.zeros((384, 512, 3), np.uint8), [Box(100, 100, 50, 80)])
        s = normalize_image(img)
        assert s.pixels.shape == (192, 256, 3)
        assert s.scale_factor == 2.0
        assert s.gt_boxes == [Box(50, 50, 25, 40)]

    def test_identity(self):
        px = np.random.default_rng(0).integers(0, 256, (100, 256, 3), dtype=np.uint8)
        s = normalize_image(AnnotatedImage("a", px, []))
        assert s.scale_factor == 1.0
        np.testing.assert_array_equal(s.pixels, px)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(64, 900), st.integers(64, 900), st.data())
    def test_box_round_trip(self, w, h, data):
        x = data.draw(st.integers(0, w - 2))
        y = data.draw(st.integers(0, h - 2))
        bw = data.draw(st.integers(1, w - x))
        bh = data.draw(st.integers(1, h - y))
        img = AnnotatedImage("a", np.zeros((h, w, 3), np.uint8), [Box(x, y, bw, bh)])
        s = normalize_image(img)
        assert s.width == 256
        back = s.to_original(s.gt_boxes[0])
        assert np.allclose(back, (x, y, bw, bh), atol=1.0)


def test_prepared_round_trip(tmp_path):
    px = np.random.default_rng(1).integers(0, 256, (40, 256, 3), dtype=np.uint8)
    ds = PreparedDataset("t", [normalize_image(AnnotatedImage("a/b", px, [Box(1, 1, 5, 5)]))])
    save_prepared(ds, tmp_path, meta={"config_hash": "x"})
    back = load_prepared(tmp_path)
    assert back.images[0].image_id == "a/b"
    np.testing.assert_array_equal(back.images[0].pixels, px)
    assert back.images[0].gt_boxes == [Box(1, 1, 5, 5)]


PENNFUDAN = os.environ.get("PENNFUDAN_ROOT")
INRIA = os.environ.get("INRIA_ROOT")


@pytest.mark.skipif(not PENNFUDAN, reason="PENNFUDAN_ROOT not set (no local Penn-Fudan copy)")
def test_pennfudan_counts():
    from patternspace.dataset import pennfudan_manifest
    images = load_dataset(pennfudan_manifest(PENNFUDAN))
    assert len(images) == 170
    assert sum(len(i.gt_boxes) for i in images) == 345


@pytest.mark.skipif(not INRIA, reason="INRIA_ROOT not set (no local INRIA person copy)")
def test_inria_ez_counts():
    from patternspace.dataset import inria_manifest
    m = inria_manifest(INRIA)
    m.clip_boxes = True
    images = load_dataset(m)
    assert len(images) == 902
    ez = filter_inria_ez(images)
    assert (len(ez), sum(len(i.gt_boxes) for i in ez)) == (205, 272)
