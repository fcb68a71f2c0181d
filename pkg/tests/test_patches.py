import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from patternspace.dataset import ScaledImage
from patternspace.patches import (
    PatchSpec,
    SamplerConfig,
    extract,
    iou,
    jitter_patch,
    read_patch_specs,
    sample_pair,
    sample_patch,
    sobel,
    sobel_batch,
    write_patch_specs,
    PixelPatch,
)

boxes = st.tuples(
    st.floats(-100, 100), st.floats(-100, 100), st.floats(0.5, 80), st.floats(0.5, 80)
)


class TestIoU:
    def test_identical(self):
        assert iou((3, 4, 10, 20), (3, 4, 10, 20)) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 10, 10), (20, 20, 5, 5)) == 0.0

    def test_touching_edges(self):
        assert iou((0, 0, 10, 10), (10, 0, 10, 10)) == 0.0

    def test_half_shift(self):
        assert iou((0, 0, 10, 10), (5, 0, 10, 10)) == pytest.approx(1 / 3)

    def test_zero_area_rejected(self):
        with pytest.raises(ValueError):
            iou((0, 0, 0, 10), (0, 0, 5, 5))

    @settings(max_examples=300)
    @given(boxes, boxes)
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert v == pytest.approx(iou(b, a), abs=1e-12)
        assert 0.0 <= v <= 1.0 + 1e-12

    @settings(max_examples=100)
    @given(boxes)
    def test_self_is_one(self, a):
        assert iou(a, a) == pytest.approx(1.0)


class TestSamplePatch:
    def test_scale_histogram_uniform(self):
        rng = np.random.default_rng(0)
        cfg = SamplerConfig()
        scales = np.array([sample_patch((192, 256), cfg, rng).scale for _ in range(10000)])
        counts, _ = np.histogram(scales, bins=20, range=(20, 256))
        assert stats.chisquare(counts).pvalue > 0.01

    def test_fixed_ratio(self):
        rng = np.random.default_rng(1)
        cfg = SamplerConfig(ratio_min=3.0, ratio_max=3.0)
        for _ in range(2000):
            p = sample_patch((192, 256), cfg, rng)
            assert abs(p.h - 3.0 * p.w) <= 3.0 / 2 + 1e-9  # w rounded to the nearest pixel

    def test_height_clamped_to_image(self):
        cfg = SamplerConfig(scale_min=256, scale_max=256)
        p = sample_patch((192, 256), cfg, np.random.default_rng(2))
        assert p.h == 192
        assert p.w == 64

    def test_seed_reproducible(self):
        cfg = SamplerConfig(ratio_min=1.67, ratio_max=2.0)
        a = [sample_patch((192, 256), cfg, np.random.default_rng(7)) for _ in range(3)]
        b = [sample_patch((192, 256), cfg, np.random.default_rng(7)) for _ in range(3)]
        assert a == b

    @settings(max_examples=60, deadline=None)
    @given(st.integers(24, 400), st.integers(8, 400), st.integers(0, 2**31), st.sampled_from([1.0, 1.67, 3.0]))
    def test_always_inside(self, height, width, seed, ratio):
        cfg = SamplerConfig(ratio_min=ratio, ratio_max=ratio * 1.2, scale_max=256)
        rng = np.random.default_rng(seed)
        for _ in range(30):
            p = sample_patch((height, width), cfg, rng)
            assert p.inside(height, width)
            assert p.w >= 1 and p.h >= 1
            assert cfg.scale_min <= p.scale <= cfg.scale_max

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            SamplerConfig(scale_min=0)
        with pytest.raises(ValueError):
            SamplerConfig(ratio_min=2, ratio_max=1)
        with pytest.raises(ValueError):
            SamplerConfig(iou_min=1.0)

    def test_log_uniform_flag(self):
        rng = np.random.default_rng(3)
        cfg = SamplerConfig(scale_sampling="log_uniform")
        logs = np.log([sample_patch((192, 256), cfg, rng).scale for _ in range(5000)])
        counts, _ = np.histogram(logs, bins=10, range=(np.log(20), np.log(256)))
        assert stats.chisquare(counts).pvalue > 0.01


class TestSamplePair:
    def test_all_pairs_above_threshold(self):
        rng = np.random.default_rng(0)
        cfg = SamplerConfig()
        for _ in range(10000):
            p1, p2 = sample_pair((192, 256), cfg, rng)
            assert iou(p1.box, p2.box) > 0.75
            assert p2.inside(192, 256)

    def test_zero_jitter_is_identity(self):
        cfg = SamplerConfig(pair_jitter_max=0.0, pair_scale_min=1.0, pair_scale_max=1.0)
        rng = np.random.default_rng(1)
        for _ in range(200):
            p1, p2 = sample_pair((192, 256), cfg, rng)
            assert p1.box == p2.box
            assert iou(p1.box, p2.box) == 1.0

    def test_mean_iou_matches_grid_enumeration(self):
        # A large interior patch makes pixel rounding negligible, so the
        # continuous jitter geometry is the oracle.
        cfg = SamplerConfig()
        p1 = PatchSpec("", 1500, 1200, 300, 900, 900.0, 3.0)
        dims = (4000, 4000)
        g = np.linspace(-cfg.pair_jitter_max, cfg.pair_jitter_max, 41)
        ms = np.linspace(cfg.pair_scale_min, cfg.pair_scale_max, 41)
        dx, dy, m = np.meshgrid(g, g, ms, indexing="ij")
        w2, h2 = p1.w * m, p1.h * m
        cx, cy = p1.x + p1.w / 2 + dx * p1.w, p1.y + p1.h / 2 + dy * p1.h
        x1 = np.maximum(p1.x, cx - w2 / 2)
        x2 = np.minimum(p1.x + p1.w, cx + w2 / 2)
        y1 = np.maximum(p1.y, cy - h2 / 2)
        y2 = np.minimum(p1.y + p1.h, cy + h2 / 2)
        inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
        ious = inter / (p1.w * p1.h + w2 * h2 - inter)
        expected = ious[ious > cfg.iou_min].mean()

        rng = np.random.default_rng(5)
        measured = []
        while len(measured) < 20000:
            p2 = jitter_patch(p1, dims, cfg, rng)
            v = iou(p1.box, p2.box)
            if v > cfg.iou_min:
                measured.append(v)
        assert np.mean(measured) == pytest.approx(expected, abs=3e-3)


def _scaled(pixels):
    return ScaledImage("img", pixels, 1.0, [])


class TestExtract:
    def test_identity_crop(self):
        px = np.random.default_rng(0).integers(0, 256, (64, 80, 3), dtype=np.uint8)
        spec = PatchSpec("img", 10, 20, 32, 32, 32.0, 1.0)
        out = extract(_scaled(px), spec)
        np.testing.assert_array_equal(out.rgb, px[20:52, 10:42])

    def test_uniform_gray(self):
        px = np.full((100, 120, 3), 137, np.uint8)
        out = extract(_scaled(px), PatchSpec("img", 5, 7, 33, 90, 90.0, 2.7))
        assert out.rgb.shape == (32, 32, 3)
        assert np.all(out.rgb == 137)

    def test_checkerboard_mean_preserved(self):
        yy, xx = np.mgrid[0:128, 0:128]
        board = np.where((yy // 3 + xx // 3) % 2 == 0, 230, 20).astype(np.uint8)
        px = np.repeat(board[:, :, None], 3, axis=2)
        out = extract(_scaled(px), PatchSpec("img", 0, 0, 128, 128, 128.0, 1.0))
        assert abs(out.rgb.astype(float).mean() - px.astype(float).mean()) <= 2.0

    def test_out_of_bounds(self):
        px = np.zeros((50, 50, 3), np.uint8)
        with pytest.raises(ValueError):
            extract(_scaled(px), PatchSpec("img", 30, 0, 30, 30, 30.0, 1.0))


def _reference_sobel(luma):
    """Direct 3x3 correlation with mirrored borders, one pixel at a time."""
    h, w = luma.shape
    kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]

    def px(i, j):
        i = -i if i < 0 else (2 * (h - 1) - i if i >= h else i)
        j = -j if j < 0 else (2 * (w - 1) - j if j >= w else j)
        return luma[i][j]

    dx = np.zeros((h, w))
    dy = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            for a in range(3):
                for b in range(3):
                    dx[i, j] += kx[a][b] * px(i + a - 1, j + b - 1)
                    dy[i, j] += kx[b][a] * px(i + a - 1, j + b - 1)
    return np.clip(dx / 4, -1, 1), np.clip(dy / 4, -1, 1)


class TestSobel:
    def test_constant_patch_is_zero(self):
        g = sobel(PixelPatch(None, np.full((32, 32, 3), 99, np.uint8)))
        assert g.grads.shape == (2, 32, 32)
        assert np.all(g.grads == 0)

    def test_vertical_edge(self):
        rgb = np.zeros((32, 32, 3), np.uint8)
        rgb[:, 16:] = 255
        dx, dy = sobel_batch(rgb)[0]
        assert dx[:, 15:17].min() > 0.4
        assert np.abs(dy[1:-1]).max() < 1e-6

    def test_ramp_hand_values(self):
        # gray ramp 0, 20, 40, 60, 80 along x: interior dx = 4 * (2 * 20/255) / 4
        gray = np.tile(np.arange(5) * 20, (5, 1)).astype(np.uint8)
        rgb = np.repeat(gray[:, :, None], 3, axis=2)
        dx, dy = sobel_batch(rgb)[0]
        np.testing.assert_allclose(dx[:, 1:4], 40 / 255, atol=1e-5)
        np.testing.assert_allclose(dx[:, [0, 4]], 0.0, atol=1e-6)  # mirrored border cancels
        np.testing.assert_allclose(dy, 0.0, atol=1e-6)

    def test_matches_direct_convolution(self):
        rgb = np.random.default_rng(3).integers(0, 256, (5, 5, 3), dtype=np.uint8)
        luma = (rgb.astype(np.float64) / 255) @ np.array([0.299, 0.587, 0.114])
        rdx, rdy = _reference_sobel(luma)
        dx, dy = sobel_batch(rgb)[0]
        np.testing.assert_allclose(dx, rdx, atol=1e-5)
        np.testing.assert_allclose(dy, rdy, atol=1e-5)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_horizontal_flip(self, seed):
        rgb = np.random.default_rng(seed).integers(0, 256, (32, 32, 3), dtype=np.uint8)
        g = sobel_batch(rgb)[0]
        gf = sobel_batch(rgb[:, ::-1])[0]
        np.testing.assert_allclose(gf[0], -g[0][:, ::-1], atol=1e-6)
        np.testing.assert_allclose(gf[1], g[1][:, ::-1], atol=1e-6)


def test_spec_serialization(tmp_path):
    specs = [PatchSpec("a", 1, 2, 3, 9, 9.5, 3.0), PatchSpec("b", 0, 0, 10, 20, 20.0, 2.0)]
    write_patch_specs(tmp_path / "p.jsonl", specs)
    assert read_patch_specs(tmp_path / "p.jsonl") == specs
