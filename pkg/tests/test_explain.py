"""Occlusion maps, region extraction, localization scoring, and renderings."""

import numpy as np
import pytest
from PIL import Image

from usattn.errors import ConfigError, ShapeError
from usattn.explain import (
    CriticalFactorMap,
    _probe_positions,
    critical_regions,
    dilated_truth,
    localization_score,
    occlusion_map,
    overlay_image,
    save_map_pgm,
)
from usattn.graph import Activation, Conv, Dense, GlobalAvgPool, build_graph


def quadrant_graph(size=16, half=8):
    """2-way head that only reads the top-left quadrant (logit1 = its mean)."""
    g = build_graph([Conv(2, k=size, stride=1, pad=0)], (1, 1, size, size))
    w = g.params[0]["weight"]
    w.data[:] = 0.0
    w.data[1, 0, :half, :half] = 1.0 / (half * half)
    g.params[0]["bias"].data[:] = 0.0
    return g


def blind_graph(size=16):
    g = build_graph([Conv(4, k=3, pad=1), Activation("relu"),
                     GlobalAvgPool(), Dense(2)], (1, 1, size, size))
    for layer in g.params:
        for t in layer.values():
            t.data[:] = 0.0
    return g


def flat_map(grid, patch=1, stride=1):
    return CriticalFactorMap(np.asarray(grid, dtype=float), patch, stride, 0.0, 1)


class TestProbePositions:
    def test_exact_tiling(self):
        assert _probe_positions(16, 4, 4) == [0, 4, 8, 12]

    def test_tail_patch_appended(self):
        assert _probe_positions(16, 5, 4) == [0, 4, 8, 11]

    def test_patch_equals_extent(self):
        assert _probe_positions(16, 16, 7) == [0]

    def test_full_coverage_when_stride_fits_patch(self):
        for extent, patch, stride in [(17, 4, 3), (32, 16, 8), (9, 2, 2)]:
            covered = np.zeros(extent, dtype=bool)
            for p in _probe_positions(extent, patch, stride):
                covered[p : p + patch] = True
            assert covered.all()


class TestCriticalFactorMap:
    def test_rejects_non_2d(self):
        with pytest.raises(ShapeError):
            CriticalFactorMap(np.zeros((2, 2, 2)), 4, 2, 0.0, 1)

    def test_rejects_out_of_range(self):
        with pytest.raises(ShapeError):
            CriticalFactorMap(np.full((2, 2), 1.5), 4, 2, 0.0, 1)
        with pytest.raises(ShapeError):
            CriticalFactorMap(np.full((2, 2), -0.1), 4, 2, 0.0, 1)

    def test_shape_property(self):
        assert flat_map(np.zeros((3, 5))).shape == (3, 5)


class TestOcclusionMap:
    def test_indifferent_model_gives_zero_map(self):
        m = occlusion_map(blind_graph(), np.ones((1, 1, 16, 16)), patch=4, stride=4)
        assert m.grid.shape == (16, 16)
        assert np.all(m.grid == 0.0)

    def test_quadrant_model_mass_is_localized(self):
        m = occlusion_map(quadrant_graph(), np.ones((1, 1, 16, 16)),
                          patch=4, stride=4)
        inside = m.grid[:8, :8].sum()
        assert inside / m.grid.sum() == 1.0
        assert m.grid.max() == 1.0  # peak-normalized
        assert np.all(m.grid[8:, :] == 0.0) and np.all(m.grid[:, 8:] == 0.0)

    def test_records_probe_settings(self):
        m = occlusion_map(quadrant_graph(), np.ones((1, 1, 16, 16)),
                          patch=8, stride=8, baseline=0.25)
        assert (m.patch, m.stride, m.baseline, m.target_class) == (8, 8, 0.25, 1)

    def test_batch_size_does_not_change_result(self):
        img = np.random.default_rng(0).normal(size=(1, 1, 16, 16))
        g = quadrant_graph()
        a = occlusion_map(g, img, patch=4, stride=2, batch_size=3)
        b = occlusion_map(g, img, patch=4, stride=2, batch_size=64)
        assert np.array_equal(a.grid, b.grid)

    def test_rejects_batches(self):
        with pytest.raises(ShapeError, match="single image"):
            occlusion_map(quadrant_graph(), np.ones((2, 1, 16, 16)))

    def test_parameter_validation(self):
        g, img = quadrant_graph(), np.ones((1, 1, 16, 16))
        with pytest.raises(ConfigError):
            occlusion_map(g, img, patch=17)
        with pytest.raises(ConfigError):
            occlusion_map(g, img, patch=0)
        with pytest.raises(ConfigError):
            occlusion_map(g, img, patch=4, stride=0)
        with pytest.raises(ConfigError):
            occlusion_map(g, img, target_class=2)


class TestCriticalRegions:
    def test_threshold_at_quantile_of_nonzero(self):
        grid = np.array([[0.0, 0.2], [0.6, 1.0]])
        region = critical_regions(flat_map(grid), quantile=0.5)
        assert region.tolist() == [[False, False], [True, True]]

    def test_zero_map_selects_nothing(self):
        region = critical_regions(flat_map(np.zeros((4, 4))))
        assert region.dtype == bool and not region.any()

    def test_single_peak_is_selected(self):
        grid = np.zeros((4, 4))
        grid[1, 2] = 1.0
        region = critical_regions(flat_map(grid), quantile=0.85)
        assert region[1, 2]
        assert region.sum() == 1

    def test_quantile_domain(self):
        m = flat_map(np.ones((2, 2)))
        for q in (0.0, 1.0, -0.5):
            with pytest.raises(ConfigError):
                critical_regions(m, quantile=q)


class TestLocalizationScore:
    def test_uniform_map_scores_mask_area_fraction(self):
        mask = np.zeros((16, 16), dtype=bool)
        mask[:4, :] = True
        m = flat_map(np.ones((16, 16)))  # patch 1 -> no dilation
        assert localization_score(m, mask) == pytest.approx(4 / 16)

    def test_dilation_grows_by_half_patch(self):
        mask = np.zeros((16, 16), dtype=bool)
        mask[8, 8] = True
        m = flat_map(np.ones((16, 16)), patch=4)  # radius 2 -> 5x5 box
        assert localization_score(m, mask) == pytest.approx(25 / 256)
        assert dilated_truth(m, mask).sum() == 25

    def test_all_mass_inside_mask(self):
        grid = np.zeros((8, 8))
        grid[2, 3] = 1.0
        mask = np.zeros((8, 8), dtype=bool)
        mask[2, 3] = True
        assert localization_score(flat_map(grid), mask) == 1.0

    def test_zero_map_scores_zero(self):
        assert localization_score(flat_map(np.zeros((8, 8))),
                                  np.ones((8, 8), dtype=bool)) == 0.0

    def test_empty_mask_scores_zero(self):
        assert localization_score(flat_map(np.ones((8, 8))),
                                  np.zeros((8, 8), dtype=bool)) == 0.0

    def test_mass_outside_dilated_truth_scores_zero(self):
        grid = np.zeros((16, 16))
        grid[15, 15] = 1.0
        mask = np.zeros((16, 16), dtype=bool)
        mask[0, 0] = True  # dilated by patch//2 = 2, still far from the mass
        assert localization_score(flat_map(grid, patch=4), mask) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            localization_score(flat_map(np.ones((8, 8))), np.ones((4, 4), dtype=bool))

    def test_matches_quadrant_truth(self):
        m = occlusion_map(quadrant_graph(), np.ones((1, 1, 16, 16)),
                          patch=4, stride=4)
        mask = np.zeros((16, 16), dtype=bool)
        mask[:8, :8] = True
        assert localization_score(m, mask) == 1.0


class TestRenderings:
    def test_overlay_pixels(self, tmp_path):
        img = np.full((8, 8), 0.5)
        grid = np.zeros((8, 8))
        grid[3, 4] = 1.0
        path = tmp_path / "o.png"
        overlay_image(img, flat_map(grid), path, max_blend=200)
        rgb = np.asarray(Image.open(path))
        assert rgb.shape == (8, 8, 3)
        assert tuple(rgb[3, 4]) == (200, 128, 128)  # red hits max_blend exactly
        assert tuple(rgb[0, 0]) == (128, 128, 128)  # untouched pixels stay gray

    def test_zero_map_overlay_is_pure_grayscale(self, tmp_path):
        img = np.linspace(0, 1, 64).reshape(8, 8)
        path = tmp_path / "g.png"
        overlay_image(img, flat_map(np.zeros((8, 8))), path)
        rgb = np.asarray(Image.open(path))
        assert np.array_equal(rgb[..., 0], rgb[..., 1])
        assert np.array_equal(rgb[..., 1], rgb[..., 2])

    def test_overlay_is_deterministic(self, tmp_path):
        img = np.linspace(0, 1, 64).reshape(8, 8)
        grid = np.linspace(0, 1, 64).reshape(8, 8)
        p1, p2 = tmp_path / "a.png", tmp_path / "b.png"
        overlay_image(img, flat_map(grid), p1)
        overlay_image(img, flat_map(grid), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_overlay_validation(self, tmp_path):
        m = flat_map(np.zeros((8, 8)))
        with pytest.raises(ShapeError):
            overlay_image(np.zeros((8, 8, 3)), m, tmp_path / "x.png")
        with pytest.raises(ShapeError):
            overlay_image(np.zeros((4, 4)), m, tmp_path / "x.png")
        with pytest.raises(ConfigError):
            overlay_image(np.zeros((8, 8)), m, tmp_path / "x.png", max_blend=300)

    def test_pgm_bytes(self, tmp_path):
        grid = np.array([[0.0, 1.0], [0.5, 0.25]])
        path = tmp_path / "m.pgm"
        save_map_pgm(flat_map(grid), path)
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n2 2\n255\n")
        assert raw[len(b"P5\n2 2\n255\n"):] == bytes([0, 255, 128, 64])
