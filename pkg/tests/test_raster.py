import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vcnn.errors import DimensionUnsupported, DomainMismatch
from vcnn.geometry import Box
from vcnn.network import CellFunction
from vcnn.raster import GridImage, discretize, load_png, rasterize, save_png
from vcnn.voronoi import grid_partition, locate_many, voronoi_partition


def brute_discretize(img, partition, sub=32):
    """Supersampled cell averages; converges to the exact clip-based answer."""
    H, W = img.height, img.width
    ys, xs = np.mgrid[0 : H * sub, 0 : W * sub]
    pts = np.column_stack([(xs.ravel() + 0.5) / (W * sub), (ys.ravel() + 0.5) / (H * sub)])
    idx = locate_many(partition, pts)
    vals = img.values[ys.ravel() // sub, xs.ravel() // sub]
    out = np.zeros((partition.cell_count, img.channels))
    np.add.at(out, idx, vals)
    return out / np.bincount(idx, minlength=partition.cell_count)[:, None]


class TestDiscretize:
    def test_constant_image(self):
        p = voronoi_partition(np.random.default_rng(0).random((30, 2)))
        img = GridImage(np.full((17, 23, 2), [0.3, -4.0]), Box.unit(2))
        np.testing.assert_allclose(discretize(img, p).values, np.tile([0.3, -4.0], (30, 1)), rtol=1e-13)

    def test_same_grid_identity(self):
        vals = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = discretize(GridImage(vals, Box.unit(2)), grid_partition([2, 2]))
        # grid index is x-major; image rows run along y
        np.testing.assert_allclose(out.values[:, 0], [1.0, 3.0, 2.0, 4.0], rtol=1e-14)

    def test_roundtrip_through_raster(self):
        p = voronoi_partition(np.random.default_rng(1).random((15, 2)))
        f = CellFunction(p, np.random.default_rng(2).random((15, 1)))
        back = discretize(rasterize(f, 2048, 2048), p)
        np.testing.assert_allclose(back.values, f.values, atol=1e-3)

    def test_matches_supersampling(self):
        p = voronoi_partition(np.random.default_rng(3).random((8, 2)))
        img = GridImage(np.random.default_rng(4).random((6, 5)), Box.unit(2))
        np.testing.assert_allclose(discretize(img, p).values, brute_discretize(img, p, 64), atol=5e-3)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31), h=st.integers(1, 40), w=st.integers(1, 40), n=st.integers(1, 30))
    def test_mean_preservation(self, seed, h, w, n):
        rng = np.random.default_rng(seed)
        dom = Box([0.0, -1.0], [2.0, 0.5])
        p = voronoi_partition(dom.lo + rng.random((n, 2)) * (dom.hi - dom.lo), dom)
        img = GridImage(rng.standard_normal((h, w, 1)), dom)
        out = discretize(img, p)
        mean = (p.volumes @ out.values) / dom.volume
        np.testing.assert_allclose(mean, img.values.mean(axis=(0, 1)), atol=1e-9)

    def test_domain_mismatch(self):
        with pytest.raises(DomainMismatch):
            discretize(GridImage(np.ones((2, 2)), Box([0, 0], [2, 1])), grid_partition([2, 2]))

    def test_one_dimensional_unsupported(self):
        with pytest.raises(DimensionUnsupported):
            GridImage(np.ones((2, 2)), Box([0.0], [1.0]))


class TestRefinement:
    def test_pixel_aligned_grid_is_fixed_point(self):
        p = grid_partition([8, 8])
        f = discretize(GridImage(np.random.default_rng(0).random((64, 64)), Box.unit(2)), p)
        once = discretize(rasterize(f, 512, 512), p)
        twice = discretize(rasterize(once, 512, 512), p)
        np.testing.assert_allclose(once.values, f.values, atol=1e-12)
        np.testing.assert_allclose(twice.values, once.values, atol=1e-12)

    def test_voronoi_second_pass_shrinks_with_resolution(self):
        # boundary pixels mix two cells, so the change is O(1/R), not zero
        p = voronoi_partition(np.random.default_rng(1).random((12, 2)))
        f = CellFunction(p, np.random.default_rng(2).random((12, 1)))
        changes = []
        for R in (64, 256, 1024):
            once = discretize(rasterize(f, R, R), p)
            twice = discretize(rasterize(once, R, R), p)
            changes.append(np.abs(twice.values - once.values).max())
        assert changes[0] > changes[1] > changes[2]


class TestRasterize:
    def test_single_cell(self):
        img = rasterize(CellFunction(grid_partition([1, 1]), [[5.0]]), 3, 2)
        np.testing.assert_array_equal(img.values, 5.0)

    def test_two_cells(self):
        p = voronoi_partition([[0.25, 0.5], [0.75, 0.5]])
        img = rasterize(CellFunction(p, [[0.0], [1.0]]), 4, 3)
        np.testing.assert_array_equal(img.values[:, :2, 0], 0.0)
        np.testing.assert_array_equal(img.values[:, 2:, 0], 1.0)

    def test_grid_identity(self):
        vals = np.random.default_rng(0).random((6, 4, 2))
        img = GridImage(vals, Box.unit(2))
        back = rasterize(discretize(img, grid_partition([4, 6])), 4, 6)
        np.testing.assert_allclose(back.values, vals, rtol=1e-13)

    def test_one_dimensional(self):
        with pytest.raises(DimensionUnsupported):
            rasterize(CellFunction(grid_partition([2]), [[0.0], [1.0]]), 4, 1)


class TestPng:
    @pytest.mark.parametrize("channels", [1, 2, 3, 4])
    def test_roundtrip_within_quantization(self, tmp_path, channels):
        vals = np.random.default_rng(0).uniform(-2, 3, (9, 7, channels))
        path = tmp_path / "img.png"
        meta = save_png(GridImage(vals, Box.unit(2)), path)
        back = load_png(path)
        np.testing.assert_allclose(back.values, vals, atol=meta["scale"] / 2 + 1e-12)
        sidecar = json.loads((tmp_path / "img.png.json").read_text())
        assert sidecar["channels"] == channels

    def test_rows_upright(self, tmp_path):
        from PIL import Image

        vals = np.zeros((2, 1))
        vals[1, 0] = 1.0  # top row of the domain
        save_png(GridImage(vals, Box.unit(2)), tmp_path / "a.png")
        arr = np.asarray(Image.open(tmp_path / "a.png"))
        assert arr[0, 0] == 255 and arr[1, 0] == 0

    def test_too_many_channels(self, tmp_path):
        with pytest.raises(DimensionUnsupported):
            save_png(GridImage(np.zeros((2, 2, 5)), Box.unit(2)), tmp_path / "x.png")

    def test_deterministic_bytes(self, tmp_path):
        img = GridImage(np.random.default_rng(0).random((8, 8, 3)), Box.unit(2))
        save_png(img, tmp_path / "a.png")
        save_png(img, tmp_path / "b.png")
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
