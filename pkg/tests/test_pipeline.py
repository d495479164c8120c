import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcsc.codebook import Codebook, init_dct_codebook
from lcsc.errors import DimensionMismatch, InconsistentLayout, InvalidArgument
from lcsc.imageio import RgbImage
from lcsc.llc import SparseCodeGrid
from lcsc.pipeline import (
    LayerConfig,
    PipelineConfig,
    PooledGrid,
    PyramidFeature,
    combine_scales,
    extract_pipeline_features,
    layer2_inputs,
    max_pool,
    spatial_pyramid_pool,
)


def random_codes(rng, rows, cols, m, k):
    idx = np.sort(np.stack([rng.choice(m, size=k, replace=False) for _ in range(rows * cols)]), axis=1)
    w = rng.normal(size=(rows * cols, k))
    return SparseCodeGrid(idx.reshape(rows, cols, k), w.reshape(rows, cols, k), m)


def brute_max_pool(codes, pool):
    out_r, out_c = -(-codes.rows // pool), -(-codes.cols // pool)
    out = np.zeros((out_r, out_c, codes.codebook_size))
    for r in range(codes.rows):
        for c in range(codes.cols):
            for i, w in zip(codes.indices[r, c], codes.weights[r, c]):
                cell = out[r // pool, c // pool]
                cell[i] = max(cell[i], abs(w))
    return out


class TestConfig:
    def test_presets(self):
        assert PipelineConfig.preset("A1").feature_dim == 52500
        assert PipelineConfig.preset("B1").scale_patch == 32
        a2 = PipelineConfig.preset("A2")
        assert a2.layer1 == LayerConfig(800, 2, 8) and a2.layer2 == LayerConfig(4000, 8, 1)
        assert a2.feature_dim == 100800
        with pytest.raises(InvalidArgument):
            PipelineConfig.preset("C1")

    def test_from_dict_overrides(self):
        cfg = PipelineConfig.from_dict({"name": "A1", "layer1": {"dict_size": 256, "sparsity": 2, "pool_size": 8}})
        assert cfg.layer1.dict_size == 256 and cfg.scale_patch == 16
        b2 = PipelineConfig.from_dict({"name": "B2"})
        assert b2 == PipelineConfig.preset("B2")
        assert PipelineConfig.from_dict(b2.to_dict()) == b2
        partial = PipelineConfig.from_dict({"name": "A2", "layer2": {"dict_size": 64}})
        assert partial.layer2 == LayerConfig(64, PipelineConfig.preset("A2").layer2.sparsity, 1)
        assert partial.layer1 == PipelineConfig.preset("A2").layer1

    def test_invalid(self):
        with pytest.raises(InvalidArgument):
            PipelineConfig(layers=2)
        with pytest.raises(InvalidArgument):
            PipelineConfig(layers=1, layer2=LayerConfig(1, 1, 1))
        with pytest.raises(InvalidArgument):
            LayerConfig(0, 1, 1)


class TestMaxPool:
    def test_densify(self):
        codes = SparseCodeGrid(np.array([[[2, 5]]]), np.array([[[-0.7, 1.7]]]), 8)
        out = max_pool(codes, 1).data[0, 0]
        expected = np.zeros(8)
        expected[2], expected[5] = 0.7, 1.7
        np.testing.assert_array_equal(out, expected)

    def test_identical_block(self):
        codes = SparseCodeGrid(np.tile([1, 3], (4, 4, 1)), np.tile([0.2, -0.9], (4, 4, 1)), 5)
        out = max_pool(codes, 4).data
        assert out.shape == (1, 1, 5)
        np.testing.assert_array_equal(out[0, 0], [0, 0.2, 0, 0.9, 0])

    def test_matches_brute(self, rng):
        codes = random_codes(rng, 11, 7, 9, 2)
        for pool in (1, 3, 4, 8, 20):
            np.testing.assert_array_equal(max_pool(codes, pool).data, brute_max_pool(codes, pool))

    def test_ceil_shape(self, rng):
        assert max_pool(random_codes(rng, 17, 9, 4, 1), 8).data.shape == (3, 2, 4)

    def test_bad_pool(self, rng):
        with pytest.raises(InvalidArgument):
            max_pool(random_codes(rng, 2, 2, 3, 1), 0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 9), st.integers(1, 9), st.integers(1, 4))
def test_pool_permutation_within_blocks(seed, rows, cols, pool):
    rng = np.random.default_rng(seed)
    codes = random_codes(rng, rows, cols, 6, 2)
    idx, w = codes.indices.copy(), codes.weights.copy()
    for r0 in range(0, rows, pool):
        for c0 in range(0, cols, pool):
            bi = idx[r0:r0 + pool, c0:c0 + pool]
            bw = w[r0:r0 + pool, c0:c0 + pool]
            flat_i, flat_w = bi.reshape(-1, 2), bw.reshape(-1, 2)
            p = rng.permutation(flat_i.shape[0])
            bi[...] = flat_i[p].reshape(bi.shape)
            bw[...] = flat_w[p].reshape(bw.shape)
    shuffled = SparseCodeGrid(idx, w, 6)
    assert np.array_equal(max_pool(codes, pool).data, max_pool(shuffled, pool).data)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 9), st.integers(1, 9), st.integers(1, 4),
       st.floats(0.0, 5.0))
def test_pool_monotone(seed, rows, cols, pool, bump):
    rng = np.random.default_rng(seed)
    codes = random_codes(rng, rows, cols, 6, 2)
    w = codes.weights.copy()
    r, c, k = rng.integers(rows), rng.integers(cols), rng.integers(2)
    w[r, c, k] = np.sign(w[r, c, k] or 1.0) * (abs(w[r, c, k]) + bump)
    bigger = SparseCodeGrid(codes.indices, w, 6)
    assert np.all(max_pool(bigger, pool).data >= max_pool(codes, pool).data)


class TestLayer2Inputs:
    def test_normalise(self):
        data = np.zeros((2, 1, 3))
        data[0, 0] = [0, 2, 0]
        out = layer2_inputs(PooledGrid(data)).data
        np.testing.assert_array_equal(out[0, 0], [0, 1, 0])
        np.testing.assert_array_equal(out[1, 0], 0)

    def test_geometry(self, rng):
        out = layer2_inputs(PooledGrid(rng.uniform(size=(16, 16, 7))))
        assert out.data.shape == (16, 16, 7)


class TestPyramid:
    def test_global_level(self, rng):
        g = PooledGrid(rng.uniform(size=(5, 6, 4)))
        f = spatial_pyramid_pool(g, (1,))
        v = g.data.reshape(-1, 4).max(axis=0)
        np.testing.assert_allclose(f.values, v / np.linalg.norm(v))

    def test_21_cells(self, rng):
        f = spatial_pyramid_pool(PooledGrid(rng.uniform(size=(9, 7, 10))), (1, 2, 4))
        assert len(f.layout.segments) == 21
        assert f.values.shape == (210,)
        assert [(s.level, s.cell_row, s.cell_col) for s in f.layout.segments[:6]] == [
            (1, 0, 0), (2, 0, 0), (2, 0, 1), (2, 1, 0), (2, 1, 1), (4, 0, 0)]

    def test_even_partition_leading_remainder(self):
        data = np.zeros((5, 1, 5))
        for r in range(5):
            data[r, 0, r] = 1.0
        f = spatial_pyramid_pool(PooledGrid(data), (2,))
        # rows split [0, 3) and [3, 5); the single column leaves the right cells empty
        top, bottom = f.values[:5], f.values[10:15]
        assert np.all(f.values[5:10] == 0) and np.all(f.values[15:] == 0)
        np.testing.assert_allclose(top, np.array([1, 1, 1, 0, 0]) / np.sqrt(3))
        np.testing.assert_allclose(bottom, np.array([0, 0, 0, 1, 1]) / np.sqrt(2))

    def test_small_grid_empty_cells(self):
        f = spatial_pyramid_pool(PooledGrid(np.ones((1, 1, 3))), (1, 2))
        assert f.values.shape == (15,)
        assert np.all(np.isfinite(f.values))

    def test_constant_grid(self):
        f = spatial_pyramid_pool(PooledGrid(np.full((8, 8, 3), 0.5)), (1, 2, 4))
        cells = f.values.reshape(21, 3)
        assert np.all(cells == cells[0])

    def test_accepts_codes(self, rng):
        codes = random_codes(rng, 4, 4, 5, 2)
        a = spatial_pyramid_pool(codes, (1, 2))
        b = spatial_pyramid_pool(max_pool(codes, 1), (1, 2))
        np.testing.assert_array_equal(a.values, b.values)

    def test_inconsistent_feature(self):
        f = spatial_pyramid_pool(PooledGrid(np.ones((2, 2, 3))), (1,))
        with pytest.raises(InconsistentLayout):
            PyramidFeature(np.zeros(4), f.layout)


def small(name, m1, m2=None):
    base = PipelineConfig.preset(name)
    l1 = LayerConfig(m1, base.layer1.sparsity, base.layer1.pool_size)
    l2 = LayerConfig(m2, base.layer2.sparsity, base.layer2.pool_size) if base.layers == 2 else None
    return PipelineConfig(name, base.scale_patch, base.layers, l1, l2)


class TestExtract:
    def test_one_layer_length(self, rng):
        cfg = small("A1", 40)
        img = RgbImage(rng.uniform(size=(3, 40, 40)))
        f = extract_pipeline_features(img, cfg, [init_dct_codebook(384, 40, allow_undercomplete=True)])
        assert f.values.shape == (21 * 40,)
        assert np.all(np.isfinite(f.values))
        assert f.layout.pipelines == ["A1"]

    def test_two_layer_segments(self, rng):
        cfg = small("B2", 20, 30)
        img = RgbImage(rng.uniform(size=(3, 50, 60)))
        cbs = [init_dct_codebook(384, 20, allow_undercomplete=True), init_dct_codebook(20, 30)]
        f = extract_pipeline_features(img, cfg, cbs)
        assert f.values.shape == (21 * 50,)
        layers = [s.layer for s in f.layout.segments]
        assert layers == [1] * 21 + [2] * 21
        assert f.layout.segments[21].offset == 21 * 20

    def test_deterministic(self, rng):
        cfg = small("A1", 16)
        planes = rng.uniform(size=(3, 30, 30))
        cb = [init_dct_codebook(384, 16, allow_undercomplete=True)]
        a = extract_pipeline_features(RgbImage(planes), cfg, cb)
        b = extract_pipeline_features(RgbImage(planes.copy()), cfg, cb, threads=3)
        assert np.array_equal(a.values, b.values)

    def test_codebook_mismatch(self, rng):
        img = RgbImage(rng.uniform(size=(3, 30, 30)))
        with pytest.raises(DimensionMismatch):
            extract_pipeline_features(img, small("A1", 16), [init_dct_codebook(384, 17, allow_undercomplete=True)])
        with pytest.raises(DimensionMismatch):
            extract_pipeline_features(img, small("A1", 16), [Codebook(np.eye(16))])
        with pytest.raises(DimensionMismatch):
            extract_pipeline_features(img, small("A2", 16, 8), [init_dct_codebook(384, 16, allow_undercomplete=True)])

    def test_layer1_matches_unbanded_path(self, rng):
        from lcsc.descriptors import dense_grid
        from lcsc.llc import encode_grid
        cfg = small("A1", 24)
        img = RgbImage(rng.uniform(size=(3, 45, 37)))
        cb = init_dct_codebook(384, 24, allow_undercomplete=True)
        codes = encode_grid(dense_grid(img), cb, cfg.encoder(0))
        expected = spatial_pyramid_pool(max_pool(codes, 8), (1, 2, 4)).values
        got = extract_pipeline_features(img, cfg, [cb]).values
        np.testing.assert_allclose(got, expected, atol=1e-15)


class TestCombine:
    def _feat(self, rng, name, dim):
        f = spatial_pyramid_pool(PooledGrid(rng.uniform(size=(4, 4, dim))), (1, 2), pipeline=name)
        return f

    def test_concat(self, rng):
        a, b = self._feat(rng, "A1", 3), self._feat(rng, "A2", 5)
        c = combine_scales([a, b])
        assert c.values.shape == (15 + 25,)
        assert c.layout.pipelines == ["A1", "A2"]
        assert c.layout.pipeline_slice("A2") == slice(15, 40)
        np.testing.assert_allclose(np.linalg.norm(c.values[:15]), 1.0)
        np.testing.assert_allclose(np.linalg.norm(c.values[15:]), 1.0)

    def test_single_identity(self, rng):
        a = self._feat(rng, "A1", 3)
        c = combine_scales([a])
        np.testing.assert_allclose(c.values, a.values / np.linalg.norm(a.values))

    def test_order(self, rng):
        a, b = self._feat(rng, "A1", 3), self._feat(rng, "B1", 2)
        ab, ba = combine_scales([a, b]), combine_scales([b, a])
        np.testing.assert_array_equal(ab.values[:15], ba.values[10:])
        assert ba.layout.pipelines == ["B1", "A1"]

    def test_errors(self, rng):
        a = self._feat(rng, "A1", 3)
        with pytest.raises(InconsistentLayout):
            combine_scales([a, a])
        with pytest.raises(InconsistentLayout):
            combine_scales([])

    def test_layout_json(self, rng):
        from lcsc.pipeline import FeatureLayout
        c = combine_scales([self._feat(rng, "A1", 3), self._feat(rng, "B2", 4)])
        back = FeatureLayout.from_json_obj(c.layout.to_json_obj())
        assert back == c.layout and back.digest() == c.layout.digest()
        assert c.layout.pipeline_dims() == {"A1": 15, "B2": 20}
