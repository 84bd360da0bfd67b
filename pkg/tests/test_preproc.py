import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sparsetof import dtb
from sparsetof.preproc import (
    D_MAX,
    E_MAX,
    EmptySparseInput,
    SparseDepthMap,
    edt,
    edt_nni,
    nearest_sites,
    nni,
    preprocess,
    sparsity_level,
)
from oracles import nearest_brute


def random_map(seed, max_side=48):
    g = np.random.default_rng(seed)
    h, w = g.integers(1, max_side + 1, 2)
    p = g.choice([0.005, 0.02, 0.1, 0.5])
    valid = g.random((h, w)) < p
    if not valid.any():
        valid[g.integers(h), g.integers(w)] = True
    depth = np.where(valid, g.uniform(0.1, D_MAX, (h, w)), 0.0).astype(np.float32)
    return depth, valid


class TestSparsity:
    def test_sparsity_anchors(self):
        assert sparsity_level(np.pad(np.ones(943), (0, 304 * 224 - 943)).reshape(224, 304)) == pytest.approx(1.384, abs=1e-3)
        assert sparsity_level(np.pad(np.ones(1239), (0, 640 * 480 - 1239)).reshape(480, 640)) == pytest.approx(0.403, abs=1e-3)

    def test_all_valid(self):
        assert sparsity_level(np.ones((4, 5))) == 100.0


class TestEdtNni:
    def test_small_cases(self):
        np.testing.assert_array_equal(edt(np.array([[1.0, 0, 0]])), [[0, 1, 2]])
        np.testing.assert_allclose(edt(np.array([[1.0, 0], [0, 0]])), [[0, 1], [1, np.sqrt(2)]], rtol=1e-7)
        np.testing.assert_array_equal(nni(np.array([[0, 0, 5.0, 0]])), [[5, 5, 5, 5]])
        np.testing.assert_array_equal(nni(np.array([[1.0, 0, 0, 3.0]])), [[1, 1, 3, 3]])

    def test_midpoint_tie_goes_to_smaller_index(self):
        np.testing.assert_array_equal(nni(np.array([[1.0, 0, 3.0]])), [[1, 1, 3]])
        # vertical and diagonal ties as well
        d = np.zeros((3, 3), np.float32)
        d[0, 2], d[2, 0] = 1, 2
        assert nni(d)[1, 1] == 1
        d = np.zeros((3, 1), np.float32)
        d[0, 0], d[2, 0] = 4, 6
        assert nni(d)[1, 0] == 4

    def test_empty_rejected(self):
        with pytest.raises(EmptySparseInput, match="empty sparse input"):
            edt(np.zeros((3, 3)))
        with pytest.raises(EmptySparseInput):
            nni(-np.ones((3, 3)))

    @pytest.mark.parametrize("seed", range(200))
    def test_matches_brute_force(self, seed):
        depth, valid = random_map(seed)
        sq, label = nearest_sites(depth)
        bsq, blabel = nearest_brute(valid)
        np.testing.assert_array_equal(sq, bsq)
        np.testing.assert_array_equal(label, blabel)
        np.testing.assert_array_equal(nni(depth), depth.ravel()[blabel])

    @given(st.integers(0, 2**32 - 1))
    def test_zero_set_and_lipschitz(self, seed):
        depth, valid = random_map(seed, 24)
        e = edt(depth).astype(np.float64)
        np.testing.assert_array_equal(e == 0, valid)
        # 1-Lipschitz along unit steps (and hence along any path)
        assert np.all(np.abs(np.diff(e, axis=0)) <= 1 + 1e-6)
        assert np.all(np.abs(np.diff(e, axis=1)) <= 1 + 1e-6)
        assert np.all(np.abs(e[1:, 1:] - e[:-1, :-1]) <= np.sqrt(2) + 1e-6)

    def test_runtime_640x480(self):
        g = np.random.default_rng(0)
        d = np.zeros((480, 640), np.float32)
        idx = g.choice(d.size, 1200, replace=False)
        d.ravel()[idx] = g.uniform(0.5, 15, 1200)
        edt_nni(d)  # warm-up (JIT cache)
        best = min(_timed(edt_nni, d) for _ in range(5))
        assert best <= 0.050


def _timed(fn, *args):
    t = time.perf_counter()
    fn(*args)
    return time.perf_counter() - t


class TestPreprocess:
    def test_normalizations(self):
        d = np.zeros((4, 4), np.float32)
        d[0, 0] = 15.0
        color = np.full((3, 4, 4), 255.0)
        inp = preprocess(d, color)
        assert inp.d_nni[0, 0] == 1.0
        assert inp.color.max() == 1.0
        d = np.zeros((1, 41), np.float32)
        d[0, 0] = 3.0
        inp = preprocess(d, np.zeros((1, 41, 3)))
        assert inp.edt[0, 40] == 1.0  # 40 px away
        assert inp.stacked().shape == (5, 1, 41)

    def test_edt_not_clamped(self):
        d = np.zeros((1, 60), np.float32)
        d[0, 0] = 1
        assert preprocess(d, np.zeros((3, 1, 60))).edt.max() == pytest.approx(59 / E_MAX)

    def test_dense_input_is_fixed_point(self):
        d = np.random.default_rng(3).uniform(0.5, 14, (6, 7)).astype(np.float32)
        inp = preprocess(d, np.zeros((3, 6, 7)))
        assert np.all(inp.edt == 0)
        np.testing.assert_array_equal(inp.d_nni, d / np.float32(D_MAX))
        np.testing.assert_array_equal(nni(nni(d)), nni(d))

    def test_sparse_values_preserved(self):
        depth, valid = random_map(5)
        inp = preprocess(SparseDepthMap(depth), np.zeros((3,) + depth.shape))
        np.testing.assert_array_equal(inp.d_nni[valid], depth[valid] / np.float32(D_MAX))
        assert np.all(inp.edt[valid] == 0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="color shape"):
            preprocess(np.ones((4, 4)), np.zeros((3, 4, 5)))


class TestDtb:
    @given(st.integers(1, 4), st.integers(0, 1000))
    def test_roundtrip(self, rank, seed):
        g = np.random.default_rng(seed)
        a = g.standard_normal(tuple(g.integers(1, 5, rank))).astype(np.float32)
        b = dtb.decode(dtb.encode(a))
        assert b.dtype == np.float32 and b.tobytes() == a.tobytes()

    def test_header_layout(self):
        blob = dtb.encode(np.arange(6, dtype=np.float32).reshape(2, 3))
        assert blob[:4] == b"DTB1" and blob[4] == 0 and blob[5] == 2
        assert blob[6:14] == bytes([2, 0, 0, 0, 3, 0, 0, 0])
        assert len(blob) == 14 + 24

    def test_int_codes_and_errors(self):
        a = np.array([-3, 0, 7], np.int32)
        assert dtb.decode(dtb.encode(a)).tolist() == [-3, 0, 7]
        with pytest.raises(dtb.DTBError):
            dtb.decode(b"XXXX\x00\x00")
        with pytest.raises(dtb.DTBError):
            dtb.decode(dtb.encode(np.ones(3, np.float32))[:-1])
