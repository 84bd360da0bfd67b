import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sparsetof import tensor as T
from sparsetof.losses import LAMBDA_N_DEFAULT, LossConfig, loss_lp, loss_normals, loss_total, metrics
from sparsetof.normals import estimate_normals, normals_array
from oracles import fd_gradient, rel_err


def rng(seed=0):
    return np.random.default_rng(seed)


def unit_normals(seed, shape=(1, 3, 4, 4)):
    n = rng(seed).standard_normal(shape)
    n[:, 2] = -np.abs(n[:, 2]) - 0.1
    return (n / np.linalg.norm(n, axis=1, keepdims=True)).astype(np.float32)


class TestLp:
    def test_zero_for_identical(self):
        x = rng().standard_normal((2, 1, 4, 4))
        assert loss_lp(x, x, np.ones_like(x, bool)).item() == 0

    def test_single_pixel(self):
        pred, gt, m = np.array([[[[1.0]]]]), np.array([[[[0.5]]]]), np.ones((1, 1, 1, 1), bool)
        assert loss_lp(pred, gt, m, p=1).item() == 0.5
        assert loss_lp(pred, gt, m, p=2).item() == 0.25

    def test_mean_over_samples_of_pixel_sums(self):
        pred = np.zeros((2, 1, 2, 2))
        gt = np.ones((2, 1, 2, 2))
        gt[1] = 2
        m = np.ones_like(gt, bool)
        assert loss_lp(pred, gt, m).item() == pytest.approx((4 + 8) / 2)
        assert loss_lp(pred, gt, m, reduction="mean").item() == pytest.approx(12 / 8)

    def test_mask_excludes_pixels(self):
        pred, gt = np.zeros((1, 1, 2, 2)), np.ones((1, 1, 2, 2))
        m = np.array([[[[True, False], [False, False]]]])
        assert loss_lp(pred, gt, m).item() == 1.0
        with pytest.raises(ValueError, match="empty mask"):
            loss_lp(pred, gt, np.zeros_like(m))

    @given(st.integers(0, 10_000), st.sampled_from([1, 2]))
    def test_permutation_invariant_and_masking_monotone(self, seed, p):
        g = rng(seed)
        pred, gt = g.standard_normal((2, 1, 16)).astype(np.float32), g.standard_normal((2, 1, 16)).astype(np.float32)
        full = np.ones_like(pred, bool)
        base = loss_lp(pred, gt, full, p).item()
        perm = g.permutation(16)
        assert loss_lp(pred[..., perm], gt[..., perm], full, p).item() == pytest.approx(base, rel=1e-5)
        m = g.random(pred.shape) < 0.7
        m[0, 0, 0] = True
        assert loss_lp(pred, gt, m, p).item() <= base + 1e-5

    @pytest.mark.parametrize("p", [1, 2])
    def test_gradient(self, p):
        g = rng(p)
        gt = g.standard_normal((2, 1, 8, 8)).astype(np.float32)
        # keep |pred - gt| away from the p=1 kink
        pred = (gt + g.choice([-1, 1], gt.shape) * g.uniform(0.05, 1.0, gt.shape)).astype(np.float32)
        m = g.random(gt.shape) < 0.8
        t = T.parameter(pred)
        grads = T.backward(loss_lp(t, gt, m, p))

        def f():
            diff = (pred.astype(np.float64) - gt)[m]
            return float((np.abs(diff) ** p).sum() / 2)

        assert rel_err(T.grad_of(grads, t), fd_gradient(f, pred)) < 1e-3


class TestNormalsLoss:
    def test_identical_antipodal_orthogonal(self):
        n = unit_normals(1)
        m = np.ones((1, 1, 4, 4), bool)
        assert loss_normals(n, n, m).item() == pytest.approx(-1, abs=1e-6)
        assert loss_normals(n, -n, m).item() == pytest.approx(1, abs=1e-6)
        a = np.zeros((1, 3, 2, 2), np.float32)
        b = np.zeros((1, 3, 2, 2), np.float32)
        a[:, 0], b[:, 1] = 1, 1
        assert loss_normals(a, b, np.ones((1, 1, 2, 2), bool)).item() == 0

    def test_empty_mask(self):
        n = unit_normals(2)
        with pytest.raises(ValueError):
            loss_normals(n, n, np.zeros((1, 1, 4, 4), bool))

    def test_gradient_through_estimator(self):
        g = rng(5)
        d = g.standard_normal((1, 1, 6, 6)).astype(np.float32)
        ngt = unit_normals(6, (1, 3, 6, 6))
        m = g.random((1, 1, 6, 6)) < 0.9
        t = T.parameter(d)
        grads = T.backward(loss_normals(estimate_normals(t), ngt, m))

        def f():
            with T.no_grad():
                n = estimate_normals(T.Tensor(d)).data.astype(np.float64)
            return float(-((n * ngt).sum(axis=1, keepdims=True)[m]).sum() / m.sum())

        assert rel_err(T.grad_of(grads, t), fd_gradient(f, d)) < 1e-3


class TestTotal:
    def test_default_weight(self):
        assert LossConfig().lambda_n == LAMBDA_N_DEFAULT == 1e-3

    def test_perfect_prediction(self):
        d = rng().uniform(0.1, 0.9, (1, 1, 5, 5)).astype(np.float32)
        n = normals_array(d[:, 0])
        m = np.ones_like(d, bool)
        assert loss_total(d, d, n, n, m).item() == pytest.approx(-1e-3, rel=1e-5)

    def test_lambda_zero_is_lp(self):
        g = rng(3)
        p, q = g.standard_normal((2, 1, 3, 3)), g.standard_normal((2, 1, 3, 3))
        n = unit_normals(4, (2, 3, 3, 3))
        m = np.ones_like(p, bool)
        cfg = LossConfig(lambda_n=0)
        assert loss_total(p, q, n, -n, m, cfg).item() == loss_lp(p, q, m).item()

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            LossConfig(p=3)
        with pytest.raises(ValueError):
            LossConfig(lambda_n=-1)


def metrics_oracle(pred, gt):
    """Direct float64 re-evaluation over pixels with gt > 0."""
    p, g = pred[gt > 0].astype(np.float64), gt[gt > 0].astype(np.float64)
    e = p - g
    out = {
        "rmse": math.sqrt(np.mean(e**2)),
        "mae": np.mean(np.abs(e)),
        "mre": 100 * np.mean(np.abs(e) / g),
    }
    ratio = np.maximum(p / g, g / p)
    for i in (1, 2, 3):
        out[f"delta{i}"] = 100 * np.mean(ratio < 1.25**i)
    return out


class TestMetrics:
    def test_perfect(self):
        gt = rng().uniform(500, 9000, (2, 6, 6))
        r = metrics(gt, gt)
        assert r.rmse == r.mae == r.mre == 0
        assert r.delta1 == r.delta2 == r.delta3 == 100
        assert r.mns == pytest.approx(1.0, abs=1e-7)

    def test_single_pixel(self):
        r = metrics(np.array([[2000.0]]), np.array([[1000.0]]))
        assert (r.rmse, r.mae, r.mre) == (1000, 1000, 100)
        assert r.delta1 == r.delta2 == r.delta3 == 0

    @given(st.integers(0, 10_000))
    def test_against_oracle(self, seed):
        g = rng(seed)
        gt = g.uniform(200, 15000, (2, 5, 7))
        gt[g.random(gt.shape) < 0.1] = 0
        gt[0, 0, 0] = 1000
        pred = gt * g.uniform(0.5, 2.0, gt.shape) + 1
        r = metrics(pred, gt)
        ref = metrics_oracle(pred, gt)
        for k, v in ref.items():
            assert getattr(r, k) == pytest.approx(v, rel=1e-6, abs=1e-9)
        assert r.delta1 <= r.delta2 <= r.delta3 <= 100
        assert -1 <= r.mns <= 1

    def test_mns_matches_negative_normals_loss(self):
        g = rng(9)
        gt_mm = g.uniform(1000, 9000, (1, 6, 6))
        pred_mm = gt_mm + g.normal(0, 300, gt_mm.shape)
        r = metrics(pred_mm, gt_mm)
        scale = np.float32(1 / 15000.0)
        npred = normals_array((pred_mm * scale).astype(np.float32))
        ngt = normals_array((gt_mm * scale).astype(np.float32))
        ln = loss_normals(npred, ngt, np.ones((1, 1, 6, 6), bool)).item()
        assert r.mns == pytest.approx(-ln, abs=1e-6)

    def test_no_valid_pixels(self):
        with pytest.raises(ValueError):
            metrics(np.ones((3, 3)), np.zeros((3, 3)))
