import math

import numpy as np
import pytest

from focalattn.autodiff import grad_check
from focalattn.objectives import (
    MetricReport,
    aif_l1_loss,
    baseline_argmax_dff,
    compute_metrics,
    depth_l1_loss,
    smoothness_loss,
    unsupervised_loss,
)
from focalattn.defocus import Scene, synth_stack
from focalattn.stack import FocalStack, FocusAxis

from .oracles import loop_metrics


def rand_map(rng, h=8, w=8):
    return rng.uniform(0.1, 1.0, size=(h, w, 1))


class TestDepthL1:
    def test_zero_when_equal(self):
        d = rand_map(np.random.default_rng(0))
        assert depth_l1_loss(d, d) == 0.0

    def test_constant_offset(self):
        d = rand_map(np.random.default_rng(1))
        assert depth_l1_loss(d + 0.3, d) == pytest.approx(0.3, abs=1e-12)

    def test_mask_semantics(self):
        gt = np.zeros((4, 4, 1))
        pred = np.ones((4, 4, 1))
        pred[:, 2:] = 5.0
        mask = np.zeros((4, 4), dtype=bool)
        mask[:, :2] = True
        assert depth_l1_loss(pred, gt, mask) == 1.0

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            depth_l1_loss(np.zeros((2, 2, 1)), np.zeros((2, 2, 1)), np.zeros((2, 2), bool))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            depth_l1_loss(np.zeros((2, 2, 1)), np.zeros((2, 3, 1)))


class TestAifL1:
    def test_examples(self):
        img = np.random.default_rng(2).random((5, 5, 3))
        assert aif_l1_loss(img, img) == 0.0
        assert aif_l1_loss(img + 0.1, img) == pytest.approx(0.1, abs=1e-12)
        shifted = img.copy()
        shifted[..., 1] += 0.3
        assert aif_l1_loss(shifted, img) == pytest.approx(0.1, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            aif_l1_loss(np.zeros((2, 2, 3)), np.zeros((2, 2, 1)))


class TestSmoothness:
    def test_constant_depth_is_zero(self):
        img = np.random.default_rng(3).random((6, 7, 3))
        assert smoothness_loss(np.full((6, 7, 1), 0.4), img) == 0.0

    def test_column_ramp_on_flat_image(self):
        depth = np.tile(np.arange(6.0), (5, 1))[..., None]
        for lam in (0.0, 1.0, 50.0):
            assert smoothness_loss(depth, np.full((5, 6, 3), 0.3), lam) == pytest.approx(1.0, abs=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        depth, img, lam = rng.random((5, 6, 1)), rng.random((5, 6, 3)), 2.5
        xs, ys = [], []
        for i in range(5):
            for j in range(6):
                if j + 1 < 6:
                    w = math.exp(-lam / 3 * sum(abs(img[i, j + 1, k] - img[i, j, k]) for k in range(3)))
                    xs.append(w * abs(depth[i, j + 1, 0] - depth[i, j, 0]))
                if i + 1 < 5:
                    w = math.exp(-lam / 3 * sum(abs(img[i + 1, j, k] - img[i, j, k]) for k in range(3)))
                    ys.append(w * abs(depth[i + 1, j, 0] - depth[i, j, 0]))
        expected = sum(xs) / len(xs) + sum(ys) / len(ys)
        assert smoothness_loss(depth, img, lam) == pytest.approx(expected, abs=1e-12)

    def test_large_lambda_vanishes(self):
        rng = np.random.default_rng(5)
        img = np.zeros((6, 6, 3))
        img[::2, ::2] = 1.0
        img[1::2, 1::2] = 1.0
        assert smoothness_loss(rng.random((6, 6, 1)), img, lam=1e4) < 1e-100

    def test_too_small_rejected(self):
        with pytest.raises(ValueError):
            smoothness_loss(np.zeros((1, 4, 1)), np.zeros((1, 4, 3)))

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            smoothness_loss(np.zeros((3, 3, 1)), np.zeros((3, 3, 3)), lam=-1)


class TestUnsupervised:
    def test_alpha_zero_is_aif(self):
        rng = np.random.default_rng(6)
        a, b, d = rng.random((4, 4, 3)), rng.random((4, 4, 3)), rng.random((4, 4, 1))
        r = unsupervised_loss(a, b, d, alpha=0.0)
        assert r.total == r.aif_l1

    def test_perfect_is_zero(self):
        img = np.random.default_rng(7).random((4, 4, 3))
        assert unsupervised_loss(img, img, np.full((4, 4, 1), 0.2)).total == 0.0

    def test_combination(self):
        img = np.full((4, 5, 3), 0.5)
        depth = np.tile(np.arange(5.0), (4, 1))[..., None]
        r = unsupervised_loss(img + 0.1, img, depth, alpha=0.002)
        assert r.aif_l1 == pytest.approx(0.1) and r.smooth == pytest.approx(1.0)
        assert r.total == pytest.approx(0.102, abs=1e-9)
        assert abs(r.total - (r.aif_l1 + 0.002 * r.smooth)) < 1e-9

    def test_negative_alpha_rejected(self):
        with pytest.raises(ValueError):
            unsupervised_loss(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)), np.zeros((2, 2, 1)), alpha=-0.1)


class TestLossGradients:
    # points keep |pred - gt| away from zero so the L1 kink is never straddled
    def setup_method(self):
        rng = np.random.default_rng(8)
        self.gt = rng.random((5, 5, 1))
        self.pred = self.gt + rng.choice([-1, 1], size=self.gt.shape) * rng.uniform(0.05, 0.3, self.gt.shape)
        self.mask = rng.random((5, 5)) < 0.6
        self.img = rng.random((5, 5, 3))

    def test_depth_l1(self):
        for mask in (None, self.mask):
            assert grad_check(lambda p: depth_l1_loss(p, self.gt, mask), self.pred) < 1e-6

    def test_aif_l1(self):
        gt = self.img
        pred = gt + np.where(np.random.default_rng(9).random(gt.shape) < 0.5, -0.1, 0.1)
        assert grad_check(lambda p: aif_l1_loss(p, gt), pred) < 1e-6

    def test_smoothness(self):
        depth = np.cumsum(np.random.default_rng(10).uniform(0.05, 0.2, (5, 5, 1)), axis=0)
        depth = depth + np.cumsum(np.full((5, 5, 1), 0.03), axis=1)
        assert grad_check(lambda d: smoothness_loss(d, self.img, 4.0), depth) < 1e-6


class TestMetrics:
    def test_perfect(self):
        gt = rand_map(np.random.default_rng(11))
        r = compute_metrics(gt, gt)
        assert r.mae == r.mse == r.rmse == r.log_rms == r.abs_rel == r.sqr_rel == r.bumpiness == 0
        assert r.delta1 == r.delta2 == r.delta3 == 1.0
        assert r.valid_pixel_count == 64

    def test_delta_threshold(self):
        gt = rand_map(np.random.default_rng(12))
        assert compute_metrics(1.2 * gt, gt).delta1 == 1.0
        assert compute_metrics(1.3 * gt, gt).delta1 == 0.0

    def test_oracle_agreement(self):
        rng = np.random.default_rng(13)
        for trial in range(100):
            gt = rng.uniform(-0.2, 1.0, (16, 16))
            pred = gt + rng.normal(0, 0.2, (16, 16))
            mask = rng.random((16, 16)) < 0.85 if trial % 2 else None
            got = compute_metrics(pred, gt, mask)
            want = loop_metrics(pred, gt, mask)
            for name, value in want.items():
                assert abs(getattr(got, name) - value) < 1e-9, (trial, name)

    def test_quadratic_bumpiness(self):
        j = np.arange(16.0)
        err = np.tile(0.01 * j**2, (16, 1))
        gt = np.full((16, 16), 0.5)
        assert abs(compute_metrics(gt + err, gt).bumpiness - 2.0) < 1e-9

    def test_shift_invariance(self):
        rng = np.random.default_rng(14)
        gt, pred = rng.random((12, 12)), rng.random((12, 12))
        a, b = compute_metrics(pred, gt), compute_metrics(pred + 3.7, gt + 3.7)
        for name in ("mae", "mse", "rmse", "bumpiness"):
            assert abs(getattr(a, name) - getattr(b, name)) < 1e-9

    def test_invariants(self):
        rng = np.random.default_rng(15)
        r = compute_metrics(rng.random((10, 10)), rng.random((10, 10)))
        assert 0 <= r.delta1 <= r.delta2 <= r.delta3 <= 1
        assert min(r.mae, r.mse, r.rmse, r.log_rms, r.abs_rel, r.sqr_rel, r.bumpiness) >= 0

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            compute_metrics(np.ones((4, 4)), np.ones((4, 4)), np.zeros((4, 4), bool))

    def test_text_roundtrip(self):
        rng = np.random.default_rng(16)
        r = compute_metrics(rng.random((9, 9)), rng.random((9, 9)))
        text = r.to_text()
        assert text.splitlines()[0].startswith("mae ")
        back = MetricReport.from_text(text)
        assert back.valid_pixel_count == 81
        assert abs(back.mae - r.mae) < 1e-9


class TestBaseline:
    def test_identical_slices_pick_first(self):
        img = np.random.default_rng(17).random((8, 8, 3))
        stack = FocalStack(np.stack([img] * 4, axis=-1), FocusAxis([0.1, 0.2, 0.6, 0.9]))
        np.testing.assert_array_equal(baseline_argmax_dff(stack), 0.1)

    def test_sharp_slice_wins(self):
        aif = np.random.default_rng(18).random((24, 24, 3))
        scene = Scene(aif, np.full((24, 24), 0.5), kappa=6.0)
        out = baseline_argmax_dff(synth_stack(scene, FocusAxis([0.0, 0.5, 1.0])).stack)
        assert out.shape == (24, 24, 1)
        np.testing.assert_array_equal(out[4:-4, 4:-4], 0.5)

    def test_values_in_axis(self, toy_small):
        for s in toy_small:
            out = baseline_argmax_dff(s.stack)
            assert np.isin(out, s.stack.axis.positions).all()
