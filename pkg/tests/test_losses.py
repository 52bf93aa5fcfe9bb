import math

import numpy as np
import pytest

from convtr.errors import DataError, ParameterError
from convtr.losses import (
    FocalLossConfig,
    cross_entropy,
    cross_entropy_backward,
    focal_loss,
    focal_loss_backward,
)
from convtr.tensor import Tensor


def _pixel_logits(values):
    """Logits for a single pixel, shaped [1, C, 1, 1]."""
    return Tensor(np.array(values, dtype=np.float64).reshape(1, -1, 1, 1))


class TestCrossEntropy:
    def test_hand_softmax_log(self):
        # softmax([ln2, 0, 0]) = [2/4, 1/4, 1/4]; -log(1/2) = ln 2
        out, _ = cross_entropy(_pixel_logits([math.log(2.0), 0.0, 0.0]),
                               np.zeros((1, 1, 1), dtype=np.int64))
        assert out.data.reshape(()) == pytest.approx(math.log(2.0), rel=1e-12)

    def test_uniform_logits(self):
        out, _ = cross_entropy(_pixel_logits([0.0, 0.0, 0.0]),
                               np.array([[[1]]], dtype=np.int64))
        assert out.data.reshape(()) == pytest.approx(math.log(3.0), rel=1e-12)

    def test_dominant_logit_loss_vanishes(self):
        out, _ = cross_entropy(_pixel_logits([100.0, 0.0, 0.0]),
                               np.zeros((1, 1, 1), dtype=np.int64))
        assert out.data.reshape(()) == pytest.approx(0.0, abs=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            cross_entropy(_pixel_logits([0.0, 0.0]), np.array([[[2]]]))
        with pytest.raises(DataError):
            cross_entropy(_pixel_logits([0.0, 0.0]), np.array([[[-1]]]))

    def test_backward_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(0)
        logits = Tensor(rng.standard_normal((2, 3, 4, 4)))
        labels = rng.integers(0, 3, size=(2, 4, 4))
        _, cache = cross_entropy(logits, labels)
        g = cross_entropy_backward(cache, np.ones((2, 4, 4)))
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        onehot = np.eye(3)[labels].transpose(0, 3, 1, 2)
        assert np.allclose(g, probs - onehot, atol=1e-12)


class TestFocalLoss:
    def test_gamma_zero_unit_alpha_equals_mean_ce(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            logits = Tensor(rng.standard_normal((2, 3, 5, 5)))
            labels = rng.integers(0, 3, size=(2, 5, 5))
            cfg = FocalLossConfig.uniform(3, gamma=0.0)
            fl, _ = focal_loss(logits, labels, cfg)
            ce, _ = cross_entropy(logits, labels)
            assert abs(float(fl.data) - float(ce.data.mean())) <= 1e-12

    def test_hand_evaluated_half_probability(self):
        # two equal logits give p_t = 0.5: loss = (1-0.5)^2 * ln 2
        out, _ = focal_loss(_pixel_logits([0.0, 0.0]),
                            np.zeros((1, 1, 1), dtype=np.int64),
                            FocalLossConfig.uniform(2, gamma=2.0))
        assert float(out.data) == pytest.approx(0.25 * math.log(2.0), rel=1e-12)

    def test_perfect_pixel_loss_vanishes(self):
        out, _ = focal_loss(_pixel_logits([60.0, 0.0, 0.0]),
                            np.zeros((1, 1, 1), dtype=np.int64),
                            FocalLossConfig.uniform(3, gamma=2.0))
        assert float(out.data) == pytest.approx(0.0, abs=1e-20)

    def test_monotone_non_increasing_in_pt(self):
        # per-pixel loss alpha*(1-p)^g*(-log p) decreases as p grows
        p = np.linspace(0.02, 0.999, 400)
        for gamma in (0.0, 0.5, 1.0, 2.0, 4.0):
            vals = (1.0 - p) ** gamma * (-np.log(p))
            assert np.all(np.diff(vals) < 0.0)

    def test_alpha_scaling_scales_loss_and_grads_exactly(self):
        rng = np.random.default_rng(2)
        logits = Tensor(rng.standard_normal((1, 3, 4, 4)))
        labels = rng.integers(0, 3, size=(1, 4, 4))
        base = np.array([0.5, 1.0, 1.5])
        l1, c1 = focal_loss(logits, labels, FocalLossConfig(base, 2.0))
        g1 = focal_loss_backward(c1)
        # k = 2 is a power of two, so the scaling is exact in binary fp
        l2, c2 = focal_loss(logits, labels, FocalLossConfig(2.0 * base, 2.0))
        g2 = focal_loss_backward(c2)
        assert float(l2.data) == 2.0 * float(l1.data)
        assert np.array_equal(g2, 2.0 * g1)

    def test_alpha_length_checked(self):
        with pytest.raises(ParameterError):
            focal_loss(_pixel_logits([0.0, 0.0, 0.0]), np.zeros((1, 1, 1), dtype=np.int64),
                       FocalLossConfig(np.ones(2)))

    def test_invalid_config(self):
        with pytest.raises(ParameterError):
            FocalLossConfig(np.array([1.0, -1.0]))
        with pytest.raises(ParameterError):
            FocalLossConfig(np.ones(3), gamma=-0.5)

    @pytest.mark.parametrize("gamma", [0.0, 1.0, 2.0])
    def test_gradient_matches_finite_differences(self, gamma):
        from convtr.tensor import gradcheck

        rng = np.random.default_rng(3)
        logits = Tensor(rng.standard_normal((1, 3, 4, 4)))
        labels = rng.integers(0, 3, size=(1, 4, 4))
        cfg = FocalLossConfig(np.array([0.7, 1.1, 1.3]), gamma)

        def f(t):
            loss, cache = focal_loss(t, labels, cfg)
            return loss, lambda u: focal_loss_backward(cache, float(u))

        assert gradcheck(f, logits, 1e-5) < 1e-4

    def test_loss_mean_reduction_scale(self):
        # doubling the pixel count with identical content keeps the mean
        logits1 = _pixel_logits([1.0, -1.0])
        logits2 = Tensor(np.tile(logits1.data, (1, 1, 2, 1)))
        labels1 = np.zeros((1, 1, 1), dtype=np.int64)
        labels2 = np.zeros((1, 2, 1), dtype=np.int64)
        cfg = FocalLossConfig.uniform(2)
        a, _ = focal_loss(logits1, labels1, cfg)
        b, _ = focal_loss(logits2, labels2, cfg)
        assert float(a.data) == pytest.approx(float(b.data), rel=1e-12)
