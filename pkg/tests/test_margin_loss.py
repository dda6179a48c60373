import math

import numpy as np
import pytest

from oracles import scaled_softmax_ce
from svbackend.errors import DataError, ZeroNormError
from svbackend.margin_loss import (
    MarginHead,
    _target_logit,
    arcface_forward,
    gradient_check,
    margin_forward,
    margin_schedule,
    subcenter_arcface_forward,
)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


class TestArcFace:
    def test_zero_margin_is_softmax(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            head = MarginHead.random(5, 8, margin=0.0, scale=32.0, seed=int(rng.integers(1e6)))
            x = rng.normal(size=8)
            label = int(rng.integers(5))
            res = arcface_forward(head, x, label)
            ref_loss, ref_probs = scaled_softmax_ce(head.weights[:, 0], x, label, 32.0)
            assert abs(res.loss - ref_loss) <= 1e-12
            np.testing.assert_allclose(res.probabilities, ref_probs, rtol=0, atol=1e-12)

    def test_single_class_zero_loss(self):
        head = MarginHead(np.array([[1.0, 0.0]]), margin=0.2)
        res = arcface_forward(head, [0.3, 0.9], 0)
        assert res.loss == 0.0
        np.testing.assert_allclose(res.grad_embedding, 0.0, atol=1e-12)

    def test_margin_raises_loss(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            W = rng.normal(size=(4, 6))
            W /= np.linalg.norm(W, axis=1, keepdims=True)
            x = rng.normal(size=6)
            plain = arcface_forward(MarginHead(W, 0.0, 32.0), x, 2).loss
            assert arcface_forward(MarginHead(W, 0.2, 32.0), x, 2).loss > plain

    def test_target_logit_example(self):
        # target at 60 degrees with m=0.2: logit s*cos(pi/3 + 0.2)
        W = np.array([[1.0, 0.0], [0.0, 1.0]])
        x = np.array([math.cos(math.pi / 3), math.sin(math.pi / 3)])
        res = margin_forward(W[:, None, :], x, 0, 0.2, 1.0)
        z = np.array([math.cos(math.pi / 3 + 0.2), math.sin(math.pi / 3)])
        expected = -z[0] + math.log(np.exp(z).sum())
        assert res.loss == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("m", [0.2, 0.5])
    def test_target_logit_decreases_with_angle(self, m):
        # covers both sides of the theta + m = pi switch
        angles = np.linspace(0.01, math.pi - 0.01, 400)
        logits = [_target_logit(math.cos(a), m)[0] for a in angles]
        assert np.all(np.diff(logits) < 0)

    def test_embedding_scale_invariant(self):
        head = MarginHead.random(4, 5, seed=3)
        x = np.random.default_rng(30).normal(size=5)
        a, b = arcface_forward(head, x, 1), arcface_forward(head, 7.5 * x, 1)
        assert a.loss == pytest.approx(b.loss, abs=1e-12)
        np.testing.assert_allclose(b.grad_embedding, a.grad_embedding / 7.5, atol=1e-12)

    def test_probabilities_on_simplex(self):
        head = MarginHead.random(10, 4, sub_centers=3, seed=4)
        res = subcenter_arcface_forward(head, [0.1, -2.0, 0.3, 1.0], 7)
        assert res.probabilities.min() >= 0
        assert res.probabilities.sum() == pytest.approx(1.0, abs=1e-12)

    def test_saturated_loss_stays_positive(self):
        W = np.array([[1.0, 0.0], [-1.0, 0.0]])
        res = arcface_forward(MarginHead(W, 0.2, 64.0), [1.0, 1e-3], 0)
        assert 0 < res.loss < 1e-40

    def test_errors(self):
        head = MarginHead.random(3, 4)
        with pytest.raises(DataError):
            arcface_forward(head, np.ones(3), 0)
        with pytest.raises(DataError):
            arcface_forward(head, np.ones(4), 3)
        with pytest.raises(ZeroNormError):
            arcface_forward(head, np.zeros(4), 0)
        with pytest.raises(DataError):
            arcface_forward(MarginHead.random(3, 4, sub_centers=2), np.ones(4), 0)
        with pytest.raises(DataError):
            MarginHead(np.ones((2, 3)))
        with pytest.raises(DataError):
            MarginHead(np.eye(2), margin=math.pi)


class TestSubCenter:
    def test_one_sub_center_matches_arcface(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            head = MarginHead.random(6, 5, sub_centers=1, seed=int(rng.integers(1e6)))
            x = rng.normal(size=5)
            a = arcface_forward(head, x, 2)
            b = subcenter_arcface_forward(head, x, 2)
            assert abs(a.loss - b.loss) <= 1e-12
            np.testing.assert_allclose(b.grad_embedding, a.grad_embedding, rtol=0, atol=1e-12)

    def test_duplicated_sub_centers_match_single(self):
        single = MarginHead.random(4, 6, seed=6)
        dup = MarginHead(np.repeat(single.weights, 3, axis=1), single.margin, single.scale)
        x = np.random.default_rng(60).normal(size=6)
        assert subcenter_arcface_forward(dup, x, 1).loss == pytest.approx(
            arcface_forward(single, x, 1).loss, abs=1e-12)

    def test_only_best_sub_center_gets_gradient(self):
        head = MarginHead.random(3, 4, sub_centers=3, seed=7)
        x = np.random.default_rng(70).normal(size=4)
        res = subcenter_arcface_forward(head, x, 0)
        nonzero = (np.abs(res.grad_weights).sum(axis=2) > 0).sum(axis=1)
        np.testing.assert_array_equal(nonzero, [1, 1, 1])


class TestGradients:
    @pytest.mark.parametrize("margin", [0.0, 0.2, 0.5])
    def test_arcface_finite_differences(self, margin):
        out = gradient_check(num_cases=30, margin=margin, seed=1)
        assert out["cases"] == 30
        assert out["max_rel_err_embedding"] <= 1e-5
        assert out["max_rel_err_weights"] <= 1e-5

    def test_subcenter_finite_differences(self):
        out = gradient_check(num_cases=30, sub_centers=3, num_classes=4, dim=5, seed=2)
        assert max(out["max_rel_err_embedding"], out["max_rel_err_weights"]) <= 1e-5


def test_schedule():
    assert margin_schedule("pretrain") == (0.2, 32.0)
    assert margin_schedule("lmft") == (0.5, 32.0)
    with pytest.raises(DataError):
        margin_schedule("finetune")
