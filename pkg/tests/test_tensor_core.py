import numpy as np
import pytest
from conftest import central_diff, rel_err

from orbitmoe.tensor_core import (Rng, ShapeError, gaussian, gelu,
                                  gelu_backward, layer_norm,
                                  layer_norm_backward, matmul,
                                  matmul_backward, softmax,
                                  softmax_cross_entropy,
                                  softmax_cross_entropy_backward)


class TestMatmul:
    def test_identity(self, rng64):
        a = rng64.normal((3, 3))
        out, _ = matmul(np.eye(3), a)
        np.testing.assert_allclose(out, a)

    def test_hand_example(self):
        out, _ = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]),
                        np.array([[1.0], [1.0]]))
        np.testing.assert_allclose(out, [[3.0], [7.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_backward_matches_finite_differences(self, rng64):
        a = rng64.normal((4, 3))
        x = rng64.normal((3, 2))
        g = rng64.normal((4, 2))

        def loss():
            return float(np.sum(matmul(a, x)[0] * g))

        out, cache = matmul(a, x)
        ga, gx = matmul_backward(g, cache)
        assert rel_err(ga, central_diff(loss, a)) < 1e-6
        assert rel_err(gx, central_diff(loss, x)) < 1e-6
        # grad wrt the left operand of y = A x is g x^T
        np.testing.assert_allclose(ga, g @ x.T, atol=1e-12)


class TestGelu:
    def test_zero_fixed_point(self):
        out, _ = gelu(np.array([0.0]))
        assert out[0] == 0.0

    def test_value_at_one(self):
        # x * Phi(x) at x=1 equals the standard-normal CDF at 1
        out, _ = gelu(np.array([1.0]))
        assert abs(out[0] - 0.841345) < 1e-6

    def test_backward_matches_finite_differences(self, rng64):
        x = rng64.normal((5, 4))
        g = rng64.normal((5, 4))

        def loss():
            return float(np.sum(gelu(x)[0] * g))

        _, cache = gelu(x)
        gx = gelu_backward(g, cache)
        assert rel_err(gx, central_diff(loss, x)) < 1e-6


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        x = np.full((2, 8), 3.7)
        out, _ = layer_norm(x, np.ones(8), np.zeros(8))
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_two_point_row(self):
        out, _ = layer_norm(np.array([[1.0, 3.0]]), np.ones(2), np.zeros(2))
        np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-4)

    def test_backward_matches_finite_differences(self, rng64):
        x = rng64.normal((3, 6))
        gain = rng64.normal(6, 1.0, 0.2)
        bias = rng64.normal(6, 0.0, 0.2)
        g = rng64.normal((3, 6))

        def loss():
            return float(np.sum(layer_norm(x, gain, bias)[0] * g))

        _, cache = layer_norm(x, gain, bias)
        gx, gg, gb = layer_norm_backward(g, cache)
        assert rel_err(gx, central_diff(loss, x)) < 1e-5
        assert rel_err(gg, central_diff(loss, gain)) < 1e-5
        assert rel_err(gb, central_diff(loss, bias)) < 1e-5


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = softmax_cross_entropy(np.zeros((3, 4)), np.array([0, 1, 3]))
        assert abs(loss - np.log(4.0)) < 1e-12

    def test_saturated_correct_prediction(self):
        logits = np.zeros((2, 5))
        logits[0, 2] = 20.0
        logits[1, 0] = 20.0
        loss, _ = softmax_cross_entropy(logits, np.array([2, 0]))
        assert loss < 1e-8

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))

    def test_gradient(self, rng64):
        logits = rng64.normal((4, 6))
        labels = np.array([0, 5, 2, 2])
        _, cache = softmax_cross_entropy(logits, labels)
        g = softmax_cross_entropy_backward(cache)
        onehot = np.zeros((4, 6))
        onehot[np.arange(4), labels] = 1.0
        np.testing.assert_allclose(g, (softmax(logits) - onehot) / 4,
                                   atol=1e-12)

        def loss():
            return softmax_cross_entropy(logits, labels)[0]

        assert rel_err(g, central_diff(loss, logits)) < 1e-6

    def test_softmax_rows_sum_to_one(self, rng64):
        p = softmax(rng64.normal((50, 9), 0.0, 5.0))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)

    def test_label_smoothing_value_and_gradient(self, rng64):
        logits = rng64.normal((3, 5))
        labels = np.array([1, 4, 0])
        s = 0.1
        loss, cache = softmax_cross_entropy(logits, labels, label_smoothing=s)
        # manual: -sum_c q_c log p_c with q = (1-s) one_hot + s/C
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        q = np.full((3, 5), s / 5)
        q[np.arange(3), labels] += 1 - s
        assert loss == pytest.approx(float(-(q * logp).sum(axis=1).mean()))
        g = softmax_cross_entropy_backward(cache)

        def f():
            return softmax_cross_entropy(logits, labels, label_smoothing=s)[0]

        assert rel_err(g, central_diff(f, logits)) < 1e-6

    def test_zero_smoothing_matches_plain(self, rng64):
        logits = rng64.normal((4, 6))
        labels = np.array([0, 1, 2, 3])
        a, _ = softmax_cross_entropy(logits, labels)
        b, _ = softmax_cross_entropy(logits, labels, label_smoothing=0.0)
        assert a == b

    def test_invalid_smoothing(self):
        with pytest.raises(ValueError):
            softmax_cross_entropy(np.zeros((1, 2)), np.array([0]),
                                  label_smoothing=1.0)


class TestGaussian:
    def test_zero_std_gives_mean(self):
        out = gaussian(Rng(0), (4, 4), mean=2.5, std=0.0)
        assert np.all(out == 2.5)

    def test_same_seed_identical(self):
        a = gaussian(Rng(42), (100,), 0.0, 1.0)
        b = gaussian(Rng(42), (100,), 0.0, 1.0)
        assert np.array_equal(a, b)

    def test_sample_std(self):
        draws = gaussian(Rng(7), (100_000,), 0.0, 0.01)
        assert 0.0099 <= draws.std() <= 0.0101

    def test_split_streams_differ(self):
        root = Rng(3)
        a = root.split().normal((16,))
        b = root.split().normal((16,))
        assert not np.array_equal(a, b)

    def test_negative_std_rejected(self):
        with pytest.raises(ValueError):
            gaussian(Rng(0), (2,), 0.0, -1.0)


def test_random_backward_sweep(rng64):
    # every primitive's backward against central differences on small shapes
    for _ in range(5):
        a = rng64.normal((8, 8))
        b = rng64.normal((8, 8))
        g = rng64.normal((8, 8))

        def mm_loss():
            return float(np.sum(matmul(a, b)[0] * g))

        _, cache = matmul(a, b)
        ga, gb = matmul_backward(g, cache)
        assert rel_err(ga, central_diff(mm_loss, a)) < 1e-4
        assert rel_err(gb, central_diff(mm_loss, b)) < 1e-4
