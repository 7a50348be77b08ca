import numpy as np
import pytest
from conftest import central_diff, rel_err

from orbitmoe.butterfly import (ButterflyAngles, butterfly_backward,
                                butterfly_forward, inverse_shuffle,
                                materialize, next_pow2, perfect_shuffle)
from orbitmoe.tensor_core import ShapeError


def random_angles(dim, n_layers, rng, std=1.0):
    ba = ButterflyAngles(dim, n_layers)
    ba.angles[...] = rng.normal(ba.angles.shape, 0.0, std)
    return ba


class TestShuffle:
    def test_riffle_convention(self):
        out = perfect_shuffle(np.array([[1.0, 2.0, 3.0, 4.0]]))
        np.testing.assert_array_equal(out, [[1.0, 3.0, 2.0, 4.0]])

    def test_width_two_is_identity(self):
        x = np.array([[5.0, 6.0]])
        np.testing.assert_array_equal(perfect_shuffle(x), x)

    def test_odd_width_rejected(self):
        with pytest.raises(ShapeError):
            perfect_shuffle(np.zeros((1, 5)))

    @pytest.mark.parametrize("d", [2, 4, 8, 16, 64])
    def test_order_is_log2(self, d):
        x = np.arange(d, dtype=float)[None, :]
        y = x
        for _ in range(int(np.log2(d))):
            y = perfect_shuffle(y)
        np.testing.assert_array_equal(y, x)

    def test_inverse(self, rng64):
        x = rng64.normal((3, 16))
        np.testing.assert_array_equal(inverse_shuffle(perfect_shuffle(x)), x)


class TestForward:
    def test_single_givens_quarter_turn(self):
        ba = ButterflyAngles(2, n_layers=1, angles=[[np.pi / 2]])
        out, _ = butterfly_forward(np.array([[1.0, 0.0]]), ba)
        np.testing.assert_allclose(out, [[0.0, 1.0]], atol=1e-12)

    @pytest.mark.parametrize("d", [4, 8, 16])
    def test_zero_angles_is_fixed_permutation(self, d, rng64):
        ba = ButterflyAngles(d, n_layers=2)
        # the permutation must not depend on the data
        perm_of = lambda x: butterfly_forward(x[None, :], ba)[0][0]
        base = perm_of(np.arange(1.0, d + 1.0))
        x = rng64.normal((d,))
        out = perm_of(x)
        idx = (base - 1.0).astype(int)
        np.testing.assert_allclose(out, x[idx], atol=0)
        assert abs(np.linalg.norm(out) - np.linalg.norm(x)) < 1e-12

    @pytest.mark.parametrize("d", [2, 4, 8, 16, 64, 256])
    def test_norm_preserved(self, d, rng64):
        ba = random_angles(d, 2, rng64)
        x = rng64.normal((5, d))
        out, _ = butterfly_forward(x, ba)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1),
                                   np.linalg.norm(x, axis=1), rtol=1e-6)

    def test_norm_preserved_float32(self, rng64):
        ba = ButterflyAngles(64, 2, dtype=np.float32)
        ba.angles[...] = rng64.normal(ba.angles.shape).astype(np.float32)
        x = rng64.normal((10, 64)).astype(np.float32)
        out, _ = butterfly_forward(x, ba)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1),
                                   np.linalg.norm(x, axis=1), rtol=1e-5)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            butterfly_forward(np.zeros((1, 6)), ButterflyAngles(8, 2))

    @pytest.mark.parametrize("d", [3, 6, 12])
    def test_padded_width_contracts(self, d, rng64):
        # stripping after the final stage can only remove energy
        ba = random_angles(d, 2, rng64)
        assert ba.padded_dim == next_pow2(d)
        x = rng64.normal((6, d))
        out, _ = butterfly_forward(x, ba)
        assert np.all(np.linalg.norm(out, axis=1)
                      <= np.linalg.norm(x, axis=1) * (1 + 1e-12))

    def test_compute_cost_linear_in_width(self, rng64):
        # multiplies per row: 4 per pair per stage = 2 * n_layers * padded_dim
        counts = {}
        for d in (8, 16, 32):
            ba = random_angles(d, 2, rng64)
            counts[d] = 2 * ba.n_layers * ba.padded_dim
        assert counts[16] == 2 * counts[8]
        assert counts[32] == 2 * counts[16]


class TestMaterialize:
    def test_zero_angles_is_permutation_matrix(self):
        b = materialize(ButterflyAngles(8, 2))
        assert np.all((b == 0) | (b == 1))
        np.testing.assert_array_equal(b.sum(axis=0), np.ones(8))
        np.testing.assert_array_equal(b.sum(axis=1), np.ones(8))

    @pytest.mark.parametrize("d", [2, 4, 8, 16, 64, 256])
    def test_orthogonality(self, d, rng64):
        b = materialize(random_angles(d, 2, rng64))
        assert np.abs(b @ b.T - np.eye(d)).max() < 1e-6

    def test_d2_is_rotation_matrix(self):
        alpha = 0.37
        b = materialize(ButterflyAngles(2, 1, angles=[[alpha]]))
        expected = np.array([[np.cos(alpha), -np.sin(alpha)],
                             [np.sin(alpha), np.cos(alpha)]])
        np.testing.assert_allclose(b, expected, atol=1e-12)

    def test_matches_forward_action(self, rng64):
        ba = random_angles(8, 2, rng64)
        b = materialize(ba)
        x = rng64.normal((4, 8))
        out, _ = butterfly_forward(x, ba)
        np.testing.assert_allclose(out, x @ b.T, atol=1e-12)

    def test_angle_count_for_default_width(self):
        ba = ButterflyAngles(256, 2)
        assert ba.n_params == 256


class TestBackward:
    def test_zero_upstream(self, rng64):
        ba = random_angles(8, 2, rng64)
        x = rng64.normal((3, 8))
        _, cache = butterfly_forward(x, ba)
        gx, gang = butterfly_backward(np.zeros((3, 8)), cache)
        assert np.all(gx == 0) and np.all(gang == 0)

    def test_angle_gradients_match_finite_differences(self, rng64):
        ba = random_angles(4, 2, rng64)
        x = rng64.normal((3, 4))
        g = rng64.normal((3, 4))

        def loss():
            return float(np.sum(butterfly_forward(x, ba)[0] * g))

        _, cache = butterfly_forward(x, ba)
        _, gang = butterfly_backward(g, cache)
        assert rel_err(gang, central_diff(loss, ba.angles)) < 1e-5

    def test_input_gradient_is_transpose_action(self, rng64):
        ba = random_angles(8, 2, rng64)
        x = rng64.normal((4, 8))
        g = rng64.normal((4, 8))
        _, cache = butterfly_forward(x, ba)
        gx, _ = butterfly_backward(g, cache)
        b = materialize(ba)
        np.testing.assert_allclose(gx, g @ b, atol=1e-8)

    def test_padded_width_gradients(self, rng64):
        ba = random_angles(6, 2, rng64)
        x = rng64.normal((2, 6))
        g = rng64.normal((2, 6))

        def loss():
            return float(np.sum(butterfly_forward(x, ba)[0] * g))

        _, cache = butterfly_forward(x, ba)
        gx, gang = butterfly_backward(g, cache)
        assert rel_err(gang, central_diff(loss, ba.angles)) < 1e-5
        assert rel_err(gx, central_diff(loss, x)) < 1e-5

    def test_pad_only_pairs_get_zero_gradient(self, rng64):
        # width 6 padded to 8: stage-one pair (6,7) acts on zero lanes only
        ba = random_angles(6, 1, rng64)
        assert ba.padded_dim == 8
        x = rng64.normal((3, 6))
        g = rng64.normal((3, 6))
        _, cache = butterfly_forward(x, ba)
        _, gang = butterfly_backward(g, cache)
        assert np.all(gang[0, 3] == 0.0)


def test_angles_shape_validation():
    with pytest.raises(ShapeError):
        ButterflyAngles(8, 2, angles=np.zeros((2, 3)))
    ba = ButterflyAngles(6, 2)
    assert ba.padded_dim == 8
    assert ba.angles.shape == (2, 4)
