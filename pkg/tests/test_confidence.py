"""Correlation matrices and matchability maps (all five variants)."""

import math

import numpy as np
import pytest

from confmatch.confidence import (
    ConfidenceMap,
    confidence_maps,
    correlation,
    resolve_variant,
)


def cells_to_map(rows, grid):
    """Stack per-cell channel vectors into a (C, H, W) tensor."""
    h, w = grid
    arr = np.asarray(rows, dtype=np.float64)
    return arr.T.reshape(arr.shape[1], h, w)


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


class TestCorrelation:
    def test_orthonormal_basis_gives_identity(self):
        f = cells_to_map([[1.0, 0.0], [0.0, 1.0]], (1, 2))
        s = correlation(f, f, 1.0).s
        np.testing.assert_allclose(s, np.eye(2), atol=1e-15)

    def test_gamma_scales(self):
        f = cells_to_map([[1.0, 0.0], [0.0, 1.0]], (1, 2))
        s = correlation(f, f, 2.0).s
        np.testing.assert_allclose(s, 0.5 * np.eye(2), atol=1e-15)

    def test_matches_scalar_dot_oracle(self):
        rng = np.random.default_rng(0)
        f1 = rng.standard_normal((5, 1, 3))
        f2 = rng.standard_normal((5, 1, 3))
        s = correlation(f1, f2, 1.7).s
        for i in range(3):
            for j in range(3):
                expected = sum(f1[c, 0, i] * f2[c, 0, j] for c in range(5)) / 1.7
                np.testing.assert_allclose(s[i, j], expected, atol=1e-12)

    def test_flattening_is_row_major(self):
        f = np.zeros((1, 2, 2))
        f[0, 1, 0] = 1.0  # flat index 2
        s = correlation(f, f, 1.0).s
        assert s[2, 2] == 1.0 and s.sum() == 1.0

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            correlation(np.zeros((3, 2, 2)), np.zeros((4, 2, 2)), 1.0)

    def test_bad_gamma(self):
        with pytest.raises(ValueError):
            correlation(np.zeros((3, 2, 2)), np.zeros((3, 2, 2)), 0.0)


class TestConfidenceMaps:
    def test_identity_correlation_gives_half(self):
        corr = correlation(cells_to_map(np.eye(2), (1, 2)),
                           cells_to_map(np.eye(2), (1, 2)), 1.0)
        w1, w2 = confidence_maps(corr)
        np.testing.assert_allclose(w1.w, [0.5, 0.5], atol=1e-15)
        np.testing.assert_allclose(w2.w, w1.w, atol=1e-15)

    def test_constant_correlation_gives_half(self):
        corr = correlation(np.full((2, 2, 2), 0.3), np.full((2, 2, 2), 0.3), 1.0)
        w1, w2 = confidence_maps(corr)
        np.testing.assert_allclose(w1.w, 0.5, atol=1e-15)
        np.testing.assert_allclose(w2.w, 0.5, atol=1e-15)

    def test_hand_evaluated_case(self):
        # raw maxima [2, 0], mean 1 -> sigmoid(+-1)
        from confmatch.confidence import CorrelationMatrix

        corr = CorrelationMatrix(s=np.array([[2.0, 0.0], [0.0, 0.0]]), gamma=1.0)
        w1, w2 = confidence_maps(corr)
        np.testing.assert_allclose(w1.w, [sigmoid(1.0), sigmoid(-1.0)], atol=1e-12)
        np.testing.assert_allclose(w1.w, [0.7311, 0.2689], atol=1e-4)
        np.testing.assert_allclose(w2.w, w1.w, atol=1e-12)

    def test_shift_invariance_of_default_variant(self):
        from confmatch.confidence import CorrelationMatrix

        rng = np.random.default_rng(1)
        s = rng.standard_normal((9, 9))
        base1, base2 = confidence_maps(CorrelationMatrix(s=s, gamma=1.0))
        for c in (-5.0, 3.0):
            w1, w2 = confidence_maps(CorrelationMatrix(s=s + c, gamma=1.0))
            np.testing.assert_allclose(w1.w, base1.w, atol=1e-12)
            np.testing.assert_allclose(w2.w, base2.w, atol=1e-12)

    def test_outputs_strictly_inside_unit_interval(self):
        from confmatch.confidence import CorrelationMatrix

        rng = np.random.default_rng(2)
        s = rng.standard_normal((16, 16)) * 3
        w1, w2 = confidence_maps(CorrelationMatrix(s=s, gamma=1.0))
        for w in (w1.w, w2.w):
            assert (w > 0.0).all() and (w < 1.0).all()

    def test_permuting_second_image_cells(self):
        rng = np.random.default_rng(3)
        f1 = rng.standard_normal((4, 2, 2))
        f2 = rng.standard_normal((4, 2, 2))
        w1, w2 = confidence_maps(correlation(f1, f2, 2.0))
        perm = np.array([2, 0, 3, 1])
        f2_perm = f2.reshape(4, -1)[:, perm].reshape(4, 2, 2)
        w1p, w2p = confidence_maps(correlation(f1, f2_perm, 2.0))
        np.testing.assert_allclose(w1p.w, w1.w, atol=1e-12)
        np.testing.assert_allclose(w2p.w, w2.w[perm], atol=1e-12)


class TestVariants:
    def setup_method(self):
        rng = np.random.default_rng(4)
        from confmatch.confidence import CorrelationMatrix

        self.corr = CorrelationMatrix(s=rng.standard_normal((6, 6)), gamma=1.0)

    def test_sigmoid_raw(self):
        w1, _ = confidence_maps(self.corr, "i")
        np.testing.assert_allclose(
            w1.w, [sigmoid(v) for v in self.corr.s.max(axis=1)], atol=1e-12
        )

    def test_relu_mean_nonnegative_with_zeros(self):
        w1, w2 = confidence_maps(self.corr, "ii")
        assert (w1.w >= 0).all() and (w2.w >= 0).all()
        assert (w1.w == 0).any()  # below-mean cells are clipped

    def test_rowcol_mean(self):
        w1, w2 = confidence_maps(self.corr, "iii")
        s = self.corr.s
        expect1 = [sigmoid(s[i].max() - s[i].mean()) for i in range(6)]
        expect2 = [sigmoid(s[:, j].max() - s[:, j].mean()) for j in range(6)]
        np.testing.assert_allclose(w1.w, expect1, atol=1e-12)
        np.testing.assert_allclose(w2.w, expect2, atol=1e-12)

    def test_learned_conv_affine(self):
        w1, _ = confidence_maps(self.corr, "iv", affine_scale=2.0, affine_bias=-1.0)
        expect = [sigmoid(2.0 * v - 1.0) for v in self.corr.s.max(axis=1)]
        np.testing.assert_allclose(w1.w, expect, atol=1e-12)

    def test_default_is_variant_v(self):
        w_default, _ = confidence_maps(self.corr)
        w_v, _ = confidence_maps(self.corr, "v")
        np.testing.assert_array_equal(w_default.w, w_v.w)
        assert w_default.variant == "sigmoid-global-mean"

    def test_aliases_and_unknown(self):
        assert resolve_variant("ii") == "relu-mean"
        assert resolve_variant("relu-mean") == "relu-mean"
        with pytest.raises(ValueError):
            resolve_variant("vi")

    def test_variant_recorded_on_map(self):
        w1, _ = confidence_maps(self.corr, "iii")
        assert isinstance(w1, ConfidenceMap)
        assert w1.variant == "sigmoid-rowcol-mean"
