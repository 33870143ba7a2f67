"""Homography warps and ground-truth assignment construction."""

import numpy as np
import pytest

from confmatch.geometry import (
    DegenerateWarpError,
    Homography,
    InvalidGroundTruthError,
    build_coarse_gt,
    build_conf_gt,
    build_correspondence_field,
    build_patch_assignment,
    warp_point,
    warp_points,
)


def random_well_conditioned(rng):
    """Identity plus a small perturbation; rejection keeps it invertible."""
    while True:
        h = np.eye(3) + rng.uniform(-0.08, 0.08, size=(3, 3))
        h[2, 2] = 1.0
        if abs(np.linalg.det(h)) > 0.5:
            return Homography(h)


class TestWarpPoint:
    def test_identity(self):
        p = warp_point(Homography.identity(), (3.0, 4.0))
        np.testing.assert_allclose(p, [3.0, 4.0])

    def test_translation(self):
        p = warp_point(Homography.translation(2.0, 0.0), (1.0, 1.0))
        np.testing.assert_allclose(p, [3.0, 1.0])

    def test_scaling_matches_direct_formula(self):
        h = Homography(np.diag([2.0, 2.0, 1.0]))
        x, y = 1.5, 2.5
        expected = ((2.0 * x) / 1.0, (2.0 * y) / 1.0)
        np.testing.assert_allclose(warp_point(h, (x, y)), expected)

    def test_degenerate_denominator(self):
        h = Homography(np.array([[1.0, 0, 0], [0, 1.0, 0], [1.0, 0, 1.0]]))
        with pytest.raises(DegenerateWarpError):
            warp_point(h, (-1.0, 0.0))

    def test_inverse_roundtrip(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            h = random_well_conditioned(rng)
            p = rng.uniform(0, 10, size=2)
            back = warp_point(h.inverse(), warp_point(h, p))
            np.testing.assert_allclose(back, p, atol=1e-9)

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(4)
        h = random_well_conditioned(rng)
        pts = rng.uniform(0, 8, size=(20, 2))
        batch = warp_points(h, pts)
        for k in range(20):
            np.testing.assert_allclose(batch[k], warp_point(h, pts[k]), atol=1e-12)


class TestHomography:
    def test_normalized_h22(self):
        h = Homography(2.0 * np.eye(3))
        assert h.h[2, 2] == 1.0
        np.testing.assert_allclose(h.h, np.eye(3))

    def test_flat_roundtrip(self):
        rng = np.random.default_rng(5)
        h = random_well_conditioned(rng)
        again = Homography.from_flat(h.to_flat())
        np.testing.assert_array_equal(again.h, h.h)

    def test_singular_rejected(self):
        with pytest.raises(DegenerateWarpError):
            Homography(np.array([[1.0, 0, 0], [2.0, 0, 0], [0, 0, 1.0]]))

    def test_rescaled_consistency(self):
        # warping in pixel units then dividing by the scale must equal
        # warping the divided point with the rescaled map
        rng = np.random.default_rng(6)
        h = random_well_conditioned(rng)
        g = rng.uniform(0, 4, size=2)
        lhs = warp_point(h, 8.0 * g) / 8.0
        rhs = warp_point(h.rescaled(8.0), g)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


class TestCorrespondenceField:
    def test_identity_all_valid(self):
        f = build_correspondence_field(Homography.identity(), 4, 4)
        assert f.valid.all()
        cols, rows = np.meshgrid(np.arange(4), np.arange(4))
        np.testing.assert_allclose(f.target[..., 0], cols + 0.5)
        np.testing.assert_allclose(f.target[..., 1], rows + 0.5)

    def test_full_width_translation_all_invalid(self):
        f = build_correspondence_field(Homography.translation(4.0, 0.0), 4, 4)
        assert not f.valid.any()
        assert np.isnan(f.target[~f.valid]).all()

    def test_one_cell_translation_count(self):
        # oracle: enumerate the warped centers by hand
        h = Homography.translation(1.0, 0.0)
        expected_valid = sum(
            1 for r in range(4) for c in range(4) if (c + 1.5) < 4.0
        )
        f = build_correspondence_field(h, 4, 4)
        assert f.valid.sum() == expected_valid == 12

    def test_bad_dims(self):
        with pytest.raises(ValueError):
            build_correspondence_field(Homography.identity(), 0, 4)


def brute_force_gt(h, width, height):
    """Independent oracle: warp + round, one-to-one by lowest source index."""
    n = width * height
    pc = np.zeros((n, n), dtype=np.uint8)
    taken = set()
    for r in range(height):
        for c in range(width):
            x, y = warp_point(h, (c + 0.5, r + 0.5))
            if not (0 <= x < width and 0 <= y < height):
                continue
            j = int(np.floor(y)) * width + int(np.floor(x))
            if j in taken:
                continue
            taken.add(j)
            pc[r * width + c, j] = 1
    return pc


class TestCoarseGt:
    def test_identity_2x2(self):
        f = build_correspondence_field(Homography.identity(), 2, 2)
        np.testing.assert_array_equal(build_coarse_gt(f), np.eye(4, dtype=np.uint8))

    def test_all_invalid_gives_zeros(self):
        f = build_correspondence_field(Homography.translation(10.0, 0.0), 2, 2)
        assert build_coarse_gt(f).sum() == 0

    def test_one_cell_translation_2x2(self):
        h = Homography.translation(1.0, 0.0)
        f = build_correspondence_field(h, 2, 2)
        got = build_coarse_gt(f)
        np.testing.assert_array_equal(got, brute_force_gt(h, 2, 2))
        assert got.sum() == 2
        assert got[0, 1] == 1 and got[2, 3] == 1

    def test_matches_brute_force_on_random_warps(self):
        rng = np.random.default_rng(11)
        for _ in range(40):
            w = int(rng.integers(1, 9))
            hgt = int(rng.integers(1, 9))
            h = random_well_conditioned(rng)
            f = build_correspondence_field(h, w, hgt)
            np.testing.assert_array_equal(build_coarse_gt(f), brute_force_gt(h, w, hgt))

    def test_one_to_one_always(self):
        rng = np.random.default_rng(12)
        for _ in range(60):
            w = int(rng.integers(1, 9))
            hgt = int(rng.integers(1, 9))
            pc = build_coarse_gt(
                build_correspondence_field(random_well_conditioned(rng), w, hgt)
            )
            assert pc.sum(axis=0).max(initial=0) <= 1
            assert pc.sum(axis=1).max(initial=0) <= 1


class TestConfGt:
    def test_single_match(self):
        t1, t2 = build_conf_gt(np.array([[1, 0], [0, 0]]))
        np.testing.assert_array_equal(t1, [1, 0])
        np.testing.assert_array_equal(t2, [1, 0])

    def test_identity(self):
        t1, t2 = build_conf_gt(np.eye(4, dtype=int))
        assert t1.sum() == 4 and t2.sum() == 4

    def test_3x3_case(self):
        pc = np.zeros((3, 3), dtype=int)
        pc[0, 1] = 1
        pc[2, 0] = 1
        t1, t2 = build_conf_gt(pc)
        np.testing.assert_array_equal(t1, [1, 0, 1])
        np.testing.assert_array_equal(t2, [1, 1, 0])

    def test_exactly_binary_for_random_gt(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            pc = build_coarse_gt(
                build_correspondence_field(random_well_conditioned(rng), 6, 6)
            )
            t1, t2 = build_conf_gt(pc)
            assert np.isin(t1, (0.0, 1.0)).all()
            assert np.isin(t2, (0.0, 1.0)).all()

    def test_many_to_one_rejected(self):
        with pytest.raises(InvalidGroundTruthError):
            build_conf_gt(np.array([[1, 0], [1, 0]]))


class TestPatchAssignment:
    def test_identity_same_origin_is_diagonal(self):
        pf = build_patch_assignment(Homography.identity(), (0, 0), (0, 0), 2)
        np.testing.assert_array_equal(pf, np.eye(4, dtype=np.uint8))

    def test_shifted_origin_compensates(self):
        # patch2 starts one cell right of patch1 under a one-cell translation
        pf = build_patch_assignment(Homography.translation(1.0, 0.0), (0, 0), (0, 1), 3)
        np.testing.assert_array_equal(pf, np.eye(9, dtype=np.uint8))

    def test_out_of_window_targets_dropped(self):
        pf = build_patch_assignment(Homography.translation(50.0, 0.0), (0, 0), (0, 0), 3)
        assert pf.sum() == 0
