"""Chamfer distance, F1 score and PSNR."""
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hashsdf.geometry import InvalidInput
from hashsdf.metrics import PSNR_IDENTICAL, chamfer, f1_score, nearest_distances, \
    nearest_distances_brute, psnr


def cloud(n, seed):
    return np.random.default_rng(seed).normal(size=(n, 3))


class TestChamfer:
    """Symmetric mean nearest-neighbour distance."""

    def test_identical(self):
        a = cloud(50, 0)
        assert chamfer(a, a) == 0

    def test_singletons(self):
        assert chamfer([[0, 0, 0]], [[1, 0, 0]]) == 1

    def test_hand_example(self):
        assert chamfer([[0, 0, 0], [2, 0, 0]], [[1, 0, 0]]) == 1

    def test_empty_rejected(self):
        with pytest.raises(InvalidInput):
            chamfer(np.zeros((0, 3)), cloud(3, 0))

    def test_symmetric(self):
        a, b = cloud(300, 1), cloud(200, 2)
        assert chamfer(a, b) == chamfer(b, a)

    def test_index_equals_brute_force(self):
        a, b = cloud(1000, 3), cloud(1000, 4)
        assert np.array_equal(nearest_distances(a, b), nearest_distances_brute(a, b))
        assert chamfer(a, b) == chamfer(a, b, brute=True)

    @given(seed=st.integers(0, 10_000), na=st.integers(1, 60), nb=st.integers(1, 60))
    def test_index_equals_brute_force_property(self, seed, na, nb):
        a, b = cloud(na, seed), cloud(nb, seed + 1)
        assert chamfer(a, b) == chamfer(a, b, brute=True)
        assert chamfer(a, b) == chamfer(b, a)


class TestF1:
    """Precision / recall at a distance threshold."""

    def test_identical(self):
        a = cloud(20, 0)
        assert f1_score(a, a, 1e-3) == (1.0, 1.0, 1.0)

    def test_disjoint(self):
        assert f1_score([[0, 0, 0]], [[10, 0, 0]], 1.0) == (0.0, 0.0, 0.0)

    def test_hand_example(self):
        p, r, f = f1_score([[0, 0, 0], [5, 0, 0]], [[0, 0, 0]], 1.0)
        assert (p, r) == (0.5, 1.0)
        assert f == pytest.approx(2 / 3)

    def test_tau_positive(self):
        with pytest.raises(InvalidInput):
            f1_score(cloud(3, 0), cloud(3, 1), 0.0)

    def test_empty_rejected(self):
        with pytest.raises(InvalidInput):
            f1_score(cloud(3, 0), np.zeros((0, 3)), 1.0)

    @given(seed=st.integers(0, 10_000))
    def test_monotone_in_tau(self, seed):
        a, b = cloud(40, seed), cloud(30, seed + 7)
        scores = [f1_score(a, b, tau)[2] for tau in (0.05, 0.1, 0.3, 0.6, 1.2)]
        assert all(x <= y for x, y in zip(scores, scores[1:]))


class TestPsnr:
    """Peak signal-to-noise ratio with optional mask."""

    def test_identical_sentinel(self):
        img = np.random.default_rng(0).random((8, 8, 3))
        assert psnr(img, img) == PSNR_IDENTICAL == float("inf")

    def test_uniform_difference(self):
        a = np.full((4, 4, 3), 0.5)
        assert psnr(a, a + 0.1) == pytest.approx(20.0)

    def test_full_mask_matches_unmasked(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((6, 6, 3)), rng.random((6, 6, 3))
        assert psnr(a, b, np.ones((6, 6), bool)) == psnr(a, b)

    def test_mask_selects_pixels(self):
        a = np.zeros((2, 2, 3))
        b = a.copy()
        b[0, 0] = 1.0
        mask = np.array([[False, True], [True, True]])
        assert psnr(a, b, mask) == PSNR_IDENTICAL

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInput):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

    def test_decreases_with_noise(self):
        rng = np.random.default_rng(2)
        img = rng.random((32, 32, 3)) * 0.5 + 0.25
        noise = rng.normal(size=img.shape)
        vals = [psnr(img, img + amp * noise) for amp in (0.01, 0.05, 0.1)]
        assert vals[0] > vals[1] > vals[2]
