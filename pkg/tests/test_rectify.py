import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from curvistereo.core import DegenerateError
from curvistereo.rectify import (
    Correspondence,
    Keypoint,
    RansacConfig,
    aligned_displacements,
    derotate,
    detect_keypoints,
    estimate_tilt_angle,
    estimate_translation,
    match_keypoints,
    rectify_pair,
    warp,
)
from curvistereo.synth import make_misaligned_pair


def corr(p, q, sim=1.0):
    return Correspondence(Keypoint(float(p[0]), float(p[1]), 1.0), Keypoint(float(q[0]), float(q[1]), 1.0), sim)


def model_correspondences(rng, n, theta_deg, t, disparities):
    """Endpoints obeying q = p + d (cos theta, sin theta) + t."""
    th = math.radians(theta_deg)
    p = rng.uniform(20, 140, (n, 2))
    q = p + np.outer(disparities, [math.cos(th), math.sin(th)]) + np.asarray(t)
    return [corr(a, b) for a, b in zip(p, q)]


def textured(rng, shape=(64, 64), sigma=1.5):
    return ndimage.gaussian_filter(rng.random(shape), sigma)


class TestDetectKeypoints:
    def test_constant_image(self):
        assert detect_keypoints(np.full((32, 32), 0.4)) == []

    def test_plus_sign(self):
        img = np.zeros((64, 64))
        img[32, 28:37] = 1.0
        img[28:37, 32] = 1.0
        k = detect_keypoints(img)[0]
        assert math.hypot(k.x - 32, k.y - 32) <= 1.0

    def test_deterministic_and_sorted(self):
        img = textured(np.random.default_rng(0))
        a, b = detect_keypoints(img, 50), detect_keypoints(img, 50)
        assert a == b
        assert len(a) <= 50
        assert all(x.score >= y.score for x, y in zip(a, a[1:]))

    def test_too_small(self):
        with pytest.raises(ValueError):
            detect_keypoints(np.zeros((8, 32)))


class TestMatchKeypoints:
    def test_self_match(self):
        img = textured(np.random.default_rng(1))
        kps = detect_keypoints(img, 100)
        cs = match_keypoints(img, img, kps, kps, refine=False)
        assert len(cs) > 0
        for c in cs:
            assert c.similarity == pytest.approx(1.0, abs=1e-9)
            np.testing.assert_allclose(c.displacement, 0.0, atol=0.5)

    def test_horizontal_shift(self):
        rng = np.random.default_rng(2)
        big = textured(rng, (64, 80))
        left, right = big[:, 7:71], big[:, :64]  # right(x) = left(x - 7)
        cs = match_keypoints(left, right, detect_keypoints(left, 200), detect_keypoints(right, 200))
        assert len(cs) >= 10
        for c in cs:
            np.testing.assert_allclose(c.displacement, [-7.0, 0.0], atol=0.5)

    def test_unrelated_noise(self):
        rng = np.random.default_rng(3)
        a, b = rng.random((96, 96)), rng.random((96, 96))
        ka, kb = detect_keypoints(a, 300), detect_keypoints(b, 300)
        cs = match_keypoints(a, b, ka, kb, refine=False)
        assert len(cs) < 0.1 * len(ka)

    def test_patch_validation(self):
        img = np.zeros((32, 32))
        with pytest.raises(ValueError):
            match_keypoints(img, img, [], [], patch=4)
        with pytest.raises(ValueError):
            match_keypoints(img, img, [], [], patch=3)


class TestEstimateTranslation:
    def test_exact_model(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(0, 100, (20, 2))
        cs = [corr(a, a + [5.0, -3.0]) for a in p]
        t, inl = estimate_translation(cs)
        assert t == pytest.approx((5.0, -3.0), abs=1e-9)
        assert inl == list(range(20))

    def test_with_outliers(self):
        rng = np.random.default_rng(1)
        cs = []
        for i in range(100):
            p = rng.uniform(0, 100, 2)
            if i % 10 < 7:
                cs.append(corr(p, p + [5.0, -3.0]))
            else:
                cs.append(corr(p, rng.uniform(0, 100, 2)))
        t, inl = estimate_translation(cs, RansacConfig(seed=7))
        assert math.hypot(t[0] - 5.0, t[1] + 3.0) < 0.5
        assert {i for i in range(100) if i % 10 < 7} <= set(inl)

    def test_too_few(self):
        cs = [corr((0, 0), (1, 1))] * 3
        with pytest.raises(DegenerateError, match="degenerate correspondences"):
            estimate_translation(cs, RansacConfig(min_inliers=10))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RansacConfig(iterations=0)
        with pytest.raises(ValueError):
            RansacConfig(inlier_threshold=0.0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_order_invariant(self, seed):
        rng = np.random.default_rng(seed)
        d = rng.uniform(2, 30, 40)
        d[:25] = 0.0
        cs = model_correspondences(rng, 40, 1.0, (3.0, -2.0), d)
        cs += [corr(rng.uniform(0, 100, 2), rng.uniform(0, 100, 2)) for _ in range(10)]
        perm = rng.permutation(len(cs))
        t1, i1 = estimate_translation(cs)
        t2, i2 = estimate_translation([cs[i] for i in perm])
        assert t1 == t2
        assert sorted(perm[i2]) == i1

    @settings(max_examples=40, deadline=None)
    @given(
        st.floats(-2.0, 2.0),
        st.floats(-20.0, 20.0),
        st.floats(-20.0, 20.0),
        st.integers(0, 2**31 - 1),
    )
    def test_noise_free_recovery(self, theta, tx, ty, seed):
        # a majority at the disparity origin pins the global offset
        rng = np.random.default_rng(seed)
        d = np.concatenate([np.zeros(30), rng.uniform(2, 30, 20)])
        cs = model_correspondences(rng, 50, theta, (tx, ty), d)
        t, inl = estimate_translation(cs)
        assert len(inl) == 50
        assert t[0] == pytest.approx(tx, abs=1e-6)
        assert t[1] == pytest.approx(ty, abs=1e-6)
        assert estimate_tilt_angle([cs[i] for i in inl], t) == pytest.approx(theta, abs=1e-6)


class TestEstimateTiltAngle:
    def test_horizontal(self):
        cs = [corr((10, 10 + i), (10 + 3 + i, 10 + i)) for i in range(10)]
        assert estimate_tilt_angle(cs) == pytest.approx(0.0, abs=1e-12)

    def test_two_degrees(self):
        rng = np.random.default_rng(0)
        cs = model_correspondences(rng, 30, 2.0, (0, 0), rng.uniform(3, 20, 30))
        assert estimate_tilt_angle(cs) == pytest.approx(2.0, abs=0.1)

    def test_signed_disparities_fold(self):
        rng = np.random.default_rng(1)
        d = rng.uniform(3, 20, 30) * rng.choice([-1, 1], 30)
        cs = model_correspondences(rng, 30, -1.0, (0, 0), d)
        assert estimate_tilt_angle(cs) == pytest.approx(-1.0, abs=1e-9)

    def test_noisy(self):
        rng = np.random.default_rng(2)
        th = math.radians(-1.5)
        p = rng.uniform(0, 100, (200, 2))
        d = rng.uniform(3, 20, 200)
        q = p + np.outer(d, [math.cos(th), math.sin(th)]) + rng.normal(0, 0.2, (200, 2))
        cs = [corr(a, b) for a, b in zip(p, q)]
        assert estimate_tilt_angle(cs) == pytest.approx(-1.5, abs=0.2)

    def test_no_measurable_displacement(self):
        cs = [corr((i, i), (i + 0.1, i)) for i in range(10)]
        with pytest.raises(DegenerateError, match="no measurable tilt"):
            estimate_tilt_angle(cs)


class TestWarp:
    def test_identity_bit_exact(self):
        img = np.random.default_rng(0).random((17, 23))
        assert np.array_equal(derotate(img, 0.0), img)

    def test_quarter_turn_2x2(self):
        img = np.array([[0.1, 0.2], [0.3, 0.4]])
        # out(p) = img(c + R(90)(p - c)): out[y, x] = img[x, 1 - y] about c = (0.5, 0.5)
        np.testing.assert_array_equal(derotate(img, 90.0), [[0.2, 0.4], [0.1, 0.3]])
        np.testing.assert_array_equal(derotate(derotate(img, 90.0), -90.0), img)

    def test_round_trip(self):
        rng = np.random.default_rng(1)
        img = textured(rng, (64, 64), 2.5)
        back = derotate(derotate(img, 7.0), -7.0)
        inner = (slice(12, -12), slice(12, -12))
        assert np.abs(back - img)[inner].max() < 0.02

    def test_fill_is_median(self):
        img = np.random.default_rng(2).random((20, 20))
        out = warp(img, 0.0, (30.0, 0.0))
        assert np.all(out == np.float64(np.median(img)))

    def test_integer_translation(self):
        img = np.random.default_rng(3).random((20, 20))
        out = warp(img, 0.0, (2.0, -1.0))
        np.testing.assert_allclose(out[1:, :-2], img[:-1, 2:], atol=1e-12)

    def test_angle_limit(self):
        with pytest.raises(ValueError):
            derotate(np.zeros((4, 4)), 50.0)


class TestAlignedDisplacements:
    @given(st.floats(-2, 2), st.floats(-20, 20), st.floats(-20, 20))
    @settings(max_examples=30, deadline=None)
    def test_horizontal_after_alignment(self, theta, tx, ty):
        rng = np.random.default_rng(0)
        cs = model_correspondences(rng, 10, theta, (tx, ty), rng.uniform(-10, 10, 10))
        disp = aligned_displacements(cs, theta, (tx, ty), (160, 160))
        np.testing.assert_allclose(disp[:, 1], 0.0, atol=1e-9)


class TestRectifyPair:
    def test_aligned_pair(self):
        pair = make_misaligned_pair(np.random.default_rng(5), 0.0, (0.0, 0.0), size=(160, 160), noise=0.005)
        _, _, geo = rectify_pair(pair.left, pair.right)
        assert math.hypot(*geo.t) < 0.5
        assert abs(geo.theta) < 0.1

    def test_known_misalignment(self):
        pair = make_misaligned_pair(np.random.default_rng(6), 2.0, (5.0, -3.0), size=(160, 160), noise=0.005)
        la, ra, geo, inl = rectify_pair(pair.left, pair.right, return_inliers=True)
        assert abs(geo.t[0] - 5.0) < 0.5 and abs(geo.t[1] + 3.0) < 0.5
        assert abs(geo.theta - 2.0) < 0.1
        assert la.shape == ra.shape == pair.left.shape
        disp = aligned_displacements(inl, geo.theta, geo.t, pair.left.shape)
        assert math.sqrt(np.mean(disp[:, 1] ** 2)) < 0.5

    def test_idempotent(self):
        pair = make_misaligned_pair(np.random.default_rng(7), -1.5, (8.0, 4.0), size=(160, 160), noise=0.005)
        la, ra, _ = rectify_pair(pair.left, pair.right)
        _, _, geo2 = rectify_pair(la, ra)
        assert math.hypot(*geo2.t) < 0.5
        assert abs(geo2.theta) < 0.1

    def test_textureless(self):
        flat = np.full((64, 64), 0.5)
        with pytest.raises(DegenerateError, match="degenerate correspondences"):
            rectify_pair(flat, flat)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            rectify_pair(np.zeros((32, 32)), np.zeros((32, 40)))
