import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from persfit.camera import (
    CameraModel,
    CameraParams,
    denormalize,
    distort,
    fold_radius,
    focal_from_vfov,
    max_distorted_radius,
    normalize,
    undistort,
    undistort_points,
    undistort_radius,
    vfov,
)
from persfit.errors import DomainError, NonInvertible


def radial(k1, k2=0.0, f=160.0, size=(320, 320)):
    model = CameraModel.RADIAL2 if k2 else CameraModel.RADIAL1
    return CameraParams(size[0], size[1], f, k1=k1, k2=k2, model=model)


class TestCameraParams:
    def test_principal_point_defaults_to_center(self):
        cam = CameraParams(640, 480, 500.0)
        assert (cam.cx, cam.cy) == (320.0, 240.0)

    @pytest.mark.parametrize("f", [0.0, -1.0, math.inf, math.nan])
    def test_rejects_bad_focal(self, f):
        with pytest.raises(ValueError):
            CameraParams(10, 10, f)

    def test_rejects_bad_size(self):
        with pytest.raises(ValueError):
            CameraParams(0, 10, 1.0)

    def test_unused_coefficients_must_be_zero(self):
        with pytest.raises(ValueError):
            CameraParams(10, 10, 1.0, k1=0.1)
        with pytest.raises(ValueError):
            CameraParams(10, 10, 1.0, k1=0.1, k2=0.1, model="radial1")
        CameraParams(10, 10, 1.0, k1=0.1, k2=0.1, model="radial2")


class TestNormalize:
    def test_principal_point_is_origin(self):
        cam = CameraParams(320, 320, 160.0)
        np.testing.assert_array_equal(normalize(cam, (160, 160)), (0.0, 0.0))

    def test_one_focal_right(self):
        cam = CameraParams(320, 320, 160.0)
        np.testing.assert_array_equal(normalize(cam, (320, 160)), (1.0, 0.0))

    def test_corner(self):
        cam = CameraParams(320, 320, 224.0)
        np.testing.assert_allclose(normalize(cam, (0, 0)), (-160 / 224, -160 / 224), rtol=0, atol=1e-15)

    @given(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4), st.floats(1.0, 5e3))
    def test_denormalize_inverts(self, x, y, f):
        cam = CameraParams(640, 480, f)
        p = np.array([x, y])
        np.testing.assert_allclose(denormalize(cam, normalize(cam, p)), p, rtol=0, atol=1e-9)


class TestDistort:
    def test_identity_without_coefficients(self):
        q = np.array([0.3, -0.7])
        np.testing.assert_array_equal(distort(CameraParams(10, 10, 1.0), q), q)

    def test_k1(self):
        np.testing.assert_allclose(distort(radial(0.1), (1.0, 0.0)), (1.1, 0.0), rtol=0, atol=1e-15)

    def test_k1_k2(self):
        # d = 1 - 0.2 * 1 + 0.05 * 1 = 0.85
        np.testing.assert_allclose(distort(radial(-0.2, 0.05), (0.6, 0.8)), (0.51, 0.68), rtol=0, atol=1e-15)


class TestUndistort:
    def test_identity_without_coefficients(self):
        q = np.array([0.3, -0.4])
        np.testing.assert_array_equal(undistort(CameraParams(10, 10, 1.0), q), q)

    def test_k1_round_trip(self):
        np.testing.assert_allclose(undistort(radial(0.1), (1.1, 0.0)), (1.0, 0.0), rtol=0, atol=1e-10)

    def test_beyond_fold_is_non_invertible(self):
        # r * (1 - 0.3 r^2) peaks at r = 1/sqrt(0.9); scan for the maximum independently
        r = np.linspace(0.0, 3.0, 300001)
        peak = np.max(r * (1 - 0.3 * r * r))
        assert fold_radius(-0.3, 0.0) == pytest.approx(1 / math.sqrt(0.9), rel=1e-12)
        assert max_distorted_radius(-0.3, 0.0) == pytest.approx(peak, rel=1e-9)
        with pytest.raises(NonInvertible):
            undistort(radial(-0.3), (peak * 1.01, 0.0))
        undistort(radial(-0.3), (peak * 0.99, 0.0))

    @given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5).filter(lambda v: v == 0 or abs(v) > 1e-6))
    def test_fold_radius_is_first_turning_point(self, k1, k2):
        r = fold_radius(k1, k2)
        slope = lambda x: 1 + 3 * k1 * x * x + 5 * k2 * x**4
        if math.isinf(r):
            xs = np.linspace(0.0, 1e3, 100_001)
            assert np.all(slope(xs) > 0)
        else:
            scale = 1 + abs(3 * k1 * r * r) + abs(5 * k2 * r**4)
            assert abs(slope(r)) <= 1e-9 * scale
            assert np.all(slope(np.linspace(0.0, r, 1001)[:-1]) > 0)

    def test_fold_radius_subnormal_k2(self):
        assert fold_radius(0.0, 2.2250738585e-313) == math.inf
        assert fold_radius(0.0, -2.2250738585e-313) == pytest.approx((5 * 2.2250738585e-313) ** -0.25, rel=1e-12)

    def test_invalid_points_are_nan(self):
        q, valid = undistort_points(-0.3, 0.0, np.array([[0.1, 0.0], [5.0, 0.0]]))
        assert valid.tolist() == [True, False]
        assert np.isnan(q[1]).all()

    def test_extension_clamps_to_fold(self):
        q, valid = undistort_points(-0.3, 0.0, np.array([[0.0, 5.0]]), extend=True)
        assert not valid[0]
        np.testing.assert_allclose(q[0], (0.0, fold_radius(-0.3, 0.0)), rtol=1e-15)

    def test_converged_newton_step_is_kept(self):
        # regression: a converged iterate just past the bracket used to fall back to bisection
        k1, k2 = -0.040717526784785914 + 1e-6, 0.04427131396948297
        rd = np.array([6.441864495372064])
        r, valid = undistort_radius(rd, k1, k2)
        assert valid[0]
        assert r[0] * (1 + k1 * r[0] ** 2 + k2 * r[0] ** 4) == pytest.approx(rd[0], rel=1e-14)

    @given(
        st.floats(-0.3, 0.3),
        st.floats(-0.05, 0.05),
        st.floats(0.0, 2.0 * math.pi),
        st.floats(0.0, 1.0),
    )
    def test_round_trip_inside_valid_radius(self, k1, k2, angle, frac):
        rd_max = min(max_distorted_radius(k1, k2), 3.0)
        rd = 0.999 * frac * rd_max
        qd = rd * np.array([math.cos(angle), math.sin(angle)])
        q, valid = undistort_points(k1, k2, qd[None])
        assert valid[0]
        s = q[0] @ q[0]
        np.testing.assert_allclose((1 + k1 * s + k2 * s * s) * q[0], qd, rtol=0, atol=1e-10)

    @given(st.floats(-0.3, 0.3), st.integers(0, 2**32 - 1))
    def test_pixel_round_trip(self, k1, seed):
        cam = radial(k1, f=224.0)
        rng = np.random.default_rng(seed)
        p = rng.uniform(0, 320, size=(50, 2))
        q = normalize(cam, p)
        ok = np.linalg.norm(q, axis=1) < 0.99 * fold_radius(k1, 0.0)
        back = denormalize(cam, undistort(cam, distort(cam, q[ok])))
        np.testing.assert_allclose(back, p[ok], rtol=0, atol=1e-6)


class TestVfov:
    def test_ninety_degrees(self):
        assert focal_from_vfov(math.pi / 2, 320) == pytest.approx(160.0, rel=1e-15)
        assert vfov(CameraParams(320, 320, 160.0)) == pytest.approx(math.pi / 2, rel=1e-15)

    def test_twenty_degrees(self):
        assert focal_from_vfov(math.radians(20), 320) == pytest.approx(160 / math.tan(math.radians(10)), rel=1e-14)

    @pytest.mark.parametrize("fov", [0.0, math.pi, -0.1, 4.0])
    def test_domain(self, fov):
        with pytest.raises(DomainError):
            focal_from_vfov(fov, 100)

    @given(st.floats(1e-3, math.pi - 1e-3), st.integers(1, 10000))
    def test_inverse_pair(self, fov, height):
        f = focal_from_vfov(fov, height)
        assert vfov(CameraParams(height, height, f)) == pytest.approx(fov, rel=1e-12)
