import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fisheye_bev import camera
from fisheye_bev.camera import (CameraExtrinsics, FisheyeCamera, FisheyeIntrinsics, PixelCoord,
                                camera_to_world, format_calibration, incidence_angle, invert_radius,
                                look_rotation, parse_calibration, project_point, project_points,
                                unproject_pixel, unproject_pixels)
from fisheye_bev.errors import ConvergenceError, DomainError, FormatError, OutOfFovError

from conftest import random_intrinsics
from fisheye_bev.synth import desk_intrinsics

DESK = desk_intrinsics()

UNIT = FisheyeIntrinsics(focal=1.0, principal_point=(0.0, 0.0), distortion=(0, 0, 0, 0),
                         image_size=(4, 4))


def test_incidence_angle_examples():
    assert incidence_angle((0, 0, 5)) == 0.0
    assert incidence_angle((1, 0, 1)) == pytest.approx(0.7853981634, abs=1e-10)
    assert incidence_angle((3, 4, 5)) == pytest.approx(math.pi / 4, abs=1e-15)


def test_incidence_angle_behind_sensor():
    assert incidence_angle((1, 0, -0.1)) > math.pi / 2
    with pytest.raises(DomainError):
        incidence_angle((0, 0, 0))


def test_project_on_axis_hits_principal_point():
    intr = FisheyeIntrinsics(300.0, (512, 432), image_size=(1024, 864))
    assert project_point((0, 0, 5), intr) == PixelCoord(512.0, 432.0)


def test_project_equidistant():
    p = project_point((1, 0, 1), UNIT)
    assert p.u == pytest.approx(0.7853981634, abs=1e-10)
    assert p.v == 0.0


def test_project_first_distortion_term():
    intr = FisheyeIntrinsics(1.0, (0, 0), distortion=(0.1, 0, 0, 0), image_size=(4, 4))
    p = project_point((1, 0, 1), intr)
    # pi/4 + 0.1 (pi/4)^3 evaluated separately with plain floats
    assert abs(p.u - 0.8338454707104167) < 1e-9
    assert p.v == 0.0


def test_project_rejects_out_of_fov_and_origin(desk):
    with pytest.raises(OutOfFovError):
        project_point((0.2, 0, -1), desk)
    with pytest.raises(DomainError):
        project_point((0, 0, 0), desk)


def test_unproject_examples():
    np.testing.assert_allclose(unproject_pixel(PixelCoord(0, 0), UNIT), [0, 0, 1], atol=0)
    s = math.sqrt(0.5)
    np.testing.assert_allclose(unproject_pixel((math.pi / 4, 0), UNIT), [s, 0, s], atol=1e-12)


def test_unproject_out_of_fov(desk):
    with pytest.raises(OutOfFovError):
        unproject_pixel((desk.principal_point[0] + desk.radius_max + 1e-6, desk.principal_point[1]), desk)


def test_round_trip_random_pixels(desk, rng):
    r = 0.99 * desk.radius_max * np.sqrt(rng.uniform(0, 1, 10_000))
    a = rng.uniform(-math.pi, math.pi, 10_000)
    uv = np.array(desk.principal_point) + np.stack([r * np.cos(a), r * np.sin(a)], axis=1)
    dirs, valid = unproject_pixels(uv, desk)
    assert valid.all()
    np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-12)
    back, ok = project_points(dirs, desk)
    assert ok.all()
    assert np.max(np.linalg.norm(back - uv, axis=1)) < 1e-6


def test_unproject_z_is_cos_theta(desk):
    d = unproject_pixel((desk.principal_point[0] + 20, desk.principal_point[1] - 7), desk)
    theta = invert_radius(math.hypot(20, 7), desk)
    assert d[2] == pytest.approx(math.cos(theta), abs=1e-15)


def test_bisection_fallback_matches_newton(desk, monkeypatch, rng):
    r = rng.uniform(0, desk.radius_max, 200)
    newton = invert_radius(r, desk)
    monkeypatch.setattr(camera, "NEWTON_MAX_ITER", 0)
    bisected = invert_radius(r, desk)
    np.testing.assert_allclose(bisected, newton, atol=1e-11)


def test_newton_leaving_bracket_falls_back():
    # r'(theta) nearly vanishes near theta = 1, so Newton from r/f overshoots
    intr = FisheyeIntrinsics(1.0, (0, 0), distortion=(-1 / 3 + 1e-4, 0, 0, 0), image_size=(4, 4),
                             theta_max=1.0)
    r = np.linspace(0, intr.radius_max, 101)
    theta = invert_radius(r, intr)
    np.testing.assert_allclose(intr.radius(theta), r, atol=1e-10)


def test_non_convergence_raises(desk, monkeypatch):
    monkeypatch.setattr(camera, "NEWTON_MAX_ITER", 0)
    monkeypatch.setattr(camera, "BISECT_MAX_ITER", 3)
    with pytest.raises(ConvergenceError):
        invert_radius(np.array([10.0]), desk)


def test_camera_to_world_examples():
    ident = CameraExtrinsics()
    np.testing.assert_array_equal(camera_to_world((1, 2, 3), ident), [1, 2, 3])
    shifted = CameraExtrinsics(np.eye(3), (1, 2, 0))
    np.testing.assert_array_equal(camera_to_world((0, 0, 5), shifted), [1, 2, 5])
    yaw = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    ext = CameraExtrinsics(yaw, (0, 0, 0))
    np.testing.assert_allclose(camera_to_world((0, 0, 5), ext), [0, 0, 5])
    np.testing.assert_allclose(camera_to_world((1, 2, 3), ext), [-2, 1, 3])


def test_intrinsics_validation():
    with pytest.raises(DomainError):
        FisheyeIntrinsics(1.0, (0, 0), distortion=(-1.0, 0, 0, 0), image_size=(4, 4))
    with pytest.raises(DomainError):
        FisheyeIntrinsics(-1.0, (0, 0))
    with pytest.raises(DomainError):
        FisheyeIntrinsics(1.0, (0, 0), image_size=(0, 4))
    with pytest.raises(DomainError):
        FisheyeIntrinsics(1.0, (0, 0), theta_max=4.0)


def test_extrinsics_validation():
    with pytest.raises(DomainError):
        CameraExtrinsics(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(DomainError):
        CameraExtrinsics(np.eye(3) * 1.001, np.zeros(3))


def test_look_rotation_is_proper():
    R = look_rotation(0.3, math.radians(20))
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-15)
    assert np.linalg.det(R) == pytest.approx(1.0)
    # optical axis points forward and down
    assert R[0, 2] > 0 and R[2, 2] < 0


directions = st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.05, 1)).filter(
    lambda p: math.hypot(*p) > 1e-3)


@settings(max_examples=200, deadline=None)
@given(p=directions, lam=st.floats(1e-3, 1e3))
def test_projection_scale_invariance(p, lam):
    desk = DESK
    a = project_point(p, desk)
    b = project_point(tuple(lam * c for c in p), desk)
    assert b.u == pytest.approx(a.u, abs=1e-9) and b.v == pytest.approx(a.v, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(p=directions)
def test_azimuth_preserved(p):
    desk = DESK
    q = project_point(p, desk)
    du, dv = q.u - desk.principal_point[0], q.v - desk.principal_point[1]
    assert du * p[1] - dv * p[0] == pytest.approx(0.0, abs=1e-9)
    assert du * p[0] + dv * p[1] >= 0


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_random_calibrations_monotone(seed):
    intr = random_intrinsics(np.random.default_rng(seed))
    theta = np.linspace(0, intr.theta_max, 1024)
    assert np.all(np.diff(intr.radius(theta)) > 0)


@settings(max_examples=100, deadline=None)
@given(yaw=st.floats(-math.pi, math.pi), pitch=st.floats(-1.5, 1.5),
       a=st.tuples(*[st.floats(-50, 50)] * 3), b=st.tuples(*[st.floats(-50, 50)] * 3),
       t=st.tuples(*[st.floats(-10, 10)] * 3))
def test_camera_to_world_preserves_distance(yaw, pitch, a, b, t):
    ext = CameraExtrinsics(look_rotation(yaw, pitch), t)
    d0 = np.linalg.norm(np.subtract(a, b))
    d1 = np.linalg.norm(camera_to_world(a, ext) - camera_to_world(b, ext))
    assert abs(d1 - d0) < 1e-9


CALIB = """
[front]
image_width = 128
image_height = 108
focal = 36.0
principal_point = 64, 54
distortion = -1.2, 0.25, 0, 0
theta_max_deg = 95
rotation = 1, 0, 0, 0, 1, 0, 0, 0, 1
translation = 2.3, 0, 0.8
"""


def test_calibration_round_trip():
    cams = parse_calibration(CALIB)
    assert len(cams) == 1 and cams[0].name == "front"
    again = parse_calibration(format_calibration(cams))
    assert again[0].intrinsics == cams[0].intrinsics
    np.testing.assert_array_equal(again[0].extrinsics.rotation, cams[0].extrinsics.rotation)


@pytest.mark.parametrize("edit, error", [
    (lambda s: s + "colour = red\n", FormatError),
    (lambda s: s.replace("focal = 36.0\n", ""), FormatError),
    (lambda s: s.replace("64, 54", "64"), FormatError),
    (lambda s: s.replace("1, 0, 0, 0, 1, 0, 0, 0, 1", "2, 0, 0, 0, 1, 0, 0, 0, 1"), DomainError),
    (lambda s: s.replace("-1.2, 0.25", "-20, 0.25"), DomainError),
    (lambda s: "", FormatError),
])
def test_calibration_rejections(edit, error):
    with pytest.raises(error):
        parse_calibration(edit(CALIB))
