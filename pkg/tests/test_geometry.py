import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudtomo.geometry import (Camera, Constellation, InfeasibleScanError, build_string_of_pearls,
                                meridian_frame, pixel_rays, plan_cloudbow_scan, scattering_angle,
                                sun_direction, unit, view_zenith_angle)

TARGET = (0.0, 0.0, 1130.0)
unit_vectors = st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1)).filter(
    lambda v: np.linalg.norm(v) > 1e-3).map(lambda v: unit(np.array(v)))


def test_string_of_pearls_view_angles():
    con = build_string_of_pearls(target=TARGET)
    angles = [view_zenith_angle(c, TARGET) for c in con.cameras]
    assert angles[0] == pytest.approx(39.3, abs=0.5)
    assert angles[-1] == pytest.approx(-46.0, abs=0.5)
    assert np.all(np.diff(angles) < 0)
    assert [c.satellite for c in con.cameras] == list(range(1, 11))


def test_nadir_camera_points_down():
    con = build_string_of_pearls(target=TARGET)
    axis = np.asarray(con.cameras[4].optical_axis)
    assert np.allclose(axis, [0, 0, -1], atol=1e-9, rtol=0)


def test_single_camera():
    con = build_string_of_pearls(n=1, spacing_km=1234.0, nadir_index=1)
    assert len(con.cameras) == 1
    assert np.allclose(con.cameras[0].optical_axis, [0, 0, -1], atol=1e-12)


def test_cameras_aim_at_target():
    con = build_string_of_pearls(target=TARGET)
    for cam in con.cameras:
        d = unit(np.asarray(TARGET) - np.asarray(cam.position))
        assert np.allclose(d, cam.optical_axis, atol=1e-12)


def test_constellation_invariants():
    with pytest.raises(ValueError):
        Constellation(())
    with pytest.raises(ValueError):
        Constellation((Camera((0, 0, 1), (0, 0, -1)),), sun_zenith=90.0)
    with pytest.raises(ValueError):
        Camera((0, 0, 1), (0, 0, -2))
    with pytest.raises(ValueError):
        Camera((0, 0, 1), (0, 0, -1), focal_length=0.0)


@pytest.mark.parametrize("res", [(5, 5), (9, 7)])
def test_pixel_rays_centre_and_corner(res):
    cam = Camera.looking_at((1e3, 2e3, 5e5), (0, 0, 0), resolution=res)
    rays, origin = pixel_rays(cam)
    assert rays.shape == (res[1], res[0], 3)
    assert np.array_equal(origin, np.asarray(cam.position))
    assert np.allclose(np.linalg.norm(rays, axis=-1), 1.0, atol=1e-12)
    centre = rays[res[1] // 2, res[0] // 2]
    assert np.allclose(centre, cam.optical_axis, atol=1e-12)
    # horizontal edge pixel centre sits (n-1)/2 pitches off axis
    off = np.degrees(np.arccos(np.clip(rays[res[1] // 2, 0] @ np.asarray(cam.optical_axis), -1, 1)))
    expected = np.degrees(np.arctan(cam.pixel_pitch * (res[0] - 1) / 2 / cam.focal_length))
    assert off == pytest.approx(expected, abs=1e-9)


def test_pixel_rays_deterministic():
    cam = Camera.looking_at((3e5, 0, 4e5), (0, 0, 0), resolution=(6, 6))
    assert np.array_equal(pixel_rays(cam)[0], pixel_rays(cam)[0])


def test_roll_rotates_image_axes():
    cam = Camera.looking_at((0, 0, 5e5), (0, 0, 0))
    rolled = Camera(cam.position, cam.optical_axis, roll=90.0)
    h0, w0 = cam.image_axes()
    h1, _ = rolled.image_axes()
    assert np.allclose(h1, w0, atol=1e-12) or np.allclose(h1, -w0, atol=1e-12)
    assert abs(h1 @ h0) < 1e-12


def test_meridian_examples():
    f = meridian_frame(np.array([0.0, 1.0, 0.0]))
    assert np.allclose(f.b, [-1, 0, 0]) and np.allclose(f.l, [0, 0, 1])
    up = meridian_frame(np.array([0.0, 0.0, 1.0]))
    assert np.array_equal(up.b, [-1.0, 0.0, 0.0])
    down = meridian_frame(np.array([0.0, 0.0, -1.0]))
    assert np.array_equal(down.b, [-1.0, 0.0, 0.0])


@settings(max_examples=100, deadline=None)
@given(omega=unit_vectors)
def test_meridian_orthonormal(omega):
    if np.linalg.norm(omega[:2]) < 1e-9:
        omega = np.array([0.0, 0.0, np.sign(omega[2])])   # fallback applies only on the axis
    f = meridian_frame(omega)
    assert abs(f.b @ f.l) < 1e-12 and abs(f.b @ omega) < 1e-12 and abs(f.l @ omega) < 1e-12
    assert abs(f.b[2]) < 1e-12
    assert np.allclose(np.cross(f.b, f.l), omega, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(omega=unit_vectors, phi=st.floats(-180, 180))
def test_meridian_equivariant_under_azimuth(omega, phi):
    if np.linalg.norm(omega[:2]) < 1e-6:
        return
    c, s = np.cos(np.radians(phi)), np.sin(np.radians(phi))
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    f, g = meridian_frame(omega), meridian_frame(rot @ omega)
    assert np.allclose(rot @ f.b, g.b, atol=1e-9)
    assert np.allclose(rot @ f.l, g.l, atol=1e-9)


def test_scattering_angle_examples():
    sun = sun_direction(25.0, 90.0)
    assert scattering_angle(sun, np.array([0, 0, -1.0])) == pytest.approx(155.0)
    # camera staring into the sun sees forward glare; sun behind the camera gives backscatter
    assert scattering_angle(sun, sun) == pytest.approx(0.0, abs=1e-6)
    assert scattering_angle(sun, -sun) == pytest.approx(180.0, abs=1e-6)


def test_sun_direction_convention():
    assert np.allclose(sun_direction(90.0 - 1e-12, 90.0), [0, 1, 0], atol=1e-9)
    assert np.allclose(sun_direction(0.0, 37.0), [0, 0, 1])


def test_cloudbow_scan_fig1():
    con = build_string_of_pearls(target=TARGET)
    plan = plan_cloudbow_scan(con, TARGET, (135.0, 150.0), 1.5)
    assert sorted(plan.selected) == [2, 8]
    assert len(plan.cameras) == 10
    measured = [float(scattering_angle(con.sun, c.optical_axis)) for c in plan.cameras]
    assert np.allclose(measured, plan.angles, atol=1e-9)
    assert min(measured) >= 135.0 - 0.75 and max(measured) <= 150.0 + 0.75
    gaps = np.diff(sorted(measured))
    assert np.all(gaps <= 1.5 + 1e-6)
    for cam in plan.cameras:
        d = unit(np.asarray(TARGET) - np.asarray(cam.position))
        assert np.allclose(d, cam.optical_axis, atol=1e-12)
        assert abs(np.linalg.norm(cam.optical_axis) - 1) < 1e-12


def test_cloudbow_single_angle():
    con = build_string_of_pearls(target=TARGET)
    nominal = float(scattering_angle(con.sun, con.cameras[1].optical_axis))
    plan = plan_cloudbow_scan(con, TARGET, (nominal, nominal), 1.5)
    assert len(plan.cameras) == 1
    assert plan.angles[0] == pytest.approx(nominal, abs=1e-6)


def test_cloudbow_infeasible():
    con = build_string_of_pearls(n=1, target=TARGET, nadir_index=1, sun_zenith=0.0)
    with pytest.raises(InfeasibleScanError):
        plan_cloudbow_scan(con, TARGET, (120.0, 125.0), 1.5, reach_km=100.0)
