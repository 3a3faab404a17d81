import numpy as np
import pytest

from cloudtomo.geometry import Camera, meridian_frame, pixel_rays, scattering_angle, sun_direction, unit
from cloudtomo.microphysics import VoxelCloud
from cloudtomo.optics import BulkOpticsTable
from cloudtomo.rendering import SingleScatterRenderer, StokesImage, optical_depth, traverse

from conftest import look_camera, random_cloud

SUN = sun_direction(25.0, 90.0)


def constant_table(mass_ext=0.05, albedo=1.0):
    re = np.array([2.5, 20.0, 40.0])
    ang = np.linspace(0, 180, 721)
    c = np.cos(np.deg2rad(ang))
    phase = np.stack([0.75 * (1 + c ** 2), -0.75 * (1 - c ** 2), 1.5 * c, 0 * c], axis=-1)
    return BulkOpticsTable(re, 0.1, 645.0, ang, np.full(3, mass_ext), np.full(3, albedo),
                           np.repeat(phase[None], 3, axis=0))


def one_voxel(lwc=1.0, shape=(1, 1, 1), idx=(0, 0, 0)):
    mask = np.zeros(shape, bool)
    mask[idx] = True
    return VoxelCloud(np.where(mask, lwc, 0.0), np.where(mask, 10.0, 0.0), mask, 20.0, 500.0)


def _slab(o, d, lo, hi):
    # entry and exit distances of rays o + t d (o may be (n, 3)) through a box
    o = np.atleast_2d(o)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    inside = (o >= lo) & (o <= hi)
    tn = np.where(d == 0, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2)).max(axis=1)
    tf = np.where(d == 0, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2)).min(axis=1)
    return np.maximum(tn, 0.0), tf


def fine_oracle(cloud, table, camera, sun, step=0.1):
    """Midpoint-rule line integral of the single-scatter source at ``step`` meters."""
    rays, o = pixel_rays(camera)
    vox = [tuple(v) for v in np.argwhere(cloud.mask)]
    b0, d = cloud.bounds[:, 0], np.asarray(cloud.voxel_size)
    boxes = [(b0 + np.array(v) * d, b0 + (np.array(v) + 1) * d) for v in vox]
    beta = [cloud.lwc[v] * float(table.extinction(cloud.r_e[v])) for v in vox]
    alb = [float(table.single_scatter_albedo(cloud.r_e[v])) for v in vox]
    out = np.zeros((4,) + rays.shape[:2])
    for i in range(rays.shape[0]):
        for j in range(rays.shape[1]):
            r = rays[i, j]
            ai, af = table.angle_weights(np.array([scattering_angle(sun, r)]))
            cams = [_slab(o, r, lo, hi) for lo, hi in boxes]
            total = pol = 0.0
            for k, (lo, hi) in enumerate(boxes):
                ta, tb = cams[k][0][0], cams[k][1][0]
                if tb <= ta:
                    continue
                ph = table.phase_at(np.array([cloud.r_e[vox[k]]]), ai, af)[0]
                n = max(1, int(np.ceil((tb - ta) / step)))
                h = (tb - ta) / n
                t = ta + (np.arange(n) + 0.5) * h
                p = o + t[:, None] * r
                tau = np.zeros(n)
                for q, (qlo, qhi) in enumerate(boxes):
                    a, bq = cams[q][0][0], cams[q][1][0]
                    tau += beta[q] * np.clip(np.minimum(bq, t) - a, 0, None)
                    sa, sb = _slab(p, sun, qlo, qhi)
                    tau += beta[q] * np.clip(sb - sa, 0, None)
                w = beta[k] * alb[k] / (4 * np.pi) * np.sum(np.exp(-tau)) * h
                total += w * ph[0]
                pol += w * ph[1]
            out[0, i, j] = total
            out[1, i, j] = pol
            # polarization perpendicular (P12 < 0) or parallel to the scattering plane
            omega = -r
            normal = unit(np.cross(-sun, omega))
            e = normal if pol < 0 else np.cross(omega, normal)
            fr = meridian_frame(omega)
            psi = np.arctan2(e @ fr.b, e @ fr.l)
            out[2, i, j] = abs(pol) * np.cos(2 * psi)
            out[3, i, j] = abs(pol) * np.sin(2 * psi)
    return out


def test_empty_cloud_renders_zeros(table):
    cloud = VoxelCloud(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), np.zeros((2, 2, 2), bool))
    img = SingleScatterRenderer().render(cloud, table, look_camera(), SUN)
    assert img.shape == (8, 8)
    assert not img.stack().any()


def test_optical_depth_single_voxel():
    cloud = one_voxel()
    zc = cloud.bounds[2].mean()
    tau = optical_depth(cloud, constant_table(), (-100, 0, zc), (100, 0, zc))
    assert tau == pytest.approx(1.0, rel=1e-12)
    empty = VoxelCloud(np.zeros((1, 1, 1)), np.zeros((1, 1, 1)), np.zeros((1, 1, 1), bool))
    assert optical_depth(empty, constant_table(), (-100, 0, zc), (100, 0, zc)) == 0.0


def test_optical_depth_reversal(table):
    rng = np.random.default_rng(4)
    for seed in range(5):
        cloud = random_cloud((4, 3, 5), seed=seed)
        lo, hi = cloud.bounds[:, 0], cloud.bounds[:, 1]
        for _ in range(10):
            a = lo - 30 + rng.uniform(size=3) * (hi - lo + 60)
            b = lo - 30 + rng.uniform(size=3) * (hi - lo + 60)
            ab = optical_depth(cloud, table, a, b)
            ba = optical_depth(cloud, table, b, a)
            assert ab == pytest.approx(ba, rel=1e-10, abs=1e-14)


def test_traverse_chords_sum_to_box_chord():
    bounds = np.array([[-30.0, 30.0], [-20.0, 20.0], [500.0, 560.0]])
    rng = np.random.default_rng(1)
    o = np.array([-200.0, -150.0, 700.0])
    for _ in range(20):
        d = unit(np.array([0, 0, 530.0]) + rng.uniform(-25, 25, 3) - o)
        ray, vox, tin, tout = traverse(o, d, bounds, (3, 2, 3))
        ta, tb = _slab(o, d, bounds[:, 0], bounds[:, 1])
        assert np.sum(tout - tin) == pytest.approx(max(tb[0] - ta[0], 0), rel=1e-12, abs=1e-9)


def test_thin_limit_closed_form(table):
    cloud = one_voxel(lwc=1e-4, shape=(3, 3, 3), idx=(1, 1, 1))
    cam = look_camera(view_deg=30, azimuth=200, res=9, gsd=4.0, target=cloud.center)
    img = SingleScatterRenderer().render(cloud, table, cam, SUN)
    rays, o = pixel_rays(cam)
    lo = cloud.bounds[:, 0] + 20
    hi = lo + 20
    beta = 1e-4 * float(table.extinction(10.0))
    assert beta * 40 < 1e-3
    for i, j in [(4, 4), (3, 5), (5, 3)]:
        ta, tb = _slab(o, rays[i, j], lo, hi)
        tau = beta * (tb[0] - ta[0])
        ai, af = table.angle_weights(np.array([scattering_angle(SUN, rays[i, j])]))
        p11 = table.phase_at(np.array([10.0]), ai, af)[0, 0]
        expected = float(table.single_scatter_albedo(10.0)) * p11 * tau / (4 * np.pi)
        assert img.I[i, j] == pytest.approx(expected, rel=5e-3)


@pytest.mark.parametrize("view, azimuth, sun", [(30, 200, (25, 90)), (45, 20, (40, 30)), (0, 0, (25, 90))])
def test_two_voxel_fine_oracle(table, view, azimuth, sun):
    mask = np.zeros((3, 3, 3), bool)
    mask[1, 1, 1] = mask[1, 2, 1] = True
    lwc = np.zeros((3, 3, 3))
    lwc[1, 1, 1], lwc[1, 2, 1] = 0.35, 0.6
    re = np.where(mask, 8.0, 0.0)
    re[1, 2, 1] = 12.0
    cloud = VoxelCloud(lwc, re, mask, 20.0, 500.0)
    s = sun_direction(*sun)
    cam = look_camera(view, azimuth, res=6, target=cloud.center)
    ref = fine_oracle(cloud, table, cam, s, step=0.1)
    img = SingleScatterRenderer().render(cloud, table, cam, s)
    sel = ref[0] > 1e-3 * ref[0].max()
    assert sel.sum() >= 4
    scale = np.abs(ref[1][sel])
    assert np.max(np.abs(img.I - ref[0])[sel] / ref[0][sel]) < 1e-3
    assert np.max(np.abs(img.Q - ref[2])[sel] / scale) < 1e-3
    assert np.max(np.abs(img.U - ref[3])[sel] / scale) < 1e-3


def test_polarization_bound(table):
    for seed in range(3):
        cloud = random_cloud((4, 4, 4), seed=seed, lwc=0.5)
        for view, az in [(0, 0), (35, 120), (50, 300)]:
            img = SingleScatterRenderer().render(cloud, table, look_camera(view, az, target=cloud.center), SUN)
            assert np.all(img.I >= 0)
            assert np.all(np.hypot(img.Q, img.U) <= img.I + 1e-9)


def test_linear_in_irradiance(table):
    cloud = random_cloud(seed=2)
    cam = look_camera(target=cloud.center)
    a = SingleScatterRenderer().render(cloud, table, cam, SUN).stack()
    for k in (2.0, 3.7):
        b = SingleScatterRenderer(solar_irradiance=k).render(cloud, table, cam, SUN).stack()
        assert np.allclose(b, k * a, rtol=1e-14, atol=0)


def test_deterministic(table):
    cloud = random_cloud(seed=5)
    cam = look_camera(target=cloud.center)
    a = SingleScatterRenderer().render(cloud, table, cam, SUN).stack()
    b = SingleScatterRenderer().render(cloud, table, cam, SUN).stack()
    assert np.array_equal(a, b)


def _rotate_z(v, deg):
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]) @ np.asarray(v, float)


@pytest.mark.parametrize("quarter", [1, 2, 3])
def test_azimuthal_rotation_invariance(table, quarter):
    cloud = random_cloud((4, 4, 3), seed=7, hole=(0, 3, 1))
    deg = 90.0 * quarter
    # voxel (i, j) of the rotated grid holds the voxel whose centre maps onto it
    n = cloud.shape[0]
    ii, jj = np.meshgrid(np.arange(n) - (n - 1) / 2, np.arange(n) - (n - 1) / 2, indexing="ij")
    back = np.rint(np.einsum("ab,bij->aij", _rotate_z(np.eye(3), -deg)[:2, :2], np.stack([ii, jj]))
                   + (n - 1) / 2).astype(int)
    rot = lambda f: f[back[0], back[1]]
    turned = VoxelCloud(rot(cloud.lwc), rot(cloud.r_e), rot(cloud.mask), 20.0, cloud.base_height)
    cam = look_camera(35, 160, res=7, target=cloud.center)
    pos = _rotate_z(cam.position, deg)
    axis = _rotate_z(cam.optical_axis, deg)
    h0 = _rotate_z(cam.image_axes()[0], deg)
    plain = Camera(tuple(pos), tuple(axis), focal_length=cam.focal_length, resolution=cam.resolution)
    h1 = plain.image_axes()[0]
    roll = np.degrees(np.arctan2(np.cross(h1, h0) @ axis, h1 @ h0))
    cam2 = Camera(tuple(pos), tuple(axis), roll=roll, focal_length=cam.focal_length, resolution=cam.resolution)
    a = SingleScatterRenderer().render(cloud, table, cam, SUN)
    b = SingleScatterRenderer().render(turned, table, cam2, _rotate_z(SUN, deg))
    scale = a.I.max()
    assert np.allclose(a.I, b.I, atol=1e-6 * scale, rtol=0)
    assert np.allclose(a.dolp(), b.dolp(), atol=1e-6)
    # Stokes components are referenced to the meridian frame, which turns with the scene
    assert np.allclose(a.Q, b.Q, atol=1e-6 * scale, rtol=0)
    assert np.allclose(a.U, b.U, atol=1e-6 * scale, rtol=0)


def _fd_check(table, cloud, cam, renderer):
    rng = np.random.default_rng(11)
    img = renderer.render(cloud, table, cam, SUN)
    adj = StokesImage(*(rng.normal(size=img.shape) for _ in range(3)))
    _, g_lwc, g_re = renderer.render_with_gradient(cloud, table, cam, SUN, adj)

    def f(c):
        return float(np.sum(renderer.render(c, table, cam, SUN).stack() * adj.stack()))

    worst = 0.0
    for idx in map(tuple, np.argwhere(cloud.mask)):
        for name, grad in (("lwc", g_lwc), ("r_e", g_re)):
            x = getattr(cloud, name)
            h = 1e-4 * x[idx]
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            fd = (f(cloud.with_fields(**{name: xp})) - f(cloud.with_fields(**{name: xm}))) / (2 * h)
            worst = max(worst, abs(fd - grad[idx]) / max(abs(fd), abs(grad[idx]), 1e-300))
    return worst, g_lwc, g_re


def test_gradient_matches_finite_differences(table):
    cloud = random_cloud(seed=3, hole=(0, 0, 0))
    cam = look_camera(30, 200, target=cloud.center)
    worst, g_lwc, g_re = _fd_check(table, cloud, cam, SingleScatterRenderer())
    assert worst < 1e-4
    assert g_lwc[0, 0, 0] == 0.0 and g_re[0, 0, 0] == 0.0


def test_gradient_with_rayleigh_layer(table):
    cloud = random_cloud(seed=8, hole=(2, 1, 0))
    cam = look_camera(20, 60, target=cloud.center)
    worst, g_lwc, g_re = _fd_check(table, cloud, cam, SingleScatterRenderer(rayleigh_extinction=1e-5))
    assert worst < 1e-4
    assert g_lwc[2, 1, 0] == 0.0 and g_re[2, 1, 0] == 0.0


def test_zero_adjoint_gives_zero_gradient(table):
    cloud = random_cloud(seed=1)
    cam = look_camera(target=cloud.center)
    zero = StokesImage.zeros((8, 8))
    _, g_lwc, g_re = SingleScatterRenderer().render_with_gradient(cloud, table, cam, SUN, zero)
    assert not g_lwc.any() and not g_re.any()
    assert g_lwc.shape == cloud.shape == g_re.shape


def test_rayleigh_layer_adds_signal(table):
    cloud = VoxelCloud(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), np.zeros((2, 2, 2), bool), 20.0, 500.0)
    img = SingleScatterRenderer(rayleigh_extinction=1e-5).render(cloud, table, look_camera(target=cloud.center), SUN)
    assert img.I.max() > 0
    assert np.all(np.hypot(img.Q, img.U) <= img.I + 1e-15)


def test_supersampling_converges(table):
    cloud = random_cloud(seed=9)
    cam = look_camera(25, 100, res=4, gsd=15.0, target=cloud.center)
    a = SingleScatterRenderer(supersample=8).render(cloud, table, cam, SUN).I
    b = SingleScatterRenderer(supersample=16).render(cloud, table, cam, SUN).I
    assert np.allclose(a, b, rtol=0.02, atol=0.02 * b.max())
