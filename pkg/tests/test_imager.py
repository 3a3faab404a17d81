import numpy as np
import pytest
from scipy import integrate

from cloudtomo.geometry import Camera, meridian_frame, pixel_rays
from cloudtomo.imager import (LIGHT_SPEED, PLANCK, BandSpec, Imager, PolarizerBlock, SensorSpec,
                              apply_noise, band_gain, channel_radiances, choose_exposure,
                              electrons_expected, gamma_lambda, measure_stokes, polarizer_alpha,
                              rotation, snr)
from cloudtomo.rendering import StokesImage

SPEC = SensorSpec()
BAND = BandSpec()


def random_stokes(rng, shape):
    i = rng.uniform(0.01, 1.0, shape)
    p = rng.uniform(0, 1, shape) * i
    chi = rng.uniform(0, np.pi, shape)
    return StokesImage(i, p * np.cos(2 * chi), p * np.sin(2 * chi))


def test_gamma_unit_example():
    hc_nm = PLANCK * LIGHT_SPEED * 1e9
    spec = SensorSpec(pixel_pitch=1.0, qe=1.0, optics_efficiency=1.0, aperture=2.0, focal_length=1.0)
    assert gamma_lambda(spec, hc_nm) == pytest.approx(np.pi, rel=1e-14)


def test_gamma_aperture_scaling():
    a = gamma_lambda(SPEC, 645.0)
    b = gamma_lambda(SensorSpec(aperture=2 * SPEC.aperture), 645.0)
    assert b == pytest.approx(4 * a, rel=1e-14)


def test_gamma_independent_evaluation():
    f_number = SPEC.focal_length / SPEC.aperture
    photons_per_joule = 645e-9 / (6.62607015e-34 * 299792458.0)
    expected = np.pi * 0.9 * 0.55 * photons_per_joule * (3.45e-6) ** 2 / (2 * f_number) ** 2
    assert gamma_lambda(SPEC, 645.0) == pytest.approx(expected, rel=1e-12)


def test_band_integral_against_fine_quadrature():
    val, _ = integrate.quad(lambda wl: gamma_lambda(SPEC, wl), 620, 670, epsrel=1e-12)
    assert band_gain(SPEC, BAND) == pytest.approx(val, rel=1e-3)
    assert band_gain(SPEC, BAND) == pytest.approx(50 * gamma_lambda(SPEC, 645.0), rel=1e-3)


def test_tabulated_curves():
    qe = ((600.0, 700.0), (0.4, 0.6))
    spec = SensorSpec(qe=qe)
    assert gamma_lambda(spec, 650.0) == pytest.approx(gamma_lambda(SensorSpec(qe=0.5), 650.0), rel=1e-12)
    with pytest.raises(ValueError):
        SensorSpec(qe=1.2)
    with pytest.raises(ValueError):
        BandSpec(700.0, 600.0)


def test_electrons_expected_linear():
    assert electrons_expected(0.0, 0.01, SPEC, BAND) == 0.0
    a = electrons_expected(0.3, 0.01, SPEC, BAND)
    assert electrons_expected(0.6, 0.01, SPEC, BAND) == pytest.approx(2 * a, rel=1e-14)
    assert electrons_expected(0.3, 0.03, SPEC, BAND) == pytest.approx(3 * a, rel=1e-14)


def test_exposure_fills_ninety_percent():
    dt = choose_exposure(0.2, SPEC, BAND)
    assert electrons_expected(0.2, dt, SPEC, BAND) == pytest.approx(9450.0, abs=1e-9)
    assert choose_exposure(0.1, SPEC, BAND) == pytest.approx(2 * dt, rel=1e-14)
    with pytest.raises(ValueError):
        choose_exposure(0.0, SPEC, BAND)


def test_noise_reproducible():
    n = np.linspace(0, 9000, 50)
    a = apply_noise(n, 0.01, SPEC, np.random.default_rng(3))
    b = apply_noise(n, 0.01, SPEC, np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_noise_clips_at_full_well():
    out, sat = apply_noise(np.full(20000, 10490.0), 0.01, SPEC, np.random.default_rng(0), return_saturation=True)
    assert out.max() <= SPEC.full_well
    assert sat.any()
    assert np.all(out >= 0)


def test_noise_quantized_to_codes():
    out = apply_noise(np.full(1000, 3000.0), 0.01, SPEC, np.random.default_rng(1))
    codes = out / SPEC.lsb
    assert np.allclose(codes, np.rint(codes))
    assert codes.max() <= 2 ** SPEC.bits - 1


@pytest.mark.parametrize("n", [500.0, 5000.0, 9000.0])
def test_noise_statistics(n):
    dt = 0.01
    x = apply_noise(np.full(100_000, n), dt, SPEC, np.random.default_rng(int(n)))
    mean = n + SPEC.dark_current * dt
    var = mean + SPEC.read_noise ** 2 + SPEC.quant_noise ** 2
    assert abs(x.mean() - mean) < 3 * np.sqrt(x.var() / x.size)
    assert x.var() == pytest.approx(var, rel=0.05)


@pytest.mark.parametrize("n", [10.0, 100.0, 1000.0, 10000.0])
def test_monte_carlo_snr(n):
    dt = 0.01
    x = apply_noise(np.full(100_000, n), dt, SPEC, np.random.default_rng(7))
    assert x.mean() / x.std() == pytest.approx(float(snr(n, dt, SPEC)), rel=0.10)


def test_snr_examples():
    assert snr(0.0, 0.01, SPEC) == 0.0
    ideal = SensorSpec(read_noise=0.0, dark_current=0.0, quant_noise=0.0)
    assert snr(400.0, 1.0, ideal) == pytest.approx(20.0)
    lsb = 10500 / 1024
    expected = 9450 / np.sqrt(9450 + 3.51 * 0.01 + 2.31 ** 2 + lsb ** 2 / 12)
    assert snr(9450.0, 0.01, SPEC) == pytest.approx(expected, rel=1e-12)


def test_quant_noise_derived_from_bits():
    assert SPEC.quant_noise == pytest.approx(10500 / 2 ** 10 / np.sqrt(12), rel=1e-15)


def test_polarizer_matrix():
    g = PolarizerBlock().G
    assert g.shape == (4, 3)
    assert np.linalg.matrix_rank(g) == 3
    assert np.allclose(PolarizerBlock().G_pinv @ g, np.eye(3), atol=1e-12)


def test_rotation_examples():
    m = rotation(45.0)
    s = np.array([1.0, 0.3, -0.2])
    assert np.allclose(m @ s, [1.0, 0.2, 0.3], atol=1e-15)
    assert np.allclose(rotation(30.0) @ rotation(-30.0), np.eye(3), atol=1e-15)


def test_dolp_invariant_under_rotation():
    rng = np.random.default_rng(2)
    s = np.moveaxis(random_stokes(rng, (50,)).stack(), 0, -1)
    rotated = np.einsum("...ij,...j->...i", rotation(rng.uniform(-180, 180, 50)), s)
    d0 = np.hypot(s[:, 1], s[:, 2]) / s[:, 0]
    d1 = np.hypot(rotated[:, 1], rotated[:, 2]) / rotated[:, 0]
    assert np.allclose(d0, d1, rtol=1e-13)


def test_unpolarized_channels_equal_intensity():
    img = StokesImage(np.full((2, 2), 0.7), np.zeros((2, 2)), np.zeros((2, 2)))
    ch = channel_radiances(img, np.array([[0.0, 33.0], [-71.0, 180.0]]))
    assert np.allclose(ch, 0.7, rtol=1e-14)


def test_noiseless_round_trip():
    rng = np.random.default_rng(5)
    img = random_stokes(rng, (25, 40))
    alpha = rng.uniform(-180, 180, (25, 40))
    out = measure_stokes(img, alpha, 0.01, SPEC, BAND).stokes
    assert np.allclose(out.stack(), img.stack(), rtol=1e-10, atol=0)


def test_round_trip_with_nadir_camera():
    cam = Camera((0.0, 0.0, 5e5), (0.0, 0.0, -1.0), resolution=(5, 5))
    alpha = polarizer_alpha(cam)
    assert np.all(np.isfinite(alpha))
    img = random_stokes(np.random.default_rng(6), (5, 5))
    out = measure_stokes(img, alpha, 0.01, SPEC, BAND).stokes
    assert np.allclose(out.stack(), img.stack(), rtol=1e-10, atol=0)


def test_alpha_matches_polarizer_axis():
    cam = Camera.looking_at((2e5, -1e5, 5e5), (0, 0, 0), roll=17.0, resolution=(3, 3))
    alpha = polarizer_alpha(cam)
    rays, _ = pixel_rays(cam)
    h, _ = cam.image_axes()
    omega = -rays[1, 1]
    f = meridian_frame(omega)
    a = np.radians(alpha[1, 1])
    axis = np.cos(a) * f.l + np.sin(a) * f.b
    hp = h - (h @ omega) * omega
    assert np.allclose(axis, hp / np.linalg.norm(hp), atol=1e-12)


def test_noisy_measurement_unbiased():
    rng = np.random.default_rng(8)
    img = StokesImage(np.array([[0.6]]), np.array([[-0.12]]), np.array([[0.08]]))
    dt = choose_exposure(1.0, SPEC, BAND)
    alpha = np.array([[23.0]])
    draws = np.array([measure_stokes(img, alpha, dt, SPEC, BAND, rng).stokes.stack()[:, 0, 0]
                      for _ in range(10_000)])
    se = draws.std(axis=0) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - img.stack()[:, 0, 0]) < 3 * se)


def test_saturation_flag():
    img = StokesImage(np.array([[1.0, 0.1]]), np.zeros((1, 2)), np.zeros((1, 2)))
    dt = choose_exposure(0.5, SPEC, BAND)
    m = measure_stokes(img, np.zeros((1, 2)), dt, SPEC, BAND, np.random.default_rng(0))
    assert m.saturated.tolist() == [[True, False]]


def test_imager_exposure_from_channels():
    im = Imager()
    img = StokesImage(np.array([[0.5]]), np.array([[0.2]]), np.array([[0.0]]))
    dt = im.exposure([img], [np.zeros((1, 1))])
    assert im.scene_max([img], [np.zeros((1, 1))]) == pytest.approx(0.7)
    assert electrons_expected(0.7, dt, im.sensor, im.band) == pytest.approx(9450.0)
