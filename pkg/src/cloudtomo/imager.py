"""Radiometric sensor model and the four-channel polarizer measurement pipeline.

Radiances are in units of the renderer (solar irradiance 1 W m^-2 nm^-1);
the band integral of Gamma * L_TOA over wavelength in nm converts them to
electrons per second.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import DEFAULT_APERTURE, DEFAULT_FOCAL, Camera, meridian_frame, pixel_rays
from .rendering import StokesImage

PLANCK = 6.62607015e-34
LIGHT_SPEED = 299792458.0

# IMX250MYR read-out constants
PIXEL_PITCH = 3.45e-6
READ_NOISE = 2.31
DARK_CURRENT = 3.51
FULL_WELL = 10500.0
BITS = 10

POLARIZER_ANGLES = (90.0, 45.0, 135.0, 0.0)


def _curve(value, wavelengths):
    # scalar, or (wavelength_nm, value) table interpolated linearly
    if np.isscalar(value):
        return np.full(np.shape(wavelengths), float(value))
    wl, v = np.asarray(value, dtype=float)
    return np.interp(wavelengths, wl, v)


@dataclass(frozen=True)
class SensorSpec:
    """Pixel, optics and noise parameters of one camera.

    ``qe`` and ``optics_efficiency`` are either constants or a 2-row table
    ``(wavelength_nm, value)``. ``quant_noise`` defaults to LSB / sqrt(12).
    """

    pixel_pitch: float = PIXEL_PITCH
    qe: object = 0.55
    optics_efficiency: object = 0.9
    aperture: float = DEFAULT_APERTURE
    focal_length: float = DEFAULT_FOCAL
    full_well: float = FULL_WELL
    read_noise: float = READ_NOISE
    dark_current: float = DARK_CURRENT
    bits: int = BITS
    quant_noise: float | None = None

    def __post_init__(self):
        if self.full_well <= 0:
            raise ValueError("full well must be positive")
        if min(self.pixel_pitch, self.aperture, self.focal_length) <= 0:
            raise ValueError("pixel pitch, aperture and focal length must be positive")
        if min(self.read_noise, self.dark_current) < 0 or self.bits < 1:
            raise ValueError("noise terms must be >= 0 and bits >= 1")
        for name in ("qe", "optics_efficiency"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.ndim == 2:
                v = v[1]
            if np.any(v < 0) or np.any(v > 1):
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.quant_noise is None:
            object.__setattr__(self, "quant_noise", self.lsb / np.sqrt(12.0))

    @property
    def lsb(self) -> float:
        return self.full_well / 2 ** self.bits


@dataclass(frozen=True)
class BandSpec:
    lambda_min: float = 620.0        # nm
    lambda_max: float = 670.0
    toa_scale: object = 1.0          # L_TOA, constant or (wavelength_nm, value) table
    samples: int = 201

    def __post_init__(self):
        if not self.lambda_max > self.lambda_min > 0:
            raise ValueError("band needs 0 < lambda_min < lambda_max")

    @property
    def center(self) -> float:
        return 0.5 * (self.lambda_min + self.lambda_max)

    def wavelengths(self) -> np.ndarray:
        return np.linspace(self.lambda_min, self.lambda_max, self.samples)


@dataclass(frozen=True)
class PolarizerBlock:
    angles: tuple = POLARIZER_ANGLES

    @property
    def G(self) -> np.ndarray:
        """4x3 analysis matrix: channel radiance = I' + Q' cos 2psi + U' sin 2psi."""
        psi = np.deg2rad(np.asarray(self.angles))
        return np.stack([np.ones_like(psi), np.cos(2 * psi), np.sin(2 * psi)], axis=1)

    @property
    def G_pinv(self) -> np.ndarray:
        return np.linalg.pinv(self.G)


def gamma_lambda(spec: SensorSpec, wavelength_nm):
    """Electrons * m^2 * sr / J collected per unit spectral radiance."""
    wl = np.asarray(wavelength_nm, dtype=float)
    tau = _curve(spec.optics_efficiency, wl)
    qe = _curve(spec.qe, wl)
    photons = wl * 1e-9 / (PLANCK * LIGHT_SPEED)
    return (np.pi * tau * (spec.aperture / (2 * spec.focal_length)) ** 2 * qe * photons
            * spec.pixel_pitch ** 2)


def band_gain(spec: SensorSpec, band: BandSpec) -> float:
    """Trapezoid band integral of Gamma * L_TOA, electrons per second per unit radiance."""
    wl = band.wavelengths()
    f = gamma_lambda(spec, wl) * _curve(band.toa_scale, wl)
    return float(np.trapezoid(f, wl))


def electrons_expected(radiance, dt: float, spec: SensorSpec, band: BandSpec):
    radiance = np.asarray(radiance, dtype=float)
    if np.any(radiance < 0):
        raise ValueError("radiance must be non-negative")
    if dt <= 0:
        raise ValueError("exposure time must be positive")
    return dt * radiance * band_gain(spec, band)


def choose_exposure(scene_max: float, spec: SensorSpec, band: BandSpec, fill: float = 0.9) -> float:
    """Exposure at which ``scene_max`` collects ``fill`` of the full well."""
    if not scene_max > 0:
        raise ValueError("cannot set an exposure for a dark scene")
    return fill * spec.full_well / (scene_max * band_gain(spec, band))


def apply_noise(n_expected, dt: float, spec: SensorSpec, rng: np.random.Generator,
                return_saturation: bool = False):
    """Shot, dark, read and quantization noise; clipped to the full well.

    Quantization is mid-tread with 2**bits codes of width full_well / 2**bits.
    """
    n_expected = np.asarray(n_expected, dtype=float)
    if np.any(n_expected < 0):
        raise ValueError("expected electrons must be non-negative")
    shot = rng.poisson(n_expected + spec.dark_current * dt).astype(float)
    read = np.rint(rng.normal(0.0, spec.read_noise, size=n_expected.shape)) if spec.read_noise else 0.0
    raw = shot + read
    saturated = raw >= spec.full_well
    clipped = np.clip(raw, 0.0, spec.full_well)
    code = np.minimum(np.rint(clipped / spec.lsb), 2 ** spec.bits - 1)
    out = code * spec.lsb
    return (out, saturated) if return_saturation else out


def snr(n_measured, dt: float, spec: SensorSpec):
    n = np.asarray(n_measured, dtype=float)
    var = n + spec.dark_current * dt + spec.read_noise ** 2 + spec.quant_noise ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(var > 0, n / np.sqrt(np.where(var > 0, var, 1.0)), 0.0)


# -- polarimetric measurement ------------------------------------------------

def rotation(alpha_deg) -> np.ndarray:
    """Mueller rotation M(alpha) restricted to (I, Q, U); shape (..., 3, 3)."""
    a = np.deg2rad(np.asarray(alpha_deg, dtype=float))
    c, s = np.cos(2 * a), np.sin(2 * a)
    out = np.zeros(a.shape + (3, 3))
    out[..., 0, 0] = 1.0
    out[..., 1, 1] = c
    out[..., 1, 2] = -s
    out[..., 2, 1] = s
    out[..., 2, 2] = c
    return out


def polarizer_alpha(camera: Camera) -> np.ndarray:
    """Per-pixel angle (deg) from the meridian l-axis to the 0-degree polarizer.

    Measured anticlockwise looking along the propagation direction (toward
    the camera), i.e. positive from l toward b.
    """
    rays, _ = pixel_rays(camera)
    omega = -rays
    frame = meridian_frame(omega)
    h, _ = camera.image_axes()
    # polarizer axis projected onto the plane orthogonal to omega
    hp = h - np.sum(h * omega, axis=-1, keepdims=True) * omega
    return np.degrees(np.arctan2(np.sum(hp * frame.b, axis=-1), np.sum(hp * frame.l, axis=-1)))


@dataclass
class Measurement:
    stokes: StokesImage
    channels: np.ndarray            # (4, rows, cols) radiance per polarizer channel
    saturated: np.ndarray           # (rows, cols) bool: any channel clipped
    dt: float


def channel_radiances(stokes: StokesImage, alpha, block: PolarizerBlock = PolarizerBlock()) -> np.ndarray:
    """Radiance behind each polarizer, (4, rows, cols)."""
    s = np.moveaxis(stokes.stack(), 0, -1)                       # (..., 3)
    cam = np.einsum("...ij,...j->...i", rotation(alpha), s)
    return np.moveaxis(cam @ block.G.T, -1, 0)


def measure_stokes(stokes: StokesImage, alpha, dt: float, spec: SensorSpec, band: BandSpec,
                   rng: np.random.Generator | None = None,
                   block: PolarizerBlock = PolarizerBlock()) -> Measurement:
    """Meridian-frame Stokes image -> simulated polarization-camera Stokes estimate.

    With ``rng=None`` the sensor is noiseless and the round trip is exact.
    The mean dark signal D_T * dt is subtracted before the radiometric inversion.
    """
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), stokes.shape)
    chan = channel_radiances(stokes, alpha, block)
    gain = dt * band_gain(spec, band)
    if rng is None:
        measured = chan
        saturated = np.zeros(stokes.shape, dtype=bool)
    else:
        n = electrons_expected(np.maximum(chan, 0.0), dt, spec, band)
        counts, sat = apply_noise(n, dt, spec, rng, return_saturation=True)
        measured = (counts - spec.dark_current * dt) / gain
        saturated = sat.any(axis=0)
    cam = np.einsum("ij,j...->i...", block.G_pinv, measured)           # (3, rows, cols)
    back = np.einsum("...ij,...j->...i", rotation(-alpha), np.moveaxis(cam, 0, -1))
    return Measurement(StokesImage.from_stack(np.moveaxis(back, -1, 0)), measured, saturated, dt)


@dataclass
class Imager:
    """Sensor, band and polarizer bundled for the measurement stage."""

    sensor: SensorSpec = field(default_factory=SensorSpec)
    band: BandSpec = field(default_factory=BandSpec)
    block: PolarizerBlock = field(default_factory=PolarizerBlock)

    def scene_max(self, images, alphas) -> float:
        """Largest noiseless channel radiance over all views."""
        return max(float(channel_radiances(img, a, self.block).max()) for img, a in zip(images, alphas))

    def exposure(self, images, alphas) -> float:
        return choose_exposure(self.scene_max(images, alphas), self.sensor, self.band)

    def measure(self, image, alpha, dt, rng=None) -> Measurement:
        return measure_stokes(image, alpha, dt, self.sensor, self.band, rng, self.block)
