"""Satellite constellation, pinhole cameras, meridian frames and cloudbow planning.

Coordinates are local ENU in meters with the axis labels used throughout the
package: x points North, y points East, z is up. Satellites of a string of
pearls fly along +x in the plane y = 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

EARTH_RADIUS = 6371e3
ZHAT = np.array([0.0, 0.0, 1.0])
SINGULAR_B = np.array([-1.0, 0.0, 0.0])

# IMX250-like pixel at 20 m ground sampling from 500 km
DEFAULT_PITCH = 3.45e-6
DEFAULT_FOCAL = DEFAULT_PITCH * 500e3 / 20.0
DEFAULT_APERTURE = DEFAULT_FOCAL / 2.8


class InfeasibleScanError(ValueError):
    pass


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def sun_direction(zenith_deg: float, azimuth_deg: float) -> np.ndarray:
    """Unit vector pointing toward the sun; azimuth is clockwise from North."""
    th, ph = np.deg2rad(zenith_deg), np.deg2rad(azimuth_deg)
    return np.array([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)])


def _rotate(v, axis, angle_deg):
    # Rodrigues rotation of v about unit axis
    a = np.deg2rad(angle_deg)
    return v * np.cos(a) + np.cross(axis, v) * np.sin(a) + axis * np.dot(axis, v) * (1 - np.cos(a))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. ``roll`` rotates the image (and 0-degree polarizer) axes."""

    position: tuple
    optical_axis: tuple
    roll: float = 0.0
    focal_length: float = DEFAULT_FOCAL
    aperture: float = DEFAULT_APERTURE
    pixel_pitch: float = DEFAULT_PITCH
    resolution: tuple = (32, 32)
    satellite: int = 0
    arc_offset: float = 0.0

    def __post_init__(self):
        axis = np.asarray(self.optical_axis, dtype=float)
        if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise ValueError("optical axis must be a unit vector")
        if min(self.focal_length, self.aperture, self.pixel_pitch) <= 0:
            raise ValueError("focal length, aperture and pixel pitch must be positive")
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        object.__setattr__(self, "optical_axis", tuple(float(v) for v in axis))
        res = self.resolution
        if np.isscalar(res):
            res = (int(res), int(res))
        object.__setattr__(self, "resolution", tuple(int(r) for r in res))

    @classmethod
    def looking_at(cls, position, target, **kwargs) -> "Camera":
        axis = unit(np.asarray(target, float) - np.asarray(position, float))
        return cls(position=tuple(position), optical_axis=tuple(axis), **kwargs)

    def image_axes(self) -> tuple[np.ndarray, np.ndarray]:
        """Horizontal (0-degree polarizer) and vertical image axes in world space."""
        a = np.asarray(self.optical_axis)
        ref = np.array([0.0, 1.0, 0.0])
        if np.linalg.norm(np.cross(a, ref)) < 1e-9:
            ref = np.array([1.0, 0.0, 0.0])
        h = unit(ref - np.dot(ref, a) * a)
        if self.roll:
            h = _rotate(h, a, self.roll)
        w = np.cross(a, h)
        return h, w


@dataclass(frozen=True)
class Constellation:
    cameras: tuple
    sun_zenith: float = 25.0
    sun_azimuth: float = 90.0
    altitude: float = 500e3
    target: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.cameras) < 1:
            raise ValueError("a constellation needs at least one camera")
        if not 0.0 <= self.sun_zenith < 90.0:
            raise ValueError("sun zenith must lie in [0, 90) degrees")
        object.__setattr__(self, "cameras", tuple(self.cameras))

    @property
    def sun(self) -> np.ndarray:
        return sun_direction(self.sun_zenith, self.sun_azimuth)


@dataclass(frozen=True)
class MeridianFrame:
    b: np.ndarray
    l: np.ndarray
    omega: np.ndarray


def orbit_position(arc_offset: float, altitude: float) -> np.ndarray:
    """ENU position of a satellite ``arc_offset`` meters along track (on the orbit arc)."""
    radius = EARTH_RADIUS + altitude
    phi = arc_offset / radius
    return np.array([radius * math.sin(phi), 0.0, radius * math.cos(phi) - EARTH_RADIUS])


def build_string_of_pearls(n: int = 10, altitude_km: float = 500.0, spacing_km: float = 100.0,
                           target=(0.0, 0.0, 0.0), nadir_index: int = 5,
                           sun_zenith: float = 25.0, sun_azimuth: float = 90.0,
                           **camera_kwargs) -> Constellation:
    """Satellites numbered 1..n along one orbit arc, each aimed at ``target``.

    Satellite ``nadir_index`` (1-based) sits above the ENU origin; lower
    numbers lead the formation toward +x (North).
    """
    if n < 1 or altitude_km <= 0 or spacing_km <= 0:
        raise ValueError("need n >= 1 and positive altitude and spacing")
    if not 1 <= nadir_index <= n:
        nadir_index = (n + 1) // 2
    altitude = altitude_km * 1e3
    cams = []
    for number in range(1, n + 1):
        s = (nadir_index - number) * spacing_km * 1e3
        pos = orbit_position(s, altitude)
        cams.append(Camera.looking_at(pos, target, satellite=number, arc_offset=s, **camera_kwargs))
    return Constellation(tuple(cams), sun_zenith, sun_azimuth, altitude, tuple(map(float, target)))


def view_zenith_angle(camera: Camera, target) -> float:
    """Signed off-zenith angle of the camera seen from ``target`` (positive toward +x)."""
    d = np.asarray(camera.position) - np.asarray(target, float)
    return float(np.degrees(np.arctan2(d[0], d[2])))


def pixel_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Unit ray directions (rows, cols, 3) through each pixel centre, and the origin.

    Row 0 is the top of the image; an odd resolution puts a pixel on the axis.
    """
    nx, ny = camera.resolution
    h, w = camera.image_axes()
    a = np.asarray(camera.optical_axis)
    u = (np.arange(nx) - 0.5 * (nx - 1)) * camera.pixel_pitch
    v = (0.5 * (ny - 1) - np.arange(ny)) * camera.pixel_pitch
    d = (camera.focal_length * a[None, None, :]
         + u[None, :, None] * h[None, None, :]
         + v[:, None, None] * w[None, None, :])
    return unit(d), np.asarray(camera.position)


def meridian_frame(omega) -> MeridianFrame:
    """Meridian basis b = z x w / |z x w|, l = w x b for propagation ``omega``.

    Works on a single vector or an (..., 3) array. Directions parallel to the
    zenith use the fixed fallback b = (-1, 0, 0).
    """
    omega = np.asarray(omega, dtype=float)
    zc = np.cross(ZHAT, omega)
    norm = np.linalg.norm(zc, axis=-1, keepdims=True)
    singular = norm < 1e-9
    b = np.where(singular, SINGULAR_B, zc / np.where(singular, 1.0, norm))
    l = np.cross(omega, b)
    return MeridianFrame(b, l, omega)


def scattering_angle(sun, view_ray) -> np.ndarray:
    """Scattering angle (deg) for sunlight scattered back along ``-view_ray``.

    ``sun`` points toward the sun, ``view_ray`` from the camera into the scene.
    """
    cos = np.sum(np.asarray(sun, float) * np.asarray(view_ray, float), axis=-1)
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def _target_scattering_angle(arc_offset, altitude, target, sun):
    pos = orbit_position(arc_offset, altitude)
    return float(scattering_angle(sun, unit(np.asarray(target, float) - pos)))


@dataclass
class CloudbowPlan:
    selected: list                     # satellite numbers chosen for the scan
    cameras: list                      # additional poses
    angles: list = field(default_factory=list)      # target-point scattering angles
    nominal_angles: dict = field(default_factory=dict)


def _solve_offset(s_nom, goal, altitude, target, sun, reach, step=1e3):
    # nearest along-track offset to s_nom whose target scattering angle equals goal
    grid = s_nom + np.arange(-reach, reach + step / 2, step)
    f = np.array([_target_scattering_angle(s, altitude, target, sun) for s in grid]) - goal
    best = None
    exact = np.flatnonzero(f == 0)
    roots = [grid[i] for i in exact]
    for i in np.flatnonzero(np.sign(f[:-1]) * np.sign(f[1:]) < 0):
        roots.append(brentq(lambda s: _target_scattering_angle(s, altitude, target, sun) - goal,
                            grid[i], grid[i + 1], xtol=1e-6, rtol=1e-14))
    for r in roots:
        if best is None or abs(r - s_nom) < abs(best - s_nom):
            best = r
    return best


def plan_cloudbow_scan(constellation: Constellation, target=None, angle_range=(135.0, 150.0),
                       resolution: float = 1.5, max_satellites: int = 2,
                       reach_km: float = 600.0) -> CloudbowPlan:
    """Extra along-track poses whose target scattering angles sample ``angle_range``.

    The satellites whose nominal scattering angle lies closest to the range
    midpoint are chosen; a second satellite joins when it is within half a
    resolution step of the best one. Samples sit at the centres of equal bins
    no wider than ``resolution``; each goes to the chosen satellite that
    reaches it with the smallest along-track displacement.
    """
    lo, hi = map(float, angle_range)
    if not 0.0 <= lo <= hi <= 180.0:
        raise ValueError("angle range must be an ordered sub-interval of [0, 180]")
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    target = constellation.target if target is None else tuple(map(float, target))
    sun = constellation.sun
    alt = constellation.altitude
    cams = constellation.cameras
    nominal = {c.satellite: float(scattering_angle(sun, unit(np.asarray(target) - np.asarray(c.position))))
               for c in cams}
    mid = 0.5 * (lo + hi)
    ranked = sorted(cams, key=lambda c: (abs(nominal[c.satellite] - mid), c.satellite))
    best = abs(nominal[ranked[0].satellite] - mid)
    chosen = [c for c in ranked if abs(nominal[c.satellite] - mid) <= best + 0.5 * resolution + 1e-9]
    chosen = chosen[:max_satellites]

    n = max(1, math.ceil((hi - lo) / resolution - 1e-9))
    goals = [lo + (k + 0.5) * (hi - lo) / n for k in range(n)] if hi > lo else [lo]
    plan = CloudbowPlan([c.satellite for c in chosen], [], [], nominal)
    for goal in goals:
        options = []
        for c in chosen:
            s = _solve_offset(c.arc_offset, goal, alt, target, sun, reach_km * 1e3)
            if s is not None:
                options.append((round(abs(s - c.arc_offset), 3), chosen.index(c), s, c))
        if not options:
            raise InfeasibleScanError(
                f"no along-track pose of satellites {plan.selected} reaches {goal:.2f} deg")
        _, _, s, c = min(options, key=lambda o: o[:2])
        pos = orbit_position(s, alt)
        axis = unit(np.asarray(target) - pos)
        cam = replace(c, position=tuple(pos), optical_axis=tuple(axis), arc_offset=float(s))
        plan.cameras.append(cam)
        plan.angles.append(float(scattering_angle(sun, axis)))
    return plan
