"""Lorenz-Mie scattering and gamma-averaged bulk optical properties.

Phase matrices follow the Bohren & Huffman sign convention: for unpolarized
incident light the scattered Stokes vector in the scattering-plane frame is
proportional to [P11, P12, 0], and P12 < 0 means polarization perpendicular
to the scattering plane.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special, stats
from scipy.interpolate import CubicSpline

from .microphysics import DropletDistribution, RHO_WATER, gamma_density

WATER_INDEX_645 = complex(1.331, 1.64e-8)
TABLE_VERSION = 1


class ConvergenceError(RuntimeError):
    pass


class QuadratureError(RuntimeError):
    pass


def n_terms(x) -> np.ndarray:
    """Wiscombe truncation order x + 4.05 x^(1/3) + 2."""
    x = np.asarray(x, dtype=float)
    return np.floor(x + 4.05 * np.cbrt(x) + 2.0).astype(int)


@dataclass
class MieResult:
    size_parameter: float
    q_ext: float
    q_sca: float
    angles: np.ndarray
    s1: np.ndarray
    s2: np.ndarray

    @property
    def q_back(self):
        return self.q_ext - self.q_sca


def _pi_tau(mu: np.ndarray, nmax: int) -> tuple[np.ndarray, np.ndarray]:
    """Angular functions pi_n(mu), tau_n(mu) for n = 1..nmax, shape (nmax, len(mu))."""
    pi = np.zeros((nmax + 1, mu.size))
    tau = np.zeros((nmax + 1, mu.size))
    if nmax == 0:
        return pi[1:], tau[1:]
    pi[1] = 1.0
    for n in range(2, nmax + 1):
        pi[n] = ((2 * n - 1) * mu * pi[n - 1] - n * pi[n - 2]) / (n - 1)
    n = np.arange(1, nmax + 1)[:, None]
    tau[1:] = n * mu * pi[1:] - (n + 1) * pi[:-1]
    return pi[1:], tau[1:]


def mie_coefficients(x: np.ndarray, m: complex, nmax: int | None = None):
    """Mie coefficients a_n, b_n for an array of size parameters.

    Returns complex arrays of shape (len(x), nmax); terms past each size
    parameter's own truncation order are zero unless ``nmax`` forces more.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(x <= 0):
        raise ValueError("size parameter must be positive")
    own = n_terms(x) if nmax is None else np.full(x.shape, int(nmax))
    ntot = int(own.max())
    z = m * x
    # logarithmic derivative D_n(mx) by downward recurrence from well above ntot
    nstart = int(1.1 * max(ntot, np.abs(z).max()) + 32)
    d = np.zeros((x.size, nstart + 1), dtype=complex)
    for n in range(nstart, 0, -1):
        d[:, n - 1] = n / z - 1.0 / (d[:, n] + n / z)
    d = d[:, 1:ntot + 1]

    orders = np.arange(0, ntot + 1)
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        jn = special.spherical_jn(orders[None, :], x[:, None])
        yn = special.spherical_yn(orders[None, :], x[:, None])
        psi = x[:, None] * jn
        xi = psi + 1j * x[:, None] * yn
        n = orders[None, 1:]
        xs = x[:, None]
        ta = d / m + n / xs
        tb = m * d + n / xs
        a = (ta * psi[:, 1:] - psi[:, :-1]) / (ta * xi[:, 1:] - xi[:, :-1])
        b = (tb * psi[:, 1:] - psi[:, :-1]) / (tb * xi[:, 1:] - xi[:, :-1])
    keep = n <= own[:, None]
    a = np.where(keep & np.isfinite(a), a, 0.0)
    b = np.where(keep & np.isfinite(b), b, 0.0)
    return a, b


def _efficiencies(x, a, b):
    n = np.arange(1, a.shape[1] + 1)
    w = 2 * n + 1
    q_ext = 2.0 / x ** 2 * np.sum(w * (a.real + b.real), axis=1)
    q_sca = 2.0 / x ** 2 * np.sum(w * (np.abs(a) ** 2 + np.abs(b) ** 2), axis=1)
    return q_ext, q_sca


def _amplitudes(a, b, pi, tau):
    n = np.arange(1, a.shape[1] + 1)
    f = (2 * n + 1) / (n * (n + 1.0))
    s1 = (a * f) @ pi + (b * f) @ tau
    s2 = (a * f) @ tau + (b * f) @ pi
    return s1, s2


def mie_single(x: float, m: complex, angles, nmax: int | None = None) -> MieResult:
    """Efficiencies and amplitude functions for one homogeneous sphere.

    ``angles`` are scattering angles in degrees.
    """
    if not x > 0:
        raise ValueError("size parameter must be positive")
    angles = np.atleast_1d(np.asarray(angles, dtype=float))
    n_used = int(n_terms(x)) if nmax is None else int(nmax)
    # a few extra orders past the truncation show whether the series has decayed;
    # isolated narrow resonances just beyond the truncation stay well below 1e-4
    a, b = mie_coefficients(np.array([x]), m, n_used + 8)
    w = 2 * np.arange(1, n_used + 9) + 1
    terms = w * (np.abs(a[0]) + np.abs(b[0]))
    tail = terms[n_used:].sum() / max(np.abs(np.sum(w[:n_used] * (a[0, :n_used] + b[0, :n_used]))), 1e-300)
    if tail > 1e-4:
        raise ConvergenceError(f"Mie series did not converge at x={x} (tail {tail:.2e})")
    a, b = a[:, :n_used], b[:, :n_used]
    q_ext, q_sca = _efficiencies(np.array([x]), a, b)
    pi, tau = _pi_tau(np.cos(np.deg2rad(angles)), n_used)
    s1, s2 = _amplitudes(a, b, pi, tau)
    return MieResult(float(x), float(q_ext[0]), float(q_sca[0]), angles, s1[0], s2[0])


def scattering_matrix_elements(s1, s2):
    """S11, S12, S33, S34 from amplitude functions."""
    s11 = 0.5 * (np.abs(s1) ** 2 + np.abs(s2) ** 2)
    s12 = 0.5 * (np.abs(s2) ** 2 - np.abs(s1) ** 2)
    s33 = (s2 * np.conj(s1)).real
    s34 = (s2 * np.conj(s1)).imag
    return np.stack([s11, s12, s33, s34], axis=-1)


@dataclass
class _RadiusMie:
    """Mie quantities on a radius grid (one wavelength)."""

    radii: np.ndarray
    k: float
    c_ext: np.ndarray          # um^2
    c_sca: np.ndarray          # um^2
    s: np.ndarray              # (n_radius, n_angle, 4) scattering-matrix elements


def _mie_on_radii(radii, wavelength_nm, m, angles, chunk=32) -> _RadiusMie:
    radii = np.asarray(radii, dtype=float)
    k = 2.0 * np.pi / (wavelength_nm * 1e-3)   # 1/um
    x = k * radii
    mu = np.cos(np.deg2rad(np.asarray(angles, dtype=float)))
    nmax = int(n_terms(x.max()))
    pi, tau = _pi_tau(mu, nmax)
    c_ext = np.empty(x.size)
    c_sca = np.empty(x.size)
    s = np.empty((x.size, mu.size, 4))
    order = np.argsort(x)
    for start in range(0, x.size, chunk):
        idx = order[start:start + chunk]
        a, b = mie_coefficients(x[idx], m)
        nn = a.shape[1]
        q_ext, q_sca = _efficiencies(x[idx], a, b)
        geo = np.pi * radii[idx] ** 2
        c_ext[idx] = q_ext * geo
        c_sca[idx] = q_sca * geo
        s1, s2 = _amplitudes(a, b, pi[:nn], tau[:nn])
        s[idx] = scattering_matrix_elements(s1, s2)
    return _RadiusMie(radii, k, c_ext, c_sca, s)


def log_radius_grid(dist: DropletDistribution, n: int = 256) -> np.ndarray:
    lo, hi = dist.support()
    return np.geomspace(max(lo, 1e-3), hi, n)


def _log_trapezoid_weights(radii):
    # trapezoid in ln r: integral f dr = integral f r dln r
    u = np.log(radii)
    w = np.zeros_like(u)
    du = np.diff(u)
    w[:-1] += 0.5 * du
    w[1:] += 0.5 * du
    return w * radii


def _gamma_weights(dist: DropletDistribution, radii):
    unit = DropletDistribution(1.0, dist.effective_radius, dist.effective_variance)
    w = _log_trapezoid_weights(radii) * gamma_density(unit, radii)
    # r^3-weighted mass outside the grid must be negligible
    k, th = unit.shape, unit.scale
    outside = stats.gamma.cdf(radii[0] / th, k + 3) + stats.gamma.sf(radii[-1] / th, k + 3)
    if outside > 1e-4:
        raise QuadratureError(
            f"radius grid misses {outside:.2e} of the r^3 moment for r_e={dist.effective_radius}")
    return w


@dataclass
class BulkOptics:
    """Gamma-averaged optical properties of one (r_e, v_e) node."""

    effective_radius: float
    effective_variance: float
    wavelength: float
    mass_extinction: float       # m^2/g
    single_scatter_albedo: float
    angles: np.ndarray           # degrees
    phase: np.ndarray            # (n_angle, 4): P11, P12, P33, P34


def _bulk_from_mie(mie: _RadiusMie, weights, r_e, v_e, wavelength, angles) -> BulkOptics:
    ext = weights @ mie.c_ext
    sca = weights @ mie.c_sca
    vol = 4.0 / 3.0 * np.pi * (weights @ mie.radii ** 3)
    # c [um^2] * 1e-12 -> m^2 ; rho_w volume [um^3] * 1e-12 g/um^3 -> g
    mass_ext = ext * 1e-12 / (RHO_WATER * vol)
    phase = 4.0 * np.pi * np.einsum("r,rak->ak", weights, mie.s) / (mie.k ** 2 * sca)
    return BulkOptics(r_e, v_e, wavelength, float(mass_ext), float(sca / ext),
                      np.asarray(angles, dtype=float), phase)


def bulk_from_distribution(dist: DropletDistribution, wavelength_nm: float = 645.0,
                           m: complex = WATER_INDEX_645, angles=None,
                           radii=None) -> BulkOptics:
    """Mass extinction, albedo and phase matrix averaged over a gamma law.

    The radius integral uses ``radii`` (default: 256 log-spaced nodes over the
    distribution support) with trapezoid weights in ln r.
    """
    if angles is None:
        angles = np.linspace(0.0, 180.0, 721)
    radii = log_radius_grid(dist) if radii is None else np.asarray(radii, dtype=float)
    weights = _gamma_weights(dist, radii)
    mie = _mie_on_radii(radii, wavelength_nm, m, angles)
    return _bulk_from_mie(mie, weights, dist.effective_radius, dist.effective_variance,
                          wavelength_nm, angles)


def rayleigh_phase(theta_deg) -> np.ndarray:
    """Rayleigh phase matrix elements (P11, P12, P33, P34), zero depolarization."""
    c = np.cos(np.deg2rad(np.asarray(theta_deg, dtype=float)))
    p11 = 0.75 * (1 + c ** 2)
    p12 = -0.75 * (1 - c ** 2)
    p33 = 1.5 * c
    return np.stack([p11, p12, p33, np.zeros_like(c)], axis=-1)


def rayleigh_matrix(theta_deg) -> np.ndarray:
    """Full 4x4 Rayleigh phase matrix at one scattering angle."""
    p11, p12, p33, p34 = rayleigh_phase(theta_deg)
    return np.array([[p11, p12, 0, 0], [p12, p11, 0, 0], [0, 0, p33, p34], [0, 0, -p34, p33]])


class BulkOpticsTable:
    """Bulk optics tabulated over r_e, interpolated by cubic splines in r_e.

    Splines reproduce the node values exactly and have continuous derivatives,
    which keeps the adjoint consistent with finite differences of the forward
    model. The scattering angle is interpolated linearly by the renderer.
    """

    def __init__(self, re_axis, v_e, wavelength, angles, mass_extinction, albedo, phase,
                 refractive_index=WATER_INDEX_645):
        self.re_axis = np.asarray(re_axis, dtype=float)
        self.v_e = float(v_e)
        self.wavelength = float(wavelength)
        self.angles = np.asarray(angles, dtype=float)
        self.mass_extinction = np.asarray(mass_extinction, dtype=float)
        self.albedo = np.asarray(albedo, dtype=float)
        self.phase = np.asarray(phase, dtype=float)
        self.refractive_index = complex(refractive_index)
        self._ext = CubicSpline(self.re_axis, self.mass_extinction)
        self._alb = CubicSpline(self.re_axis, self.albedo)
        # spline coefficients of the phase table, shape (4, n_re - 1, n_angle, 4)
        self._phase_c = CubicSpline(self.re_axis, self.phase, axis=0).c

    @property
    def re_min(self):
        return float(self.re_axis[0])

    @property
    def re_max(self):
        return float(self.re_axis[-1])

    def extinction(self, r_e, derivative=False):
        r_e = np.asarray(r_e, dtype=float)
        val = self._ext(r_e)
        return (val, self._ext(r_e, 1)) if derivative else val

    def single_scatter_albedo(self, r_e, derivative=False):
        r_e = np.asarray(r_e, dtype=float)
        val = self._alb(r_e)
        return (val, self._alb(r_e, 1)) if derivative else val

    def angle_weights(self, theta_deg):
        """Linear-interpolation nodes and weights in scattering angle."""
        theta = np.clip(np.asarray(theta_deg, dtype=float), self.angles[0], self.angles[-1])
        i = np.clip(np.searchsorted(self.angles, theta, side="right") - 1, 0, self.angles.size - 2)
        t = (theta - self.angles[i]) / (self.angles[i + 1] - self.angles[i])
        return i, t

    def phase_at(self, r_e, angle_index, angle_frac, derivative=False):
        """Phase-matrix elements at matched arrays of r_e and angle nodes.

        Returns shape (n, 4), plus d/dr_e of the same shape if requested.
        """
        r_e = np.asarray(r_e, dtype=float)
        seg = np.clip(np.searchsorted(self.re_axis, r_e, side="right") - 1, 0, self.re_axis.size - 2)
        h = (r_e - self.re_axis[seg])[:, None]
        out = np.zeros((r_e.size, 4))
        dout = np.zeros((r_e.size, 4))
        for corner, wgt in ((angle_index, 1.0 - angle_frac), (angle_index + 1, angle_frac)):
            c = self._phase_c[:, seg, corner, :]          # (4, n, 4)
            val = ((c[0] * h + c[1]) * h + c[2]) * h + c[3]
            out += wgt[:, None] * val
            if derivative:
                dval = (3 * c[0] * h + 2 * c[1]) * h + c[2]
                dout += wgt[:, None] * dval
        return (out, dout) if derivative else out

    def node(self, i) -> BulkOptics:
        return BulkOptics(float(self.re_axis[i]), self.v_e, self.wavelength,
                          float(self.mass_extinction[i]), float(self.albedo[i]),
                          self.angles, self.phase[i])

    # -- persistence -------------------------------------------------------
    def _arrays(self):
        return dict(re_axis=self.re_axis, angles=self.angles,
                    mass_extinction=self.mass_extinction, albedo=self.albedo, phase=self.phase,
                    meta=np.array([self.v_e, self.wavelength, self.refractive_index.real,
                                   self.refractive_index.imag, TABLE_VERSION]))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for key, arr in sorted(self._arrays().items()):
            h.update(key.encode())
            h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
        return h.hexdigest()

    def save(self, path):
        np.savez(path, digest=np.array(self.content_hash()), **self._arrays())

    @classmethod
    def load(cls, path) -> "BulkOpticsTable":
        with np.load(path) as f:
            meta = f["meta"]
            table = cls(f["re_axis"], meta[0], meta[1], f["angles"], f["mass_extinction"],
                        f["albedo"], f["phase"], complex(meta[2], meta[3]))
            digest = str(f["digest"])
        if digest != table.content_hash():
            raise ValueError(f"optics cache {path} failed its content hash check")
        return table


def build_table(band_center: float = 645.0, v_e: float = 0.1, re_axis=None, angles=None,
                m: complex = WATER_INDEX_645, nodes_per_support: int = 256) -> BulkOpticsTable:
    """Tabulate bulk optics over ``re_axis`` (default 2.5..40 um step 0.25).

    Mie quantities are computed once on a shared log-radius grid whose node
    density gives every r_e node ``nodes_per_support`` nodes across its support.
    """
    re_axis = np.arange(2.5, 40.0 + 1e-9, 0.25) if re_axis is None else np.asarray(re_axis, float)
    angles = np.linspace(0.0, 180.0, 721) if angles is None else np.asarray(angles, float)
    radii = shared_radius_grid(re_axis, v_e, nodes_per_support)
    mie = _mie_on_radii(radii, band_center, m, angles)
    ext, alb, phase = [], [], []
    for r_e in re_axis:
        dist = DropletDistribution(1.0, float(r_e), v_e)
        bulk = _bulk_from_mie(mie, _gamma_weights(dist, radii), r_e, v_e, band_center, angles)
        ext.append(bulk.mass_extinction)
        alb.append(bulk.single_scatter_albedo)
        phase.append(bulk.phase)
    return BulkOpticsTable(re_axis, v_e, band_center, angles, ext, alb, np.array(phase), m)


def shared_radius_grid(re_axis, v_e, nodes_per_support=256):
    first = DropletDistribution(1.0, float(np.min(re_axis)), v_e).support()
    last = DropletDistribution(1.0, float(np.max(re_axis)), v_e).support()
    density = (nodes_per_support - 1) / np.log(first[1] / first[0])
    n = int(np.ceil(np.log(last[1] / first[0]) * density)) + 1
    return np.geomspace(first[0], last[1], n)


def cache_dir() -> Path:
    root = os.environ.get("CLOUDTOMO_CACHE") or os.path.join(
        os.environ.get("XDG_CACHE_HOME", os.path.expanduser("~/.cache")), "cloudtomo")
    return Path(root)


def cached_table(band_center=645.0, v_e=0.1, re_axis=None, angles=None,
                 m: complex = WATER_INDEX_645, directory=None) -> BulkOpticsTable:
    """Load a table from the on-disk cache, rebuilding it if missing or corrupt."""
    re_axis = np.arange(2.5, 40.0 + 1e-9, 0.25) if re_axis is None else np.asarray(re_axis, float)
    angles = np.linspace(0.0, 180.0, 721) if angles is None else np.asarray(angles, float)
    key = hashlib.sha256(np.concatenate([
        [band_center, v_e, m.real, m.imag, TABLE_VERSION], re_axis, angles]).tobytes()).hexdigest()[:16]
    directory = cache_dir() if directory is None else Path(directory)
    path = directory / f"optics_{key}.npz"
    if path.exists():
        try:
            return BulkOpticsTable.load(path)
        except (ValueError, OSError, KeyError):
            pass
    table = build_table(band_center, v_e, re_axis, angles, m)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp.npz")
        table.save(tmp)
        os.replace(tmp, path)
    except OSError:
        pass
    return table
