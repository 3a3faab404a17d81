"""Gamma droplet size distributions, LWC conversions and retrieval error metrics.

Units follow the usual cloud-physics conventions: radii in micrometers,
number concentration per cubic meter, liquid water content (LWC) in g/m^3.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats, special

# Water density in g/um^3 (1 g/cm^3).
RHO_WATER = 1e-12

LWC_MIN = 1e-4
RE_MIN = 2.5
RE_MAX = 40.0


class DomainError(ValueError):
    """Raised when a distribution parameter is outside its mathematical domain."""


@dataclass(frozen=True)
class DropletDistribution:
    """Gamma size distribution n(r) = N C r^(1/v_e - 3) exp(-r / (r_e v_e)).

    Parameters
    ----------
    number_concentration : float
        Droplets per m^3.
    effective_radius : float
        Effective radius in micrometers.
    effective_variance : float
        Unitless, strictly inside (0, 0.5).
    """

    number_concentration: float
    effective_radius: float
    effective_variance: float = 0.1

    def __post_init__(self):
        if not np.isfinite(self.number_concentration) or self.number_concentration < 0:
            raise DomainError(f"number concentration must be >= 0, got {self.number_concentration}")
        if not self.effective_radius > 0:
            raise DomainError(f"effective radius must be > 0, got {self.effective_radius}")
        if not 0 < self.effective_variance < 0.5:
            raise DomainError(
                f"effective variance must lie in (0, 0.5), got {self.effective_variance}")

    @property
    def shape(self) -> float:
        """Gamma shape parameter 1/v_e - 2 of the number distribution."""
        return 1.0 / self.effective_variance - 2.0

    @property
    def scale(self) -> float:
        """Gamma scale parameter r_e v_e in micrometers."""
        return self.effective_radius * self.effective_variance

    def support(self, tail: float = 1e-9, max_power: int = 3) -> tuple[float, float]:
        """Radius interval holding all but ``tail`` of the r^0..r^max_power moments."""
        from scipy.stats import gamma

        lo = gamma.ppf(tail, self.shape) * self.scale
        hi = gamma.isf(tail, self.shape + max_power) * self.scale
        return float(lo), float(hi)


def gamma_density(dist: DropletDistribution, r):
    """Number density per micrometer per m^3 at radius ``r`` (micrometers)."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise DomainError("radius must be non-negative")
    k = dist.shape
    theta = dist.scale
    with np.errstate(divide="ignore", over="ignore", under="ignore"):
        # log-space keeps C finite for narrow distributions where Gamma(k) overflows
        log_c = -k * np.log(theta) - special.gammaln(k)
        log_n = log_c + (k - 1.0) * np.log(r) - r / theta
        out = dist.number_concentration * np.exp(log_n)
    return np.where(r > 0, out, 0.0)


def _moment(dist: DropletDistribution, p: int) -> float:
    # <r^p> of the number distribution, closed form for a gamma law
    k = dist.shape
    return dist.scale ** p * float(np.prod(k + np.arange(p)))


def lwc_of(dist: DropletDistribution) -> float:
    """Liquid water content in g/m^3 from the closed-form third moment."""
    return 4.0 / 3.0 * np.pi * RHO_WATER * dist.number_concentration * _moment(dist, 3)


def number_concentration(lwc, r_e, v_e=0.1):
    """Droplet number concentration (per m^3) holding ``lwc`` g/m^3 at (r_e, v_e)."""
    lwc = np.asarray(lwc, dtype=float)
    r_e = np.asarray(r_e, dtype=float)
    if np.any(r_e <= 0):
        raise DomainError("effective radius must be > 0")
    if np.any(lwc < 0):
        raise DomainError("LWC must be >= 0")
    if not 0 < v_e < 0.5:
        raise DomainError(f"effective variance must lie in (0, 0.5), got {v_e}")
    k = 1.0 / v_e - 2.0
    m3 = (r_e * v_e) ** 3 * k * (k + 1) * (k + 2)
    out = lwc / (4.0 / 3.0 * np.pi * RHO_WATER * m3)
    return out if out.ndim else float(out)


def effective_moments(r, n) -> tuple[float, float]:
    """Area-weighted effective radius and variance of a tabulated density.

    ``r`` is the radius grid and ``n`` the density at those radii; integrals use
    the trapezoid rule, so a single non-zero sample acts as a monodisperse spike.
    """
    r = np.asarray(r, dtype=float)
    n = np.asarray(n, dtype=float)
    if r.shape != n.shape or r.ndim != 1:
        raise ValueError("r and n must be 1-D arrays of equal length")
    if np.any(n < 0):
        raise ValueError("density must be non-negative")
    w = np.zeros_like(r)
    if r.size > 1:
        dr = np.diff(r)
        w[:-1] += 0.5 * dr
        w[1:] += 0.5 * dr
    else:
        w[:] = 1.0
    area = np.sum(w * r ** 2 * n)
    if area <= 0:
        raise DomainError("degenerate distribution: zero cross-sectional area")
    r_e = np.sum(w * r ** 3 * n) / area
    v_e = np.sum(w * (r - r_e) ** 2 * r ** 2 * n) / (r_e ** 2 * area)
    return float(r_e), float(v_e)


def quadrature_moments(dist: DropletDistribution) -> dict:
    """N, LWC, r_e and v_e of ``dist`` by adaptive quadrature of the density.

    Independent of the closed-form moments; used to validate them.
    """
    # far tail of the r^3-weighted density, itself a gamma law with shape k + 3
    upper = float(stats.gamma.isf(1e-13, dist.shape + 3, scale=dist.scale))

    def quad(f):
        val, _ = integrate.quad(f, 0.0, upper, epsabs=0.0, epsrel=1e-10, limit=200,
                                points=[dist.scale * (dist.shape - 1)] if dist.shape > 1 else None)
        return val

    n0 = quad(lambda r: gamma_density(dist, r))
    a2 = quad(lambda r: r ** 2 * gamma_density(dist, r))
    a3 = quad(lambda r: r ** 3 * gamma_density(dist, r))
    r_e = a3 / a2
    v_e = quad(lambda r: (r - r_e) ** 2 * r ** 2 * gamma_density(dist, r)) / (r_e ** 2 * a2)
    # beyond the integration window the r^3 moment must be negligible
    tail, _ = integrate.quad(lambda r: r ** 3 * gamma_density(dist, r), upper, np.inf)
    if a3 > 0 and tail / a3 > 1e-6:
        raise DomainError(f"quadrature window too short: tail fraction {tail / a3:.2e}")
    return {
        "N": n0,
        "lwc": 4.0 / 3.0 * np.pi * RHO_WATER * a3,
        "r_e": r_e,
        "v_e": v_e,
    }


@dataclass
class VoxelCloud:
    """Voxel grid of LWC (g/m^3) and effective radius (um) with a cloud mask.

    Axis order is (x=North, y=East, z=Up). The grid is centred horizontally on
    the origin; ``base_height`` is the altitude of the bottom grid face.
    """

    lwc: np.ndarray
    r_e: np.ndarray
    mask: np.ndarray
    voxel_size: tuple = (20.0, 20.0, 20.0)
    base_height: float = 0.0
    v_e: float = 0.1
    re_min: float = field(default=RE_MIN, repr=False)
    re_max: float = field(default=RE_MAX, repr=False)

    def __post_init__(self):
        self.lwc = np.asarray(self.lwc, dtype=float)
        self.r_e = np.asarray(self.r_e, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.voxel_size = tuple(float(v) for v in np.broadcast_to(self.voxel_size, (3,)))
        if not (self.lwc.shape == self.r_e.shape == self.mask.shape) or self.lwc.ndim != 3:
            raise ValueError("lwc, r_e and mask must be 3-D grids of identical shape")
        if min(self.voxel_size) <= 0:
            raise ValueError("voxel size must be positive")
        if not 0 < self.v_e < 0.5:
            raise DomainError(f"effective variance must lie in (0, 0.5), got {self.v_e}")
        self.validate()

    def validate(self):
        if not np.all(np.isfinite(self.lwc)) or not np.all(np.isfinite(self.r_e)):
            raise ValueError("cloud fields must be finite")
        if np.any(self.lwc < 0):
            raise ValueError("LWC must be non-negative")
        if np.any(self.lwc[~self.mask] != 0):
            raise ValueError("LWC must vanish outside the mask")
        inside = self.r_e[self.mask]
        if inside.size and (inside.min() < self.re_min - 1e-12 or inside.max() > self.re_max + 1e-12):
            raise ValueError(
                f"r_e inside the mask must lie in [{self.re_min}, {self.re_max}] um")

    @property
    def shape(self) -> tuple:
        return self.lwc.shape

    @property
    def bounds(self) -> np.ndarray:
        """(3, 2) array of grid bounds in meters."""
        n = np.array(self.shape, dtype=float)
        d = np.array(self.voxel_size)
        lo = np.array([-0.5 * n[0] * d[0], -0.5 * n[1] * d[1], self.base_height])
        return np.stack([lo, lo + n * d], axis=1)

    def centers(self, axis: int) -> np.ndarray:
        lo = self.bounds[axis, 0]
        d = self.voxel_size[axis]
        return lo + (np.arange(self.shape[axis]) + 0.5) * d

    @property
    def altitudes(self) -> np.ndarray:
        """Voxel-centre altitudes along z, meters."""
        return self.centers(2)

    @property
    def center(self) -> np.ndarray:
        return self.bounds.mean(axis=1)

    def with_fields(self, lwc=None, r_e=None) -> "VoxelCloud":
        return VoxelCloud(
            lwc=self.lwc if lwc is None else lwc,
            r_e=self.r_e if r_e is None else r_e,
            mask=self.mask, voxel_size=self.voxel_size, base_height=self.base_height,
            v_e=self.v_e, re_min=self.re_min, re_max=self.re_max)

    def scaled(self, k: float) -> "VoxelCloud":
        return self.with_fields(lwc=self.lwc * k)


@dataclass(frozen=True)
class ErrorReport:
    eps_lwc: float
    eps_re: float


def epsilon_errors(estimate: VoxelCloud, truth: VoxelCloud) -> ErrorReport:
    """Relative L1 errors of LWC and r_e over the union of both masks."""
    if estimate.shape != truth.shape:
        raise ValueError(f"grid shapes differ: {estimate.shape} vs {truth.shape}")
    support = estimate.mask | truth.mask

    def eps(est, ref):
        den = np.abs(ref[support]).sum()
        if den == 0:
            raise ZeroDivisionError("ground-truth field is identically zero on the support")
        return float(np.abs(est[support] - ref[support]).sum() / den)

    re_est = np.where(estimate.mask, estimate.r_e, 0.0)
    re_true = np.where(truth.mask, truth.r_e, 0.0)
    return ErrorReport(eps(estimate.lwc, truth.lwc), eps(re_est, re_true))
