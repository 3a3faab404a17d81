"""Single-scattering vector radiative transfer through a voxel cloud.

Each pixel ray is traversed voxel by voxel. Inside every voxel the ray is
split wherever the sun path from a point on it crosses a voxel face, so the
sun-path optical depth is linear on each sub-segment and the scattering
integral is a closed-form exponential. For piecewise-constant media the
result is exact up to the phase-table interpolation. All optical depths are sparse linear maps of the voxel
extinction, which makes the adjoint a handful of transposed products.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy import sparse

from .geometry import Camera, meridian_frame, pixel_rays, scattering_angle
from .microphysics import VoxelCloud
from .optics import BulkOpticsTable, rayleigh_phase

FOUR_PI = 4.0 * np.pi


@dataclass
class StokesImage:
    """Linear Stokes components [I, Q, U] in the meridian frame, W/(m^2 sr nm)."""

    I: np.ndarray
    Q: np.ndarray
    U: np.ndarray

    @property
    def shape(self):
        return self.I.shape

    def stack(self) -> np.ndarray:
        return np.stack([self.I, self.Q, self.U])

    @classmethod
    def from_stack(cls, arr) -> "StokesImage":
        arr = np.asarray(arr, dtype=float)
        return cls(arr[0].copy(), arr[1].copy(), arr[2].copy())

    @classmethod
    def zeros(cls, shape) -> "StokesImage":
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape))

    def dolp(self, floor: float = 0.0) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.hypot(self.Q, self.U) / self.I
        return np.where(self.I > floor, d, 0.0)

    def scaled(self, k: float) -> "StokesImage":
        return StokesImage(self.I * k, self.Q * k, self.U * k)


class ForwardModel(Protocol):
    """Anything that turns a cloud into Stokes images and their parameter gradients."""

    def render(self, cloud: VoxelCloud, optics: BulkOpticsTable, camera: Camera,
               sun: np.ndarray) -> StokesImage: ...

    def render_with_gradient(self, cloud: VoxelCloud, optics: BulkOpticsTable, camera: Camera,
                             sun: np.ndarray, adjoint: StokesImage
                             ) -> tuple[StokesImage, np.ndarray, np.ndarray]: ...


# -- voxel traversal ---------------------------------------------------------

def traverse(origins, dirs, bounds, shape, t_limit=None):
    """Exact voxel traversal of many rays through an axis-aligned grid.

    Returns (ray, flat_voxel, t_in, t_out) arrays ordered by ray, then by
    distance along the ray. ``t_limit`` optionally caps each ray length.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=float))
    d = np.atleast_2d(np.asarray(dirs, dtype=float))
    o, d = np.broadcast_arrays(o, d)
    n = np.asarray(shape)
    lo, hi = bounds[:, 0], bounds[:, 1]
    vox = (hi - lo) / n
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    tn = np.minimum(t1, t2)
    tf = np.maximum(t1, t2)
    parallel = d == 0
    inside = (o >= lo) & (o <= hi)
    tn = np.where(parallel, np.where(inside, -np.inf, np.inf), tn)
    tf = np.where(parallel, np.where(inside, np.inf, -np.inf), tf)
    t0 = np.maximum(tn.max(axis=1), 0.0)
    t1 = tf.min(axis=1)
    if t_limit is not None:
        t1 = np.minimum(t1, t_limit)
    rays = np.flatnonzero(t1 > t0)
    empty = np.array([], dtype=int)
    if rays.size == 0:
        return empty, empty, np.array([]), np.array([])

    o, d, t, tmax = o[rays], d[rays], t0[rays], t1[rays]
    p = o + t[:, None] * d
    rel = (p - lo) / vox
    idx = np.floor(rel).astype(int)
    on_face = (rel == idx) & (d < 0)
    idx = np.clip(idx - on_face, 0, n - 1)
    step = np.sign(d).astype(int)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_next = np.where(d != 0, (lo + (idx + (step > 0)) * vox - o) / d, np.inf)
        t_delta = np.where(d != 0, vox / np.abs(d), np.inf)
    nyz = n[1] * n[2]
    out_ray, out_vox, out_in, out_out, out_k = [], [], [], [], []
    active = np.arange(rays.size)
    k = 0
    while active.size:
        tn_ = t_next[active]
        axis = np.argmin(tn_, axis=1)
        t_exit = np.minimum(tn_[np.arange(active.size), axis], tmax[active])
        ii = idx[active]
        out_ray.append(rays[active])
        out_vox.append(ii[:, 0] * nyz + ii[:, 1] * n[2] + ii[:, 2])
        out_in.append(t[active])
        out_out.append(t_exit)
        out_k.append(np.full(active.size, k))
        t[active] = t_exit
        idx[active, axis] += step[active, axis]
        t_next[active, axis] += t_delta[active, axis]
        ii = idx[active]
        keep = (t_exit < tmax[active]) & np.all((ii >= 0) & (ii < n), axis=1)
        active = active[keep]
        k += 1
    ray = np.concatenate(out_ray)
    vox_ = np.concatenate(out_vox)
    tin = np.concatenate(out_in)
    tout = np.concatenate(out_out)
    order = np.lexsort((np.concatenate(out_k), ray))
    ray, vox_, tin, tout = ray[order], vox_[order], tin[order], tout[order]
    keep = tout > tin
    return ray[keep], vox_[keep], tin[keep], tout[keep]


def optical_depth(cloud: VoxelCloud, optics: BulkOpticsTable, start, end) -> float:
    """Cloud optical depth along the straight segment from ``start`` to ``end``."""
    start = np.asarray(start, dtype=float)
    seg = np.asarray(end, dtype=float) - start
    length = np.linalg.norm(seg)
    if length == 0:
        return 0.0
    ray, vox, tin, tout = traverse(start, seg / length, cloud.bounds, cloud.shape, t_limit=length)
    beta = extinction_field(cloud, optics).ravel()
    return float(np.sum(beta[vox] * (tout - tin)))


def extinction_field(cloud: VoxelCloud, optics: BulkOpticsTable) -> np.ndarray:
    """Cloud extinction coefficient (1/m) per voxel."""
    beta = np.zeros(cloud.shape)
    m = cloud.mask
    r = np.clip(cloud.r_e[m], optics.re_min, optics.re_max)
    beta[m] = cloud.lwc[m] * optics.extinction(r)
    return beta


# -- prepared view geometry --------------------------------------------------

def _phi(x):
    # (1 - exp(-x)) / x and its derivative, stable near 0
    small = np.abs(x) < 1e-4
    xs = np.where(small, 1.0, x)
    f = np.where(small, 1 - x / 2 + x ** 2 / 6 - x ** 3 / 24, -np.expm1(-xs) / xs)
    df = np.where(small, -0.5 + x / 3 - x ** 2 / 8 + x ** 3 / 30,
                  (np.exp(-xs) * (1 + xs) - 1) / xs ** 2)
    return f, df


@dataclass
class ViewGeometry:
    """Cloud-independent rendering data of one camera over one active voxel set."""

    shape: tuple                 # image shape (rows, cols)
    active: np.ndarray           # flat indices of voxels that may scatter
    n_active: int
    # per sub-ray
    ray_pixel: np.ndarray
    ray_weight: np.ndarray
    cos2chi: np.ndarray
    sin2chi: np.ndarray
    theta: np.ndarray
    # per sub-segment
    sub_ray: np.ndarray
    sub_seg: np.ndarray
    sub_vox: np.ndarray          # index into the active list
    sub_len: np.ndarray
    sub_pre: np.ndarray          # in-voxel camera-path length before the sub-segment
    angle_index: np.ndarray
    angle_frac: np.ndarray
    node0: np.ndarray
    node1: np.ndarray
    seg_matrix: sparse.csr_matrix    # camera-path depth at voxel-segment starts
    node_matrix: sparse.csr_matrix   # sun-path depth at sub-segment nodes


def prepare_view(bounds, grid_shape, active_mask, camera: Camera, sun, optics: BulkOpticsTable,
                 substeps: int = 1, supersample: int = 1) -> ViewGeometry:
    """Trace all pixel and sun rays for one camera against a fixed active voxel set."""
    sun = np.asarray(sun, dtype=float)
    if sun[2] <= 0:
        raise ValueError("the sun must be above the horizon")
    active_mask = np.asarray(active_mask, dtype=bool)
    active = np.flatnonzero(active_mask.ravel())
    lookup = np.full(active_mask.size, -1)
    lookup[active] = np.arange(active.size)

    rays, origin = _subpixel_rays(camera, supersample)
    rows, cols = camera.resolution[1], camera.resolution[0]
    nsub_ray = supersample * supersample
    ray_pixel = np.repeat(np.arange(rows * cols), nsub_ray)
    ray_weight = np.full(ray_pixel.size, 1.0 / nsub_ray)
    dirs = rays.reshape(-1, 3)

    theta = scattering_angle(sun, dirs)
    cos2chi, sin2chi = _rotation_to_meridian(sun, dirs)

    ray, vox, tin, tout = traverse(origin, dirs, bounds, grid_shape)
    av = lookup[vox]
    keep = av >= 0
    seg_ray, seg_vox, seg_in, seg_out = ray[keep], av[keep], tin[keep], tout[keep]
    nseg = seg_ray.size

    # camera-path depth at each segment start: all earlier active segments of the ray
    rows_, cols_, vals_ = [], [], []
    lag = 1
    while True:
        same = np.flatnonzero(seg_ray[lag:] == seg_ray[:-lag]) if lag < nseg else np.array([], int)
        if same.size == 0:
            break
        rows_.append(same + lag)
        cols_.append(seg_vox[same])
        vals_.append(seg_out[same] - seg_in[same])
        lag += 1
    seg_matrix = sparse.csr_matrix(
        (np.concatenate(vals_) if vals_ else np.array([]),
         (np.concatenate(rows_) if rows_ else np.array([], int),
          np.concatenate(cols_) if cols_ else np.array([], int))),
        shape=(nseg, active.size))

    # nodes: segment ends, optional uniform splits and every point whose sun ray
    # grazes a grid edge; between nodes the sun-path depth is exactly linear
    ns = max(int(substeps), 1)
    seg_len = seg_out - seg_in
    frac = np.arange(ns + 1) / ns
    node_seg = [np.repeat(np.arange(nseg), ns + 1)]
    node_t = [(seg_in[:, None] + frac[None, :] * seg_len[:, None]).ravel()]
    ks, kt = _sun_kinks(origin, dirs[seg_ray], seg_in, seg_out, sun, bounds, grid_shape, active_mask)
    node_seg.append(ks)
    node_t.append(np.clip(kt, seg_in[ks], seg_out[ks]))
    node_seg = np.concatenate(node_seg)
    node_t = np.concatenate(node_t)
    order = np.lexsort((node_t, node_seg))
    node_seg, node_t = node_seg[order], node_t[order]
    tol = 1e-6 * np.min((bounds[:, 1] - bounds[:, 0]) / np.asarray(grid_shape))

    # end nodes sit a hair inside the voxel: a sun ray lying in a voxel face
    # would otherwise pick the neighbour's chord
    inset = np.minimum(tol, 0.25 * seg_len)[node_seg]
    t_eval = np.clip(node_t, seg_in[node_seg] + inset, seg_out[node_seg] - inset)
    node_pos = origin + t_eval[:, None] * dirs[seg_ray[node_seg]]
    nray, nvox, nin, nout = traverse(node_pos, sun, bounds, grid_shape)
    nav = lookup[nvox]
    k = nav >= 0
    node_matrix = sparse.csr_matrix((nout[k] - nin[k], (nray[k], nav[k])),
                                    shape=(node_t.size, active.size))

    # sub-segments between consecutive nodes; near-coincident nodes leave
    # slivers shorter than tol which are dropped
    node0 = np.flatnonzero((node_seg[1:] == node_seg[:-1]) & (np.diff(node_t) > tol))
    sub_seg = node_seg[node0]
    sub_len = node_t[node0 + 1] - node_t[node0]
    sub_pre = node_t[node0] - seg_in[sub_seg]
    sub_ray = seg_ray[sub_seg]
    ai, af = optics.angle_weights(theta[sub_ray])
    return ViewGeometry(
        shape=(rows, cols), active=active, n_active=active.size,
        ray_pixel=ray_pixel, ray_weight=ray_weight, cos2chi=cos2chi, sin2chi=sin2chi,
        theta=theta, sub_ray=sub_ray, sub_seg=sub_seg, sub_vox=seg_vox[sub_seg],
        sub_len=sub_len, sub_pre=sub_pre, angle_index=ai, angle_frac=af,
        node0=node0, node1=node0 + 1, seg_matrix=seg_matrix, node_matrix=node_matrix)


def _sun_kinks(origin, dirs, seg_in, seg_out, sun, bounds, grid_shape, active_mask):
    """Points on camera segments whose sun ray passes through a grid edge.

    For each pair of axes (a, b) the sun ray from p(t) meets plane a = X_i at
    s = (X_i - p_a) / sun_a; a kink occurs where it meets plane b = Y_j at the
    same s. Only edges bordering an active voxel are kept. Returns
    (segment index, t) arrays.
    """
    n = np.asarray(grid_shape)
    lo = bounds[:, 0]
    vox = (bounds[:, 1] - bounds[:, 0]) / n
    pad = np.pad(np.asarray(active_mask, bool), 1)
    p0 = origin + seg_in[:, None] * dirs
    p1 = origin + seg_out[:, None] * dirs
    out_seg, out_t = [], []
    for c in range(3):
        a, b = [ax for ax in range(3) if ax != c]
        if abs(sun[a]) < abs(sun[b]):
            a, b = b, a
        if abs(sun[a]) < 1e-12:
            continue                    # sun ray parallel to the edge direction
        planes = lo[a] + np.arange(n[a] + 1) * vox[a]
        s0 = (planes[None, :] - p0[:, a, None]) / sun[a]          # (nseg, n_a+1)
        s1 = (planes[None, :] - p1[:, a, None]) / sun[a]
        y0 = p0[:, b, None] + s0 * sun[b]
        y1 = p1[:, b, None] + s1 * sun[b]
        jlo = np.ceil((np.minimum(y0, y1) - lo[b]) / vox[b]).astype(int)
        jhi = np.floor((np.maximum(y0, y1) - lo[b]) / vox[b]).astype(int)
        jlo = np.maximum(jlo, 0)
        jhi = np.minimum(jhi, n[b])
        cnt = np.maximum(jhi - jlo + 1, 0)
        # drop segment/plane pairs entirely behind the sun direction
        cnt = np.where((s0 < 0) & (s1 < 0), 0, cnt)
        seg, i = np.nonzero(cnt)
        reps = cnt[seg, i]
        seg = np.repeat(seg, reps)
        i = np.repeat(i, reps)
        first = np.repeat(np.cumsum(reps) - reps, reps)
        j = np.repeat(jlo[np.nonzero(cnt)], reps) + np.arange(reps.sum()) - first
        ya, yb = y0[seg, i], y1[seg, i]
        dy = yb - ya
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = np.where(dy != 0, (lo[b] + j * vox[b] - ya) / dy, 0.0)
        ok = (lam >= 0) & (lam <= 1)
        s = s0[seg, i] + lam * (s1[seg, i] - s0[seg, i])
        ok &= s >= 0
        pc = p0[seg, c] + lam * (p1[seg, c] - p0[seg, c]) + s * sun[c]
        kc = np.floor((pc - lo[c]) / vox[c]).astype(int)
        ok &= (kc >= 0) & (kc < n[c])
        seg, i, j, kc, lam = seg[ok], i[ok], j[ok], kc[ok], lam[ok]
        # active neighbours among the four voxels sharing this edge (padded index)
        hit = np.zeros(seg.size, dtype=bool)
        for di in (0, 1):
            for dj in (0, 1):
                idx = [None, None, None]
                idx[a], idx[b], idx[c] = i + di, j + dj, kc + 1
                hit |= pad[idx[0], idx[1], idx[2]]
        seg, lam = seg[hit], lam[hit]
        out_seg.append(seg)
        out_t.append(seg_in[seg] + lam * (seg_out[seg] - seg_in[seg]))
    if not out_seg:
        return np.array([], dtype=int), np.array([])
    return np.concatenate(out_seg), np.concatenate(out_t)


def _subpixel_rays(camera: Camera, ss: int):
    if ss == 1:
        rays, origin = pixel_rays(camera)
        return rays.reshape(-1, 1, 3), origin
    nx, ny = camera.resolution
    h, w = camera.image_axes()
    a = np.asarray(camera.optical_axis)
    off = (np.arange(ss) + 0.5) / ss - 0.5
    u = ((np.arange(nx) - 0.5 * (nx - 1))[:, None] + off[None, :]) * camera.pixel_pitch   # (nx, ss)
    v = ((0.5 * (ny - 1) - np.arange(ny))[:, None] - off[None, :]) * camera.pixel_pitch   # (ny, ss)
    d = (camera.focal_length * a
         + u[None, :, None, :, None] * h
         + v[:, None, :, None, None] * w)          # (ny, nx, ss_v, ss_u, 3)
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    return d.reshape(ny * nx, ss * ss, 3), np.asarray(camera.position)


def _rotation_to_meridian(sun, dirs):
    """cos/sin of twice the angle from the scattering-plane frame to the meridian frame.

    Both frames are built the same way, b = n x w / |n x w| and l = w x b, with
    n = incident direction for the scattering plane and n = zenith for the meridian.
    """
    omega = -dirs
    incident = -np.asarray(sun, dtype=float)
    mer = meridian_frame(omega)
    n = np.cross(incident, omega)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    degenerate = norm[:, 0] < 1e-12
    b_sp = n / np.where(norm < 1e-12, 1.0, norm)
    l_sp = np.cross(omega, b_sp)
    chi = np.arctan2(np.sum(mer.l * b_sp, axis=-1), np.sum(mer.l * l_sp, axis=-1))
    chi = np.where(degenerate, 0.0, chi)
    return np.cos(2 * chi), np.sin(2 * chi)


# -- the solver --------------------------------------------------------------

@dataclass
class _Tape:
    beta: np.ndarray
    beta_c: np.ndarray
    lwc: np.ndarray
    r_e: np.ndarray
    albedo: np.ndarray
    ext: np.ndarray
    clamped: np.ndarray
    d_ext: np.ndarray
    d_alb: np.ndarray
    tau_node: np.ndarray
    E: np.ndarray
    h: np.ndarray
    dh: np.ndarray
    g: np.ndarray
    phase: np.ndarray
    dphase: np.ndarray
    rayleigh_beta: np.ndarray
    rayleigh_phase: np.ndarray


class SingleScatterRenderer:
    """Single-scattering vector forward model (implements :class:`ForwardModel`).

    Parameters
    ----------
    substeps : int
        Extra uniform splits per traversed voxel. Sun-path kinks are always
        resolved exactly, so 1 suffices for piecewise-constant media.
    supersample : int
        n x n rays per pixel.
    solar_irradiance : float
        Top-of-atmosphere irradiance; renders scale linearly with it.
    rayleigh_extinction : float
        Molecular extinction at z = 0 in 1/m; 0 disables the Rayleigh layer.
    rayleigh_scale_height : float
        Exponential scale height of the molecular profile, meters.
    """

    def __init__(self, substeps: int = 1, supersample: int = 1, solar_irradiance: float = 1.0,
                 rayleigh_extinction: float = 0.0, rayleigh_scale_height: float = 8000.0):
        self.substeps = int(substeps)
        self.supersample = int(supersample)
        self.solar_irradiance = float(solar_irradiance)
        self.rayleigh_extinction = float(rayleigh_extinction)
        self.rayleigh_scale_height = float(rayleigh_scale_height)

    def active_mask(self, cloud: VoxelCloud) -> np.ndarray:
        if self.rayleigh_extinction > 0:
            return np.ones(cloud.shape, dtype=bool)
        return cloud.mask

    def prepare(self, cloud: VoxelCloud, optics: BulkOpticsTable, camera: Camera, sun) -> ViewGeometry:
        return prepare_view(cloud.bounds, cloud.shape, self.active_mask(cloud), camera, sun, optics,
                            self.substeps, self.supersample)

    def _rayleigh(self, cloud: VoxelCloud, geom: ViewGeometry):
        if self.rayleigh_extinction <= 0:
            return np.zeros(geom.n_active)
        z = np.broadcast_to(cloud.altitudes, cloud.shape).ravel()[geom.active]
        return self.rayleigh_extinction * np.exp(-z / self.rayleigh_scale_height)

    def forward(self, cloud: VoxelCloud, optics: BulkOpticsTable, geom: ViewGeometry,
                need_tape: bool = False):
        """Render a prepared view; optionally keep what the adjoint needs."""
        lwc = cloud.lwc.ravel()[geom.active]
        raw = cloud.r_e.ravel()[geom.active]
        r_e = np.clip(raw, optics.re_min, optics.re_max)
        ext, d_ext = optics.extinction(r_e, derivative=True)
        alb, d_alb = optics.single_scatter_albedo(r_e, derivative=True)
        beta_c = lwc * ext
        beta_r = self._rayleigh(cloud, geom)
        beta = beta_c + beta_r

        tau_seg = geom.seg_matrix @ beta
        tau_node = geom.node_matrix @ beta
        v = geom.sub_vox
        tau_cam = tau_seg[geom.sub_seg] + beta[v] * geom.sub_pre
        ts0 = tau_node[geom.node0]
        ts1 = tau_node[geom.node1]
        ell = geom.sub_len
        a = beta[v] + (ts1 - ts0) / ell
        f, df = _phi(a * ell)
        E = np.exp(-tau_cam - ts0)
        h = ell * f
        dh = ell * ell * df
        g = E * h
        phase, dphase = optics.phase_at(r_e[v], geom.angle_index, geom.angle_frac, derivative=True)
        sig_c = beta_c[v] * alb[v]
        p11 = sig_c * phase[:, 0]
        p12 = sig_c * phase[:, 1]
        ray_phase = None
        if self.rayleigh_extinction > 0:
            ray_phase = rayleigh_phase(geom.theta[geom.sub_ray])
            p11 = p11 + beta_r[v] * ray_phase[:, 0]
            p12 = p12 + beta_r[v] * ray_phase[:, 1]
        k = self.solar_irradiance / FOUR_PI * geom.ray_weight[geom.sub_ray]
        npix = geom.ray_pixel.size
        i_ray = np.bincount(geom.sub_ray, weights=k * g * p11, minlength=npix)
        q_sp = np.bincount(geom.sub_ray, weights=k * g * p12, minlength=npix)
        npx = geom.shape[0] * geom.shape[1]
        I = np.bincount(geom.ray_pixel, weights=i_ray, minlength=npx)
        Q = np.bincount(geom.ray_pixel, weights=q_sp * geom.cos2chi, minlength=npx)
        U = np.bincount(geom.ray_pixel, weights=-q_sp * geom.sin2chi, minlength=npx)
        img = StokesImage(I.reshape(geom.shape), Q.reshape(geom.shape), U.reshape(geom.shape))
        if not need_tape:
            return img
        tape = _Tape(beta, beta_c, lwc, r_e, alb, ext, raw != r_e, d_ext, d_alb, tau_node, E, h, dh, g,
                     phase, dphase, beta_r, ray_phase)
        return img, tape

    def backward(self, cloud: VoxelCloud, geom: ViewGeometry, tape: _Tape, adjoint: StokesImage):
        """Gradients of <adjoint, image> with respect to the LWC and r_e grids."""
        aI = np.asarray(adjoint.I, float).ravel()[geom.ray_pixel]
        aQ = np.asarray(adjoint.Q, float).ravel()[geom.ray_pixel]
        aU = np.asarray(adjoint.U, float).ravel()[geom.ray_pixel]
        a_sp = aQ * geom.cos2chi - aU * geom.sin2chi
        sr = geom.sub_ray
        v = geom.sub_vox
        k = self.solar_irradiance / FOUR_PI * geom.ray_weight[sr]
        wi, wq = aI[sr], a_sp[sr]
        sig_c = tape.beta_c[v] * tape.albedo[v]
        mix_c = wi * tape.phase[:, 0] + wq * tape.phase[:, 1]
        mix = sig_c * mix_c
        if tape.rayleigh_phase is not None:
            mix = mix + tape.rayleigh_beta[v] * (wi * tape.rayleigh_phase[:, 0] + wq * tape.rayleigh_phase[:, 1])
        d_g = k * mix
        d_sig = k * tape.g * mix_c
        d_p11 = k * tape.g * sig_c * wi
        d_p12 = k * tape.g * sig_c * wq

        ell = geom.sub_len
        d_taucam = -tape.g * d_g
        d_a = tape.E * tape.dh * d_g
        d_ts0 = -tape.g * d_g - d_a / ell
        d_ts1 = d_a / ell
        n = geom.n_active
        d_beta = np.bincount(v, weights=d_a + d_taucam * geom.sub_pre, minlength=n)
        d_tau_seg = np.bincount(geom.sub_seg, weights=d_taucam, minlength=geom.seg_matrix.shape[0])
        d_tau_node = (np.bincount(geom.node0, weights=d_ts0, minlength=geom.node_matrix.shape[0])
                      + np.bincount(geom.node1, weights=d_ts1, minlength=geom.node_matrix.shape[0]))
        d_beta += geom.seg_matrix.T @ d_tau_seg + geom.node_matrix.T @ d_tau_node
        d_alb = np.bincount(v, weights=d_sig * tape.beta_c[v], minlength=n)
        d_beta_c = d_beta + np.bincount(v, weights=d_sig * tape.albedo[v], minlength=n)
        d_phase_r = np.bincount(v, weights=d_p11 * tape.dphase[:, 0] + d_p12 * tape.dphase[:, 1],
                                minlength=n)
        d_lwc_a = d_beta_c * tape.ext
        d_re_a = d_beta_c * tape.lwc * tape.d_ext + d_alb * tape.d_alb + d_phase_r
        # r_e pinned at a table bound has no gradient through the clamp
        d_re_a = np.where(tape.clamped, 0.0, d_re_a)
        d_lwc = np.zeros(cloud.lwc.size)
        d_re = np.zeros(cloud.lwc.size)
        d_lwc[geom.active] = d_lwc_a
        d_re[geom.active] = d_re_a
        outside = ~cloud.mask.ravel()
        d_lwc[outside] = 0.0
        d_re[outside] = 0.0
        return d_lwc.reshape(cloud.shape), d_re.reshape(cloud.shape)

    # -- ForwardModel interface ------------------------------------------------
    def render(self, cloud, optics, camera, sun) -> StokesImage:
        if not cloud.mask.any() and self.rayleigh_extinction <= 0:
            return StokesImage.zeros((camera.resolution[1], camera.resolution[0]))
        return self.forward(cloud, optics, self.prepare(cloud, optics, camera, sun))

    def render_with_gradient(self, cloud, optics, camera, sun, adjoint):
        geom = self.prepare(cloud, optics, camera, sun)
        img, tape = self.forward(cloud, optics, geom, need_tape=True)
        d_lwc, d_re = self.backward(cloud, geom, tape, adjoint)
        return img, d_lwc, d_re
