"""Cost functions, initialization by grid search, and the descent loop.

Optimization variables are the masked voxels' LWC and r_e, scaled by the
preconditioners (Pi_LWC * LWC, Pi_re * r_e). Descent is projected gradient
with Armijo backtracking.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .microphysics import LWC_MIN, RE_MAX, RE_MIN, VoxelCloud
from .optics import BulkOpticsTable
from .rendering import SingleScatterRenderer, StokesImage

log = logging.getLogger(__name__)

METHODS = ("H_Typical", "H_Stokes", "M_Stokes", "M_DoLP")
TYPICAL_LWC = 0.01
TYPICAL_RE = 12.0
DOLP_FLOOR = 1e-6


class RetrievalAbort(RuntimeError):
    """Non-finite cost during descent; ``cloud`` holds the offending iterate."""

    def __init__(self, message, cloud=None, path=None):
        super().__init__(message)
        self.cloud = cloud
        self.path = path


class GridSearchError(RuntimeError):
    pass


# -- measurements and costs --------------------------------------------------

@dataclass
class MeasurementSet:
    """Measured meridian-frame Stokes images with the geometry that produced them."""

    cameras: list
    images: list
    sun: np.ndarray
    dt: float | None = None
    seed: int | None = None
    band: tuple = (620.0, 670.0)

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ValueError("one image per camera is required")
        if not self.cameras:
            raise ValueError("measurement set is empty")
        self.sun = np.asarray(self.sun, dtype=float)
        for cam, img in zip(self.cameras, self.images):
            if img.shape != (cam.resolution[1], cam.resolution[0]):
                raise ValueError(f"image shape {img.shape} does not match camera {cam.resolution}")

    @property
    def n_meas(self) -> int:
        return sum(img.I.size for img in self.images)

    def __len__(self):
        return len(self.images)


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def _pairs(sim, meas):
    sim = _as_list(sim)
    meas = _as_list(meas.images if isinstance(meas, MeasurementSet) else meas)
    if len(sim) != len(meas):
        raise ValueError(f"{len(sim)} simulated views vs {len(meas)} measured")
    for s, m in zip(sim, meas):
        if s.shape != m.shape:
            raise ValueError(f"image shapes differ: {s.shape} vs {m.shape}")
    return list(zip(sim, meas))


def cost_radiance(sim, meas) -> float:
    """0.5 * sum of squared intensity residuals over all views and pixels."""
    return float(sum(0.5 * np.sum((s.I - m.I) ** 2) for s, m in _pairs(sim, meas)))


def cost_stokes(sim, meas) -> float:
    """Radiance cost plus the same quadratic form on Q and U."""
    total = 0.0
    for s, m in _pairs(sim, meas):
        total += 0.5 * (np.sum((s.I - m.I) ** 2) + np.sum((s.Q - m.Q) ** 2) + np.sum((s.U - m.U) ** 2))
    return float(total)


@dataclass
class DolpCost:
    value: float
    excluded: int
    used: int


def cost_dolp(sim, meas, floor: float = DOLP_FLOOR, details: bool = False):
    """0.5 * sum of squared DoLP residuals over pixels bright in both images.

    A pixel is excluded when its simulated or measured intensity is below
    ``floor`` times that image's maximum.
    """
    total, excluded, used = 0.0, 0, 0
    for s, m in _pairs(sim, meas):
        ok = (s.I > floor * s.I.max()) & (m.I > floor * m.I.max()) & (s.I > 0) & (m.I > 0)
        excluded += int(ok.size - ok.sum())
        used += int(ok.sum())
        d_s = np.hypot(s.Q[ok], s.U[ok]) / s.I[ok]
        d_m = np.hypot(m.Q[ok], m.U[ok]) / m.I[ok]
        total += 0.5 * np.sum((d_s - d_m) ** 2)
    if details:
        return DolpCost(float(total), excluded, used)
    return float(total)


# -- parametric initial clouds -----------------------------------------------

def _template(mask, voxel_size, base_height, v_e):
    mask = np.asarray(mask, dtype=bool)
    return VoxelCloud(np.zeros(mask.shape), np.where(mask, RE_MIN, 0.0), mask, voxel_size,
                      base_height, v_e)


def lowest_altitude(cloud: VoxelCloud) -> float:
    """Altitude (m) of the lowest masked voxel centre."""
    k = np.flatnonzero(cloud.mask.any(axis=(0, 1)))
    if k.size == 0:
        raise ValueError("mask is empty")
    return float(cloud.altitudes[k[0]])


def monotonic_profile(alpha_l: float, alpha_r: float, mask, voxel_size=20.0, base_height=0.0,
                      z0: float | None = None, v_e: float = 0.1,
                      lwc_min: float = LWC_MIN, re_min: float = RE_MIN) -> VoxelCloud:
    """LWC = alpha_l (Z - Z0) + LWC_min and r_e = alpha_r (Z - Z0)^(1/3) + r_e_min.

    Z is in km; ``alpha_l`` in g m^-3 km^-1 and ``alpha_r`` in um km^-1/3.
    ``z0`` (m) defaults to the lowest masked voxel-centre altitude.
    """
    if alpha_l < 0 or alpha_r < 0:
        raise ValueError("slope parameters must be non-negative")
    cloud = _template(mask, voxel_size, base_height, v_e)
    if not cloud.mask.any():
        raise ValueError("mask is empty")
    if z0 is None:
        z0 = lowest_altitude(cloud)
    dz = np.maximum(cloud.altitudes - z0, 0.0) / 1e3
    lwc = alpha_l * dz + lwc_min
    r_e = np.minimum(alpha_r * np.cbrt(dz) + re_min, RE_MAX)
    shape = cloud.shape
    lwc = np.where(cloud.mask, np.broadcast_to(lwc, shape), 0.0)
    r_e = np.where(cloud.mask, np.broadcast_to(r_e, shape), 0.0)
    return cloud.with_fields(lwc=lwc, r_e=r_e)


def homogeneous_profile(lwc_val: float = TYPICAL_LWC, re_val: float = TYPICAL_RE, mask=None,
                        voxel_size=20.0, base_height=0.0, v_e: float = 0.1) -> VoxelCloud:
    if lwc_val <= 0 or re_val <= 0:
        raise ValueError("homogeneous values must be positive")
    cloud = _template(mask, voxel_size, base_height, v_e)
    return cloud.with_fields(lwc=np.where(cloud.mask, lwc_val, 0.0),
                             r_e=np.where(cloud.mask, re_val, 0.0))


@dataclass
class InitConfig:
    method: str = "M_DoLP"
    l_values: np.ndarray = field(default_factory=lambda: np.linspace(0.1, 1.6, 16))
    r_values: np.ndarray = field(default_factory=lambda: np.linspace(3.0, 15.0, 16))
    lwc_min: float = LWC_MIN
    re_min: float = RE_MIN
    typical: tuple = (TYPICAL_LWC, TYPICAL_RE)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown init method {self.method!r}; expected one of {METHODS}")
        self.l_values = np.atleast_1d(np.asarray(self.l_values, dtype=float))
        self.r_values = np.atleast_1d(np.asarray(self.r_values, dtype=float))
        if self.l_values.size == 0 or self.r_values.size == 0:
            raise ValueError("grids must be nonempty")
        if np.any(self.l_values <= 0) or np.any(self.r_values <= 0):
            raise ValueError("grid values must be positive")


@dataclass
class InitResult:
    method: str
    params: tuple
    cloud: VoxelCloud
    surface: np.ndarray | None      # (len(l_values), len(r_values)) costs
    index: tuple | None


class Objective:
    """Sum over views of a cost between renders and measurements, with its gradient.

    View geometry is traced once for the mask of ``template`` and reused.
    """

    def __init__(self, meas: MeasurementSet, template: VoxelCloud, optics: BulkOpticsTable,
                 renderer: SingleScatterRenderer | None = None):
        self.meas = meas
        self.optics = optics
        self.renderer = renderer or SingleScatterRenderer()
        self.mask = template.mask.copy()
        self.geoms = [self.renderer.prepare(template, optics, cam, meas.sun) for cam in meas.cameras]
        self.evaluations = 0

    def render(self, cloud: VoxelCloud) -> list:
        if not np.array_equal(cloud.mask, self.mask):
            raise ValueError("cloud mask differs from the one the objective was prepared for")
        self.evaluations += 1
        return [self.renderer.forward(cloud, self.optics, g) for g in self.geoms]

    def cost(self, cloud: VoxelCloud) -> float:
        return cost_stokes(self.render(cloud), self.meas)

    def cost_and_gradient(self, cloud: VoxelCloud):
        """cost_stokes and its gradients with respect to the LWC and r_e grids."""
        self.evaluations += 1
        total = 0.0
        g_l = np.zeros(cloud.shape)
        g_r = np.zeros(cloud.shape)
        # fixed view order keeps the reduction deterministic
        for geom, meas in zip(self.geoms, self.meas.images):
            img, tape = self.renderer.forward(cloud, self.optics, geom, need_tape=True)
            res = StokesImage(img.I - meas.I, img.Q - meas.Q, img.U - meas.U)
            total += 0.5 * float(np.sum(res.stack() ** 2))
            dl, dr = self.renderer.backward(cloud, geom, tape, res)
            g_l += dl
            g_r += dr
        return total, g_l, g_r


def grid_search_init(config: InitConfig, meas: MeasurementSet, template: VoxelCloud,
                     optics: BulkOpticsTable, renderer: SingleScatterRenderer | None = None,
                     objective: Objective | None = None) -> InitResult:
    """Pick initial parameters for ``config.method`` by exhaustive grid search.

    ``template`` supplies mask, voxel size, base height and v_e.
    """
    geo = dict(voxel_size=template.voxel_size, base_height=template.base_height, v_e=template.v_e)
    if config.method == "H_Typical":
        lwc, re = config.typical
        return InitResult(config.method, (lwc, re),
                          homogeneous_profile(lwc, re, template.mask, **geo), None, None)

    if config.method == "H_Stokes":
        def make(a, b):
            return homogeneous_profile(a, b, template.mask, **geo)
    else:
        def make(a, b):
            return monotonic_profile(a, b, template.mask, lwc_min=config.lwc_min,
                                     re_min=config.re_min, **geo)
    cost = cost_dolp if config.method == "M_DoLP" else cost_stokes
    obj = objective or Objective(meas, template, optics, renderer)
    surface = np.empty((config.l_values.size, config.r_values.size))
    for i, a in enumerate(config.l_values):
        for j, b in enumerate(config.r_values):
            try:
                surface[i, j] = cost(obj.render(make(a, b)), meas)
            except Exception as exc:
                raise GridSearchError(f"{config.method} grid node ({i}, {j}) = ({a:g}, {b:g}) "
                                      f"failed: {exc}") from exc
    if not np.all(np.isfinite(surface)):
        i, j = np.argwhere(~np.isfinite(surface))[0]
        raise GridSearchError(f"non-finite cost at grid node ({i}, {j})")
    i, j = np.unravel_index(np.argmin(surface), surface.shape)
    params = (float(config.l_values[i]), float(config.r_values[j]))
    return InitResult(config.method, params, make(*params), surface, (int(i), int(j)))


# -- preconditioned projected descent -----------------------------------------

PI_LWC = 10.0
PI_RE = 0.1


def precondition(lwc, r_e, pi_lwc: float = PI_LWC, pi_re: float = PI_RE):
    if pi_lwc <= 0 or pi_re <= 0:
        raise ValueError("preconditioners must be positive")
    return pi_lwc * np.asarray(lwc, float), pi_re * np.asarray(r_e, float)


def unprecondition(x_lwc, x_re, pi_lwc: float = PI_LWC, pi_re: float = PI_RE):
    if pi_lwc <= 0 or pi_re <= 0:
        raise ValueError("preconditioners must be positive")
    return np.asarray(x_lwc, float) / pi_lwc, np.asarray(x_re, float) / pi_re


@dataclass
class RetrievalOptions:
    mode: str = "alternating"            # or "joint"
    pi_lwc: float = PI_LWC
    pi_re: float = PI_RE
    max_iter: int = 500                  # per phase (per run in joint mode)
    max_cycles: int = 20
    phase_tol: float = 1e-4              # relative decrease over `window` iterations
    cycle_tol: float = 1e-3
    window: int = 10
    armijo: float = 1e-4
    shrink: float = 0.5
    initial_step: float = 0.1            # first step moves ~10% of |x|
    max_backtracks: int = 40
    bb: bool = True                      # Barzilai-Borwein trial steps after the first
    retrieve_re: bool = True             # False freezes r_e at its initial profile
    dump_path: str | None = None

    def __post_init__(self):
        if self.mode not in ("joint", "alternating"):
            raise ValueError(f"unknown retrieval mode {self.mode!r}")
        if not 0 < self.shrink < 1 or not 0 < self.armijo < 1:
            raise ValueError("shrink and armijo constants must lie in (0, 1)")


@dataclass
class RetrievalState:
    cloud: VoxelCloud
    pi_lwc: float = PI_LWC
    pi_re: float = PI_RE
    phase: str = "joint"
    costs: list = field(default_factory=list)
    phase_log: list = field(default_factory=list)    # (phase, first_iter, last_iter, cost_in, cost_out)
    iterations: int = 0
    evaluations: int = 0


class _Phase:
    # projected gradient descent on the selected blocks with Armijo backtracking

    def __init__(self, objective: Objective, state: RetrievalState, opts: RetrievalOptions,
                 fields: tuple):
        self.obj = objective
        self.state = state
        self.opts = opts
        self.fields = fields
        cloud = state.cloud
        self.m = cloud.mask
        self.lo = {"lwc": 0.0, "r_e": cloud.re_min * opts.pi_re}
        self.hi = {"lwc": np.inf, "r_e": cloud.re_max * opts.pi_re}
        self.pi = {"lwc": opts.pi_lwc, "r_e": opts.pi_re}
        self.step = None
        self.prev = None

    def _trial_step(self, x, g):
        # Barzilai-Borwein step from the last accepted move, else grow the last step
        if self.opts.bb and self.prev is not None:
            x0, g0 = self.prev
            sx = np.concatenate([x[f] - x0[f] for f in self.fields])
            sg = np.concatenate([g[f] - g0[f] for f in self.fields])
            curv = float(sx @ sg)
            if curv > 0:
                return float(sx @ sx) / curv
        return 2.0 * self.step

    def _x(self, cloud):
        return {f: getattr(cloud, f)[self.m] * self.pi[f] for f in self.fields}

    def _cloud(self, base, x):
        kw = {}
        for f in self.fields:
            grid = getattr(base, f).copy()
            grid[self.m] = x[f] / self.pi[f]
            kw[f] = grid
        return base.with_fields(**kw)

    def _check(self, cost, cloud):
        if np.isfinite(cost):
            return
        path = None
        if self.opts.dump_path:
            path = self.opts.dump_path
            np.savez(path, lwc=cloud.lwc, r_e=cloud.r_e, mask=cloud.mask)
        raise RetrievalAbort(f"non-finite cost at iteration {self.state.iterations}", cloud, path)

    def run(self, cost, grads, label):
        st, opts = self.state, self.opts
        cloud = st.cloud
        first = st.iterations
        cost_in = cost
        history = [cost]
        for _ in range(opts.max_iter):
            x = self._x(cloud)
            # d cost / d(scaled var) = (1/Pi) d cost / d var
            g = {f: grads[f][self.m] / self.pi[f] for f in self.fields}
            gnorm = np.sqrt(sum(np.sum(v ** 2) for v in g.values()))
            if not np.isfinite(gnorm):
                self._check(np.nan, cloud)
            if gnorm == 0:
                break
            if self.step is None:
                xnorm = np.sqrt(sum(np.sum(v ** 2) for v in x.values()))
                self.step = opts.initial_step * max(xnorm, 1e-12) / gnorm
                step = self.step
            else:
                step = self._trial_step(x, g)
            accepted = False
            for _ in range(opts.max_backtracks):
                xn = {f: np.clip(x[f] - step * g[f], self.lo[f], self.hi[f]) for f in self.fields}
                trial = self._cloud(cloud, xn)
                c_new = self.obj.cost(trial)
                if np.isfinite(c_new):
                    decrease = sum(np.sum(g[f] * (xn[f] - x[f])) for f in self.fields)
                    if c_new <= cost + opts.armijo * decrease and c_new <= cost:
                        accepted = True
                        break
                step *= opts.shrink
            if not accepted:
                break
            self.step = step
            self.prev = (x, g)
            cloud = trial
            st.iterations += 1
            cost, g_l, g_r = self.obj.cost_and_gradient(cloud)
            self._check(cost, cloud)
            grads = {"lwc": g_l, "r_e": g_r}
            st.costs.append(cost)
            history.append(cost)
            if len(history) > opts.window:
                old = history[-1 - opts.window]
                if old <= 0 or (old - cost) / old < opts.phase_tol:
                    break
            if cost == 0:
                break
        st.cloud = cloud
        st.phase_log.append((label, first, st.iterations, cost_in, cost))
        return cost, grads


def retrieve(meas: MeasurementSet, init: VoxelCloud, optics: BulkOpticsTable,
             renderer: SingleScatterRenderer | None = None,
             options: RetrievalOptions | None = None,
             objective: Objective | None = None) -> RetrievalState:
    """Recover LWC and r_e from ``meas`` starting at ``init``.

    Joint mode descends on both fields at once. Alternating mode runs an
    LWC-only phase then an r_e-only phase, each to convergence, and repeats
    until a full cycle improves the cost by less than ``cycle_tol``.
    """
    opts = options or RetrievalOptions()
    obj = objective or Objective(meas, init, optics, renderer)
    state = RetrievalState(init, opts.pi_lwc, opts.pi_re)
    cost, g_l, g_r = obj.cost_and_gradient(init)
    if not np.isfinite(cost):
        raise RetrievalAbort("non-finite cost at the initial cloud", init)
    state.costs.append(cost)
    grads = {"lwc": g_l, "r_e": g_r}
    both = ("lwc", "r_e") if opts.retrieve_re else ("lwc",)
    if opts.mode == "joint" or not opts.retrieve_re:
        state.phase = "joint" if opts.retrieve_re else "lwc_only"
        _Phase(obj, state, opts, both).run(cost, grads, state.phase)
    else:
        phases = {"lwc_only": _Phase(obj, state, opts, ("lwc",)),
                  "re_only": _Phase(obj, state, opts, ("r_e",))}
        for cycle in range(opts.max_cycles):
            start = cost
            for name in ("lwc_only", "re_only"):
                state.phase = name
                cost, grads = phases[name].run(cost, grads, name)
            log.info("cycle %d: cost %.6g -> %.6g", cycle, start, cost)
            if start <= 0 or (start - cost) / start < opts.cycle_tol:
                break
    state.evaluations = obj.evaluations
    return state
