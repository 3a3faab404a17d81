"""Synthetic ground-truth clouds and seeded random streams."""
from __future__ import annotations

import numpy as np

from .io import read_grid
from .microphysics import LWC_MIN, RE_MAX, RE_MIN, VoxelCloud
from .retrieval import monotonic_profile

# bounds of the "paper-like" preset
PAPER_BASE = 550.0
PAPER_TOP = 1710.0
PAPER_RE_MAX = 15.4

STAGES = {"scene": 0, "render": 1, "init": 2, "retrieve": 3}


def stream(seed: int, stage: str, view: int = 0) -> np.random.Generator:
    """Counter-based generator for one (stage, view); independent of call order."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(STAGES[stage], int(view)))
    return np.random.Generator(np.random.Philox(ss))


def ellipsoid_mask(shape, fill: float = 0.95) -> np.ndarray:
    """Voxels whose centres lie inside the ellipsoid inscribed in the grid."""
    axes = [(np.arange(n) + 0.5) / n * 2 - 1 for n in shape]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    m = x ** 2 + y ** 2 + z ** 2 <= fill ** 2
    if not m.any():
        m[tuple(n // 2 for n in shape)] = True
    return m


def _smooth_field(shape, rng, modes: int = 4) -> np.ndarray:
    # sum of low-frequency cosines, scaled to [-1, 1]
    axes = [np.linspace(0, 1, n) for n in shape]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    f = np.zeros(shape)
    for _ in range(modes):
        k = rng.uniform(0.5, 2.0, 3) * np.pi
        f += np.cos(k[0] * x + k[1] * y + k[2] * z + rng.uniform(0, 2 * np.pi))
    peak = np.abs(f).max()
    return f / peak if peak > 0 else f


def synthesize_cloud(kind: str = "blob", shape=(10, 10, 10), voxel_size: float = 20.0,
                     base_height: float = PAPER_BASE, v_e: float = 0.1, alpha_l: float = 0.5,
                     alpha_r: float = 10.0, perturbation: float = 0.2, mask: str = "ellipsoid",
                     preset: str = "paper-like", path: str | None = None, seed: int = 0) -> VoxelCloud:
    """Deterministic synthetic ground truth.

    ``monotonic`` fills the mask with the monotonic vertical profile; ``blob``
    adds a seeded smooth 3D modulation to that profile; ``file`` reads a grid
    file. The paper-like preset fixes base 550 m and v_e = 0.1, and caps r_e
    at 15.4 um; a grid whose top exceeds 1710 m is rejected.
    """
    if kind == "file":
        if not path:
            raise ValueError("file clouds need a path")
        return read_grid(path)
    if kind not in ("monotonic", "blob"):
        raise ValueError(f"unknown cloud kind {kind!r}")
    shape = tuple(int(n) for n in shape)
    re_cap = RE_MAX
    if preset == "paper-like":
        base_height, v_e, re_cap = PAPER_BASE, 0.1, PAPER_RE_MAX
        if base_height + shape[2] * voxel_size > PAPER_TOP + 1e-9:
            raise ValueError(f"cloud top {base_height + shape[2] * voxel_size:g} m exceeds {PAPER_TOP:g} m")
    m = ellipsoid_mask(shape) if mask == "ellipsoid" else np.ones(shape, dtype=bool)
    cloud = monotonic_profile(alpha_l, alpha_r, m, voxel_size, base_height, v_e=v_e)
    lwc, r_e = cloud.lwc, cloud.r_e
    if kind == "blob" and perturbation > 0:
        rng = stream(seed, "scene")
        f1 = _smooth_field(shape, rng)
        f2 = _smooth_field(shape, rng)
        lwc = np.where(m, np.maximum(lwc * (1 + perturbation * f1), LWC_MIN), 0.0)
        r_e = np.where(m, r_e * (1 + 0.5 * perturbation * f2), 0.0)
    r_e = np.where(m, np.clip(r_e, RE_MIN, re_cap), 0.0)
    return cloud.with_fields(lwc=lwc, r_e=r_e)
