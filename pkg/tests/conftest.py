import numpy as np
import pytest

from cloudtomo.geometry import Camera
from cloudtomo.microphysics import VoxelCloud
from cloudtomo.optics import cached_table


@pytest.fixture(scope="session")
def table():
    return cached_table()


def look_camera(view_deg=20.0, azimuth=0.0, res=8, gsd=10.0, height=500e3, target=(0.0, 0.0, 530.0)):
    """Camera ``height`` meters from ``target`` at the given off-zenith view and azimuth."""
    t, a = np.deg2rad(view_deg), np.deg2rad(azimuth)
    pos = np.asarray(target) + height * np.array([np.sin(t) * np.cos(a), np.sin(t) * np.sin(a), np.cos(t)])
    return Camera.looking_at(pos, target, focal_length=3.45e-6 * height / gsd, resolution=(res, res))


def random_cloud(shape=(3, 3, 3), seed=0, lwc=0.3, voxel=20.0, base=500.0, hole=None):
    rng = np.random.default_rng(seed)
    mask = np.ones(shape, bool)
    if hole is not None:
        mask[hole] = False
    return VoxelCloud(np.where(mask, lwc * rng.uniform(0.3, 1.0, shape), 0.0),
                      np.where(mask, rng.uniform(5.0, 15.0, shape), 0.0), mask, voxel, base)


@pytest.fixture(scope="session")
def small_scene(table):
    """Noiseless 10-view measurements of a 5x5x5 monotonic cloud."""
    from cloudtomo.geometry import DEFAULT_PITCH, build_string_of_pearls
    from cloudtomo.rendering import SingleScatterRenderer
    from cloudtomo.retrieval import MeasurementSet, monotonic_profile
    from cloudtomo.scenes import ellipsoid_mask

    truth = monotonic_profile(0.55, 9.0, ellipsoid_mask((5, 5, 5)), 20.0, 550.0)
    con = build_string_of_pearls(target=tuple(truth.center), resolution=(10, 10),
                                 focal_length=DEFAULT_PITCH * 500e3 / 15.0)
    renderer = SingleScatterRenderer()
    images = [renderer.render(truth, table, cam, con.sun) for cam in con.cameras]
    return truth, MeasurementSet(list(con.cameras), images, con.sun)


SMALL_CONFIG = """\
# 5x5x5 monotonic scene; pixels finer than voxels
seed = 7
scene.kind = monotonic
scene.shape = [5, 5, 5]
scene.alpha_l = 0.55
scene.alpha_r = 9.0
constellation.gsd = 10
constellation.resolution = [20, 20]
init.points = 6
retrieval.max_iter = 60
retrieval.max_cycles = 3
"""


@pytest.fixture(scope="session")
def full_runs(tmp_path_factory):
    """Two `full` runs of the small config with the same seed."""
    from cloudtomo.pipeline import main

    root = tmp_path_factory.mktemp("full")
    cfg = root / "small.cfg"
    cfg.write_text(SMALL_CONFIG)
    outs = [root / "a", root / "b"]
    codes = [main(["full", "--config", str(cfg), "--out", str(o)]) for o in outs]
    return cfg, outs, codes
