"""Stage orchestration and the ``cloudtomo`` command line.

Stages write into one output directory:

    render    truth.grid, measurements/, images/
    init      init.grid, init.json, cost_surface.csv/.pgm, init_profile.csv
    retrieve  retrieved.grid, cost_history.csv, phase_log.csv, retrieval.json
    evaluate  evaluation.json
    plan-cloudbow  cloudbow.json

Every invocation refreshes ``manifest.json`` (config, seed, versions, file hashes).
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config, parse_config, serialize_config
from .geometry import Camera, build_string_of_pearls, plan_cloudbow_scan
from .imager import BandSpec, Imager, SensorSpec, polarizer_alpha
from .io import (read_grid, read_json, read_stokes_csv, tree_hashes, write_csv, write_grid,
                 write_json, write_pgm, write_stokes_csv)
from .microphysics import DomainError, VoxelCloud, epsilon_errors
from .optics import ConvergenceError, QuadratureError, cached_table
from .rendering import SingleScatterRenderer
from .retrieval import (GridSearchError, InitConfig, MeasurementSet, Objective, RetrievalAbort,
                        RetrievalOptions, grid_search_init, retrieve)
from .scenes import stream, synthesize_cloud

log = logging.getLogger(__name__)

COMMANDS = ("render", "init", "retrieve", "evaluate", "plan-cloudbow", "full")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
NUMERIC_ERRORS = (RetrievalAbort, GridSearchError, ConvergenceError, QuadratureError,
                  FloatingPointError, DomainError)


class StageError(RuntimeError):
    """A stage cannot run, e.g. because an earlier stage's output is missing."""


@dataclass
class Context:
    cfg: ExperimentConfig
    out: Path

    @property
    def seed(self) -> int:
        return self.cfg["seed"]

    def optics(self):
        c = self.cfg
        center = 0.5 * (c["band.lambda_min"] + c["band.lambda_max"])
        return cached_table(band_center=center, v_e=c["scene.v_e"])

    def renderer(self) -> SingleScatterRenderer:
        r = self.cfg.section("render")
        return SingleScatterRenderer(substeps=r["substeps"], supersample=r["supersample"],
                                     rayleigh_extinction=r["rayleigh_extinction"])

    def imager(self) -> Imager:
        s = self.cfg.section("sensor")
        focal = s["pixel_pitch"] * self.cfg["constellation.altitude_km"] * 1e3 / self.cfg["constellation.gsd"]
        sensor = SensorSpec(pixel_pitch=s["pixel_pitch"], qe=s["qe"],
                            optics_efficiency=s["optics_efficiency"],
                            aperture=focal / s["f_number"], focal_length=focal,
                            full_well=s["full_well"], read_noise=s["read_noise"],
                            dark_current=s["dark_current"], bits=s["bits"])
        b = self.cfg.section("band")
        return Imager(sensor, BandSpec(b["lambda_min"], b["lambda_max"], b["toa_scale"]))

    def truth(self) -> VoxelCloud:
        s = self.cfg.section("scene")
        return synthesize_cloud(kind=s["kind"], shape=s["shape"], voxel_size=s["voxel_size"],
                                base_height=s["base_height"], v_e=s["v_e"], alpha_l=s["alpha_l"],
                                alpha_r=s["alpha_r"], perturbation=s["perturbation"],
                                mask=s["mask"], preset=s["preset"], path=s["path"] or None,
                                seed=self.seed)

    def constellation(self, target):
        c = self.cfg.section("constellation")
        sensor = self.imager().sensor
        return build_string_of_pearls(
            n=c["satellites"], altitude_km=c["altitude_km"], spacing_km=c["spacing_km"],
            target=target, nadir_index=c["nadir_index"], sun_zenith=self.cfg["sun.zenith"],
            sun_azimuth=self.cfg["sun.azimuth"], focal_length=sensor.focal_length,
            aperture=sensor.aperture, pixel_pitch=sensor.pixel_pitch,
            resolution=tuple(c["resolution"]))

    def cloudbow(self, con, target):
        cb = self.cfg.section("cloudbow")
        return plan_cloudbow_scan(con, target, tuple(cb["range"]), cb["resolution"],
                                  cb["max_satellites"])

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def need(self, *parts) -> Path:
        p = self.path(*parts)
        if not p.exists():
            raise StageError(f"missing {p}; run the stage that produces it first")
        return p


# -- camera (de)serialization --------------------------------------------------

def camera_record(cam: Camera) -> dict:
    return {"position": list(cam.position), "optical_axis": list(cam.optical_axis),
            "roll": cam.roll, "focal_length": cam.focal_length, "aperture": cam.aperture,
            "pixel_pitch": cam.pixel_pitch, "resolution": list(cam.resolution),
            "satellite": cam.satellite, "arc_offset": cam.arc_offset}


def camera_from_record(rec: dict) -> Camera:
    return Camera(**{**rec, "position": tuple(rec["position"]),
                     "optical_axis": tuple(rec["optical_axis"]), "resolution": tuple(rec["resolution"])})


# -- stages ---------------------------------------------------------------------

def stage_render(ctx: Context):
    """Ground truth, noiseless renders, exposure, noisy polarimetric measurements."""
    truth = ctx.truth()
    target = tuple(truth.center)
    con = ctx.constellation(target)
    cams = list(con.cameras)
    if ctx.cfg["cloudbow.enabled"]:
        cams += ctx.cloudbow(con, target).cameras
    optics = ctx.optics()
    renderer = ctx.renderer()
    imager = ctx.imager()
    clean = [renderer.render(truth, optics, cam, con.sun) for cam in cams]
    alphas = [polarizer_alpha(cam) for cam in cams]
    dt = imager.exposure(clean, alphas)
    noisy = ctx.cfg["sensor.noise"]
    for d in ("measurements", "images"):
        ctx.path(d).mkdir(parents=True, exist_ok=True)
    write_grid(ctx.path("truth.grid"), truth)
    views = []
    for v, (cam, img, alpha) in enumerate(zip(cams, clean, alphas)):
        rng = stream(ctx.seed, "render", v) if noisy else None
        m = imager.measure(img, alpha, dt, rng)
        name = f"view_{v:02d}"
        write_stokes_csv(ctx.path("measurements", name + ".csv"), m.stokes)
        for comp, arr in zip("IQU", m.stokes.stack()):
            write_pgm(ctx.path("images", f"{name}_{comp}.pgm"), arr, comment=f"{name} Stokes {comp}")
        write_pgm(ctx.path("images", f"{name}_DoLP.pgm"), m.stokes.dolp(floor=1e-12), 0.0, 1.0,
                  comment=f"{name} DoLP")
        views.append({"file": name + ".csv", "camera": camera_record(cam),
                      "saturated_pixels": int(m.saturated.sum())})
    write_json(ctx.path("measurements", "meta.json"),
               {"dt": dt, "seed": ctx.seed, "noise": noisy, "sun": list(con.sun),
                "band": [ctx.cfg["band.lambda_min"], ctx.cfg["band.lambda_max"]], "views": views})
    log.info("rendered %d views, exposure %.4g s", len(cams), dt)
    return {"views": len(cams), "dt": dt}


def load_measurements(ctx: Context) -> MeasurementSet:
    meta = read_json(ctx.need("measurements", "meta.json"))
    cams = [camera_from_record(v["camera"]) for v in meta["views"]]
    imgs = [read_stokes_csv(ctx.need("measurements", v["file"])) for v in meta["views"]]
    return MeasurementSet(cams, imgs, np.array(meta["sun"]), meta["dt"], meta["seed"],
                          tuple(meta["band"]))


def _init_config(ctx: Context) -> InitConfig:
    s = ctx.cfg.section("init")
    n = s["points"]
    return InitConfig(s["method"], np.linspace(*s["l_range"], n), np.linspace(*s["r_range"], n))


def stage_init(ctx: Context):
    meas = load_measurements(ctx)
    truth = read_grid(ctx.need("truth.grid"))
    # the cloud mask is an input; only its support is taken from the truth file
    conf = _init_config(ctx)
    res = grid_search_init(conf, meas, truth, ctx.optics(), ctx.renderer())
    write_grid(ctx.path("init.grid"), res.cloud)
    write_json(ctx.path("init.json"), {"method": res.method, "params": list(res.params),
                                       "index": list(res.index) if res.index else None})
    if res.surface is not None:
        rows = [(a, b, res.surface[i, j]) for i, a in enumerate(conf.l_values)
                for j, b in enumerate(conf.r_values)]
        write_csv(ctx.path("cost_surface.csv"), ("alpha_l", "alpha_r", "cost"), rows)
        surf = np.log10(res.surface + 1e-300)
        write_pgm(ctx.path("cost_surface.pgm"), surf, comment="log10 cost; rows alpha_l, cols alpha_r")
    z = res.cloud.altitudes
    cols = [(float(z[k]),) + tuple(_layer_mean(c, k) for c in (res.cloud, truth))
            for k in range(len(z)) if truth.mask[:, :, k].any()]
    write_csv(ctx.path("init_profile.csv"),
              ("altitude_m", "init_lwc", "init_re", "truth_lwc", "truth_re"),
              [(a, b[0], b[1], c[0], c[1]) for a, b, c in cols])
    return {"method": res.method, "params": list(res.params)}


def _layer_mean(cloud: VoxelCloud, k: int):
    m = cloud.mask[:, :, k]
    return float(cloud.lwc[:, :, k][m].mean()), float(cloud.r_e[:, :, k][m].mean())


def _retrieval_options(ctx: Context) -> RetrievalOptions:
    r = ctx.cfg.section("retrieval")
    return RetrievalOptions(mode=r["mode"], pi_lwc=r["pi_lwc"], pi_re=r["pi_re"],
                            max_iter=r["max_iter"], max_cycles=r["max_cycles"],
                            phase_tol=r["phase_tol"], cycle_tol=r["cycle_tol"],
                            retrieve_re=r["retrieve_re"], dump_path=str(ctx.path("abort_iterate.npz")))


def stage_retrieve(ctx: Context):
    meas = load_measurements(ctx)
    init = read_grid(ctx.need("init.grid"))
    optics = ctx.optics()
    obj = Objective(meas, init, optics, ctx.renderer())
    st = retrieve(meas, init, optics, options=_retrieval_options(ctx), objective=obj)
    write_grid(ctx.path("retrieved.grid"), st.cloud)
    write_csv(ctx.path("cost_history.csv"), ("iteration", "cost"), list(enumerate(st.costs)))
    write_csv(ctx.path("phase_log.csv"), ("phase", "first_iteration", "last_iteration",
                                          "cost_in", "cost_out"), st.phase_log)
    summary = {"mode": ctx.cfg["retrieval.mode"], "iterations": st.iterations,
               "initial_cost": st.costs[0], "final_cost": st.costs[-1], "phases": len(st.phase_log)}
    write_json(ctx.path("retrieval.json"), summary)
    return summary


def stage_evaluate(ctx: Context):
    truth = read_grid(ctx.need("truth.grid"))
    report = {}
    for name in ("init", "retrieved"):
        p = ctx.path(name + ".grid")
        if p.exists():
            e = epsilon_errors(read_grid(p), truth)
            report[name] = {"eps_lwc": e.eps_lwc, "eps_re": e.eps_re}
    if not report:
        raise StageError("nothing to evaluate; run init or retrieve first")
    write_json(ctx.path("evaluation.json"), report)
    return report


def stage_plan_cloudbow(ctx: Context):
    truth = ctx.truth()
    target = tuple(truth.center)
    con = ctx.constellation(target)
    plan = ctx.cloudbow(con, target)
    report = {
        "selected_satellites": plan.selected,
        "nominal_scattering_angles": {str(k): v for k, v in sorted(plan.nominal_angles.items())},
        "views": [{"satellite": c.satellite, "arc_offset_m": c.arc_offset,
                   "scattering_angle_deg": a} for c, a in zip(plan.cameras, plan.angles)],
    }
    write_json(ctx.path("cloudbow.json"), report)
    return report


STAGES = {"render": stage_render, "init": stage_init, "retrieve": stage_retrieve,
          "evaluate": stage_evaluate, "plan-cloudbow": stage_plan_cloudbow}
FULL = ("render", "init", "retrieve", "evaluate", "plan-cloudbow")


def write_manifest(ctx: Context, stages):
    manifest = {
        "config": serialize_config(ctx.cfg).splitlines(),
        "seed": ctx.seed,
        "stages": list(stages),
        "versions": {"cloudtomo": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
        "files": tree_hashes(ctx.out),
    }
    write_json(ctx.path("manifest.json"), manifest)


def run_pipeline(cfg: ExperimentConfig, command: str, out=None) -> dict:
    """Run one subcommand (or ``full``) and refresh the manifest."""
    if command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}")
    ctx = Context(cfg, Path(out if out is not None else cfg["output"]))
    ctx.out.mkdir(parents=True, exist_ok=True)
    stages = FULL if command == "full" else (command,)
    results = {}
    for name in stages:
        results[name] = STAGES[name](ctx)
    write_manifest(ctx, stages)
    return results


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="cloudtomo", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="key = value experiment file (defaults if omitted)")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out) if args.out else None
    try:
        cfg = load_config(args.config) if args.config else parse_config("")
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=args.seed)
        out = Path(args.out or cfg["output"])
        run_pipeline(cfg, args.command, out)
    except (ConfigError, StageError, OSError) as exc:
        return _fail(out, args.command, "config", exc, EXIT_CONFIG)
    except NUMERIC_ERRORS as exc:
        return _fail(out, args.command, "numerical", exc, EXIT_NUMERIC)
    return EXIT_OK


def _fail(out, command, kind, exc, code):
    record = {"command": command, "kind": kind, "error": type(exc).__name__, "message": str(exc)}
    if out is not None:
        try:
            Path(out).mkdir(parents=True, exist_ok=True)
            write_json(Path(out) / "error.json", record)
        except OSError:
            pass
    print(f"cloudtomo: {kind} error: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
