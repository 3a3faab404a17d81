"""Experiment configuration: a flat ``section.key = value`` text format.

Values are JSON literals (numbers, true/false, quoted strings, lists); a bare
word is read as a string. ``#`` starts a comment line. Every key has a
default, so an empty file is a complete configuration.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

SCENE_KINDS = ("monotonic", "blob", "file")
MASK_POLICIES = ("ellipsoid", "full")
INIT_METHODS = ("H_Typical", "H_Stokes", "M_Stokes", "M_DoLP")
MODES = ("joint", "alternating")


class ConfigError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


def _num(lo=-math.inf, hi=math.inf, lo_open=False, hi_open=False, integer=False):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ValueError("expected a number")
        if integer and not float(v).is_integer():
            raise ValueError("expected an integer")
        if not math.isfinite(v):
            raise ValueError("must be finite")
        if v < lo or v > hi or (lo_open and v == lo) or (hi_open and v == hi):
            lb = "(" if lo_open else "["
            rb = ")" if hi_open else "]"
            raise ValueError(f"must lie in {lb}{lo}, {hi}{rb}")
        return int(v) if integer else float(v)
    return check


def _choice(options):
    def check(v):
        if v not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return v
    return check


def _bool(v):
    if not isinstance(v, bool):
        raise ValueError("expected true or false")
    return v


def _str(v):
    if not isinstance(v, str):
        raise ValueError("expected a string")
    return v


def _list(item, length=None):
    def check(v):
        if not isinstance(v, list):
            raise ValueError("expected a list")
        if length is not None and len(v) != length:
            raise ValueError(f"expected {length} entries")
        return [item(x) for x in v]
    return check


_pos = _num(0, lo_open=True)
_posint = _num(1, integer=True)
_unit = _num(0, 1)

# key -> (default, validator)
SCHEMA = {
    "seed": (0, _num(0, 2 ** 63 - 1, integer=True)),
    "output": ("out", _str),

    "scene.kind": ("blob", _choice(SCENE_KINDS)),
    "scene.path": ("", _str),
    "scene.preset": ("paper-like", _choice(("paper-like", "none"))),
    "scene.shape": ([10, 10, 10], _list(_posint, 3)),
    "scene.voxel_size": (20.0, _pos),
    "scene.base_height": (550.0, _num(0)),
    "scene.v_e": (0.1, _num(0, 0.5, True, True)),
    "scene.mask": ("ellipsoid", _choice(MASK_POLICIES)),
    "scene.alpha_l": (0.5, _num(0)),
    "scene.alpha_r": (10.0, _num(0)),
    "scene.perturbation": (0.2, _num(0, 0.9)),

    "constellation.satellites": (10, _posint),
    "constellation.altitude_km": (500.0, _pos),
    "constellation.spacing_km": (100.0, _pos),
    "constellation.nadir_index": (5, _posint),
    "constellation.resolution": ([32, 32], _list(_posint, 2)),
    "constellation.gsd": (20.0, _pos),

    "sun.zenith": (25.0, _num(0, 90, hi_open=True)),
    "sun.azimuth": (90.0, _num(-360, 360)),

    "band.lambda_min": (620.0, _pos),
    "band.lambda_max": (670.0, _pos),
    "band.toa_scale": (1.0, _pos),

    "sensor.pixel_pitch": (3.45e-6, _pos),
    "sensor.qe": (0.55, _unit),
    "sensor.optics_efficiency": (0.9, _unit),
    "sensor.f_number": (2.8, _pos),
    "sensor.full_well": (10500.0, _pos),
    "sensor.read_noise": (2.31, _num(0)),
    "sensor.dark_current": (3.51, _num(0)),
    "sensor.bits": (10, _num(1, 32, integer=True)),
    "sensor.noise": (True, _bool),

    "render.substeps": (1, _posint),
    "render.supersample": (1, _posint),
    "render.rayleigh_extinction": (0.0, _num(0)),

    "cloudbow.enabled": (False, _bool),
    "cloudbow.range": ([135.0, 150.0], _list(_num(0, 180), 2)),
    "cloudbow.resolution": (1.5, _pos),
    "cloudbow.max_satellites": (2, _posint),

    "init.method": ("M_DoLP", _choice(INIT_METHODS)),
    "init.l_range": ([0.1, 1.6], _list(_pos, 2)),
    "init.r_range": ([3.0, 15.0], _list(_pos, 2)),
    "init.points": (16, _posint),

    "retrieval.mode": ("alternating", _choice(MODES)),
    "retrieval.pi_lwc": (10.0, _pos),
    "retrieval.pi_re": (0.1, _pos),
    "retrieval.max_iter": (500, _posint),
    "retrieval.max_cycles": (20, _posint),
    "retrieval.phase_tol": (1e-4, _pos),
    "retrieval.cycle_tol": (1e-3, _pos),
    "retrieval.retrieve_re": (True, _bool),
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def section(self, name: str) -> dict:
        p = name + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def with_overrides(self, **kw) -> "ExperimentConfig":
        values = dict(self.values)
        values.update({k.replace("__", "."): v for k, v in kw.items()})
        text = "".join(f"{k} = {json.dumps(values[k])}\n" for k in SCHEMA if k in values)
        unknown = [k for k in values if k not in SCHEMA]
        text += "".join(f"{k} = {json.dumps(values[k])}\n" for k in unknown)
        return parse_config(text)


def _value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        if raw and all(c.isalnum() or c in "-_./" for c in raw):
            return raw
        raise


def _cross_checks(v: dict):
    # (message, offending key) pairs for constraints spanning several keys
    if v["band.lambda_max"] <= v["band.lambda_min"]:
        yield "band.lambda_max must exceed band.lambda_min", "band.lambda_max"
    if v["constellation.nadir_index"] > v["constellation.satellites"]:
        yield "constellation.nadir_index exceeds the number of satellites", "constellation.nadir_index"
    lo, hi = v["cloudbow.range"]
    if hi < lo:
        yield "cloudbow.range must be ordered", "cloudbow.range"
    for key in ("init.l_range", "init.r_range"):
        if v[key][1] < v[key][0]:
            yield f"{key} must be ordered", key
    if v["scene.kind"] == "file" and not v["scene.path"]:
        yield "scene.kind = file needs scene.path", "scene.kind"


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate; errors name the line and key."""
    values = {k: d for k, (d, _) in SCHEMA.items()}
    where = {}
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ConfigError(f"expected 'key = value', got {s!r}", n)
        key, raw = (p.strip() for p in s.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", n)
        if key in where:
            raise ConfigError(f"duplicate key {key!r} (first set on line {where[key]})", n)
        try:
            val = _value(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"cannot parse value for {key!r}: {exc.msg}", n) from None
        try:
            values[key] = SCHEMA[key][1](val)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}", n) from None
        where[key] = n
    for msg, key in _cross_checks(values):
        raise ConfigError(msg, where.get(key))
    return ExperimentConfig(values)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Every key, in schema order, as ``key = json`` lines."""
    return "".join(f"{k} = {json.dumps(cfg.values[k])}\n" for k in SCHEMA)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
