"""Text grid files, 16-bit PGM images, CSV tables and run manifests."""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .microphysics import VoxelCloud
from .rendering import StokesImage

GRID_MAGIC = "# cloudtomo grid 1"


def write_grid(path, cloud: VoxelCloud):
    """Header lines then one ``i j k lwc r_e`` record per masked voxel, lexicographic."""
    lines = [GRID_MAGIC,
             "shape " + " ".join(str(n) for n in cloud.shape),
             "voxel_size " + " ".join(repr(float(v)) for v in cloud.voxel_size),
             f"base_height {float(cloud.base_height)!r}",
             f"v_e {float(cloud.v_e)!r}",
             "i j k lwc r_e"]
    for i, j, k in np.argwhere(cloud.mask):
        lines.append(f"{i} {j} {k} {float(cloud.lwc[i, j, k])!r} {float(cloud.r_e[i, j, k])!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_grid(path) -> VoxelCloud:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or text[0] != GRID_MAGIC:
        raise ValueError(f"{path}: not a cloudtomo grid file")
    head = {}
    n = 1
    while n < len(text) and not text[n].startswith("i j k"):
        key, *vals = text[n].split()
        head[key] = vals
        n += 1
    try:
        shape = tuple(int(v) for v in head["shape"])
        voxel = tuple(float(v) for v in head["voxel_size"])
        base = float(head["base_height"][0])
        v_e = float(head["v_e"][0])
    except (KeyError, IndexError, ValueError) as exc:
        raise ValueError(f"{path}: bad header ({exc})") from None
    lwc = np.zeros(shape)
    r_e = np.zeros(shape)
    mask = np.zeros(shape, dtype=bool)
    prev = None
    for line in text[n + 1:]:
        if not line.strip():
            continue
        i, j, k, a, b = line.split()
        idx = (int(i), int(j), int(k))
        if prev is not None and idx <= prev:
            raise ValueError(f"{path}: records out of lexicographic order at {idx}")
        prev = idx
        mask[idx] = True
        lwc[idx] = float(a)
        r_e[idx] = float(b)
    return VoxelCloud(lwc, r_e, mask, voxel, base, v_e)


def write_pgm(path, image, lo=None, hi=None, comment=""):
    """16-bit binary PGM; the linear scaling is recorded as a header comment."""
    a = np.asarray(image, dtype=float)
    lo = float(a.min()) if lo is None else float(lo)
    hi = float(a.max()) if hi is None else float(hi)
    span = hi - lo if hi > lo else 1.0
    q = np.clip(np.rint((a - lo) / span * 65535), 0, 65535).astype(">u2")
    head = f"P5\n# value = {lo!r} + pixel * {span / 65535!r}\n"
    if comment:
        head += f"# {comment}\n"
    head += f"{a.shape[1]} {a.shape[0]}\n65535\n"
    Path(path).write_bytes(head.encode("ascii") + q.tobytes())


def read_pgm(path):
    """Decode a file written by :func:`write_pgm` back to scaled float values."""
    data = Path(path).read_bytes()
    fields, comments, pos = [], [], 0
    while len(fields) < 4:
        end = data.index(b"\n", pos)
        line = data[pos:end].decode("ascii")
        pos = end + 1
        if line.startswith("#"):
            comments.append(line)
        else:
            fields.extend(line.split())
    w, h = int(fields[1]), int(fields[2])
    pix = np.frombuffer(data[pos:pos + 2 * w * h], dtype=">u2").reshape(h, w).astype(float)
    scale = comments[0].split("=")[1].split("+ pixel *")
    return float(scale[0]) + pix * float(scale[1])


def write_csv(path, header, rows):
    out = [",".join(header)]
    for row in rows:
        out.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def read_csv(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    return header, [line.split(",") for line in lines[1:] if line]


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_stokes_csv(path, img: StokesImage):
    rows = [(r, c, img.I[r, c], img.Q[r, c], img.U[r, c])
            for r in range(img.shape[0]) for c in range(img.shape[1])]
    write_csv(path, ("row", "col", "I", "Q", "U"), rows)


def read_stokes_csv(path) -> StokesImage:
    _, rows = read_csv(path)
    a = np.array([[float(x) for x in r] for r in rows])
    shape = (int(a[:, 0].max()) + 1, int(a[:, 1].max()) + 1)
    out = np.zeros((3,) + shape)
    out[:, a[:, 0].astype(int), a[:, 1].astype(int)] = a[:, 2:].T
    return StokesImage.from_stack(out)


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n",
                          encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, Path):
        return str(v)
    raise TypeError(f"cannot serialize {type(v).__name__}")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_hashes(root, exclude=("manifest.json",)) -> dict:
    """sha256 of every file under ``root``, keyed by sorted relative path."""
    root = Path(root)
    out = {}
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            p = Path(dirpath) / name
            rel = p.relative_to(root).as_posix()
            if rel not in exclude:
                out[rel] = sha256_file(p)
    return out
