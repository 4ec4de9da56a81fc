"""Snapshots, PGM images and CSV outputs."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

_DTYPES = {"f32": "<f4", "f64": "<f8", "i32": "<i4"}


def _tag(arr: np.ndarray) -> str:
    for tag, dt in _DTYPES.items():
        if np.dtype(dt) == arr.dtype.newbyteorder("<"):
            return tag
    raise ValueError(f"unsupported dtype {arr.dtype}")


def save_snapshot(store, path, names=None, grads=False) -> None:
    """Write fields as one little-endian binary file plus ``<path>.json``.

    The sidecar lists ``name``, ``dtype``, ``shape`` and byte ``offset`` of
    every record, in file order.
    """
    path = Path(path)
    records, offset = [], 0
    arrays = store.snapshot(names, grads=grads)
    with open(path, "wb") as fh:
        for name, arr in arrays.items():
            tag = _tag(arr)
            data = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
            fh.write(data)
            records.append({"name": name, "dtype": tag, "shape": list(arr.shape), "offset": offset})
            offset += len(data)
    Path(str(path) + ".json").write_text(json.dumps({"fields": records}, indent=1) + "\n")


def load_snapshot(path) -> dict:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    raw = path.read_bytes()
    out = {}
    for rec in meta["fields"]:
        dt = np.dtype(_DTYPES[rec["dtype"]])
        count = int(np.prod(rec["shape"])) if rec["shape"] else 1
        arr = np.frombuffer(raw, dt, count, rec["offset"]).reshape(rec["shape"])
        out[rec["name"]] = arr.astype(dt.newbyteorder("="))
    return out


def restore_snapshot(store, path) -> None:
    store.restore(load_snapshot(path))


def write_pgm(path, image, lo=None, hi=None) -> None:
    """Write a 2-D array as binary 8-bit PGM, min-max normalized.

    A constant image maps to all zeros.
    """
    a = np.asarray(image, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D array, got shape {a.shape}")
    lo = float(np.nanmin(a)) if lo is None else lo
    hi = float(np.nanmax(a)) if hi is None else hi
    span = hi - lo
    if not np.isfinite(span) or span <= 0:
        px = np.zeros(a.shape, np.uint8)
    else:
        px = np.clip(np.rint((np.nan_to_num(a, nan=lo) - lo) / span * 255), 0, 255).astype(np.uint8)
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) or ASCII (P2) PGM; values scaled to [0, 1]."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode("ascii"))
        pos = end
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == "P5":
        pos += 1
        dt = np.uint8 if maxval < 256 else np.dtype(">u2")
        px = np.frombuffer(data, dt, w * h, pos)
    elif magic == "P2":
        px = np.array(data[pos:].split()[: w * h], dtype=np.int64)
    else:
        raise ValueError(f"{path}: not a PGM file (magic {magic!r})")
    return px.reshape(h, w).astype(np.float64) / maxval


def write_loss_csv(path, losses, extra=None) -> None:
    """``iteration,loss[,extra...]`` with full float precision."""
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss", *extra])
        for i, loss in enumerate(losses):
            w.writerow([i, repr(float(loss)), *(repr(float(v[i])) for v in extra.values())])


def read_loss_csv(path) -> list:
    with open(path, newline="") as fh:
        return [float(row["loss"]) for row in csv.DictReader(fh)]


def write_grads_csv(path, name, grad) -> None:
    """One row per element: ``field,index,grad``."""
    g = np.asarray(grad)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["field", "index", "grad"])
        for ix in np.ndindex(g.shape) if g.shape else [()]:
            w.writerow([name, ";".join(map(str, ix)), repr(float(g[ix]))])


def frame_name(i: int) -> str:
    return f"frame_{i:04d}.pgm"


def rasterize_points(points, size: int = 128, bounds=(0.0, 0.0, 1.0, 1.0), radius: int = 1) -> np.ndarray:
    """Splat 2-D points into a ``size`` x ``size`` image (row 0 at the top)."""
    img = np.zeros((size, size))
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    x0, y0, x1, y1 = bounds
    cols = np.rint((p[:, 0] - x0) / (x1 - x0) * (size - 1)).astype(int)
    rows = np.rint((1 - (p[:, 1] - y0) / (y1 - y0)) * (size - 1)).astype(int)
    for r, c in zip(rows, cols):
        img[max(r - radius, 0):max(r + radius + 1, 0), max(c - radius, 0):max(c + radius + 1, 0)] = 1
    return img
