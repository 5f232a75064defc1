"""File formats: 8-bit images, binary cost-volume dumps, disparity CSVs."""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .core import DisparityMap, ShapeError

VOLUME_MAGIC = b"CSTV"


def read_image(path) -> np.ndarray:
    """Read a grayscale PGM/PNG image normalized to ``[0, 1]`` (float64)."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        else:
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return np.clip(arr, 0.0, 1.0)


def to_uint8(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def write_image(path, img) -> None:
    """Write a ``[0, 1]`` grid as an 8-bit image; format follows the suffix."""
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() in (".pgm", ".pnm") else "PNG"
    # PIL writes PGM for mode "L" under the PPM plugin.
    Image.fromarray(to_uint8(img), mode="L").save(path, format=fmt)


def write_volume(path, vc) -> None:
    """Dump an ``(H, W, D)`` volume as little-endian f32 behind a 16-byte header."""
    arr = np.asarray(vc)
    if arr.ndim != 3:
        raise ShapeError(f"expected (H, W, D) volume, got {arr.shape}")
    h, w, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC + struct.pack("<III", h, w, d))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_volume(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != VOLUME_MAGIC:
            raise ValueError(f"{path}: not a cost-volume dump")
        h, w, d = struct.unpack("<III", header[4:])
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != h * w * d:
        raise ValueError(f"{path}: truncated volume ({data.size} of {h * w * d} values)")
    return data.reshape(h, w, d).astype(np.float32)


def write_disparity_csv(path, dm: DisparityMap) -> None:
    """One row per pixel: ``u, v, d, valid``; invalid pixels carry ``d = 0``."""
    h, w = dm.shape
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["u", "v", "d", "valid"])
        for v in range(h):
            for u in range(w):
                ok = bool(dm.mask[v, u])
                d = float(dm.disp[v, u]) if ok else 0.0
                wr.writerow([u, v, repr(d), int(ok)])


def read_disparity_csv(path, shape: tuple[int, int] | None = None) -> DisparityMap:
    rows = []
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        missing = {"u", "v", "d", "valid"} - set(rd.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for r in rd:
            rows.append((int(r["u"]), int(r["v"]), float(r["d"]), int(r["valid"])))
    if shape is None:
        if not rows:
            raise ValueError(f"{path}: no rows and no shape given")
        shape = (max(r[1] for r in rows) + 1, max(r[0] for r in rows) + 1)
    disp = np.zeros(shape)
    mask = np.zeros(shape, dtype=bool)
    for u, v, d, ok in rows:
        disp[v, u] = d
        mask[v, u] = bool(ok)
    return DisparityMap(disp, mask)
