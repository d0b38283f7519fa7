"""Readers and writers for the on-disk formats: PFM depth, PGM masks, JSON records."""

from __future__ import annotations

import json
import os
import re
import tempfile
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_pfm(path, depth: np.ndarray) -> None:
    """Write a grayscale little-endian PFM ("Pf", scale -1.0).

    Rows are stored bottom-to-top as the format requires; values are float32.
    """
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise FormatError("PFM depth maps must be 2D")
    h, w = depth.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    body = np.flipud(depth.astype("<f4")).tobytes()
    atomic_write_bytes(path, header + body)


_PFM_HEADER = re.compile(rb"^(Pf|PF)\s+(\d+)\s+(\d+)\s+(-?[0-9.eE+-]+)\s")


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = _PFM_HEADER.match(data)
    if m is None:
        raise FormatError(f"{path}: not a PFM file")
    kind, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    if kind != b"Pf":
        raise FormatError(f"{path}: only grayscale PFM is supported")
    dtype = "<f4" if scale < 0 else ">f4"
    body = data[m.end():]
    if len(body) != w * h * 4:
        raise FormatError(f"{path}: expected {w * h * 4} data bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=dtype).reshape(h, w)
    return np.flipud(arr).astype(np.float32)


def write_pgm(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + np.where(mask, 255, 0).astype(np.uint8).tobytes())


_PGM_HEADER = re.compile(rb"^P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM mask; any nonzero byte counts as true."""
    data = Path(path).read_bytes()
    m = _PGM_HEADER.match(data)
    if m is None:
        raise FormatError(f"{path}: not a binary PGM file")
    w, h, maxval = int(m.group(1)), int(m.group(2)), int(m.group(3))
    if maxval > 255:
        raise FormatError(f"{path}: 16-bit PGM not supported")
    body = data[m.end():]
    if len(body) != w * h:
        raise FormatError(f"{path}: expected {w * h} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w) > 0


def fmt6(x) -> float:
    """Round to 6 significant digits for report output."""
    x = float(x)
    if not np.isfinite(x) or x == 0.0:
        return x
    return float(f"{x:.6g}")
