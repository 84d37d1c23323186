"""Binary checkpoints, PPM/PGM images and metrics CSV.

Checkpoint layout (all integers little-endian)::

    b"UPAD" | u32 version | u32 entry count | entries...
    entry: u32 name length | utf-8 name | u32 dtype length | b"f64"
           | u32 ndim | u64 dim * ndim | f64 payload (C order)
"""
from __future__ import annotations

import math
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"UPAD"
CKPT_VERSION = 1
METRICS_HEADER = ("step", "loss", "rgb_l1", "depth_l1", "rays", "seconds")


def save_checkpoint(path, entries: Mapping[str, object]) -> None:
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", CKPT_VERSION, len(entries))
    for name, value in entries.items():
        arr = np.asarray(value, dtype="<f8", order="C")  # keeps 0-d scalars 0-d
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", 3) + b"f64"
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise FormatError(f"{path}: truncated checkpoint")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    version, count = take("<II")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    out: OrderedDict = OrderedDict()
    for _ in range(count):
        (n,) = take("<I")
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (n,) = take("<I")
        dtype = data[pos:pos + n]
        pos += n
        if dtype != b"f64":
            raise FormatError(f"{path}: unsupported dtype {dtype!r} for {name}")
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q") if ndim else ()
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(data):
            raise FormatError(f"{path}: truncated payload for {name}")
        out[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def _header(fmt: bytes, width: int, height: int, maxval: int) -> bytes:
    return b"%s\n%d %d\n%d\n" % (fmt, width, height, maxval)


def _parse_header(data: bytes, expected: bytes):
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated image header")
        tokens.append(data[start:pos])
    if tokens[0] != expected:
        raise FormatError(f"expected {expected!r} image, got {tokens[0]!r}")
    return int(tokens[1]), int(tokens[2]), int(tokens[3]), pos + 1


def encode_rgb(rgb: np.ndarray) -> np.ndarray:
    return np.floor(255.0 * np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0) + 0.5).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary P6, maxval 255, value ``round(255 * clamp(c, 0, 1))``."""
    q = encode_rgb(rgb)
    H, W, _ = q.shape
    Path(path).write_bytes(_header(b"P6", W, H, 255) + q.tobytes())


def read_ppm(path) -> np.ndarray:
    """8-bit ``(H, W, 3)`` array."""
    data = Path(path).read_bytes()
    W, H, maxval, pos = _parse_header(data, b"P6")
    if maxval != 255:
        raise FormatError("only maxval 255 PPM is supported")
    return np.frombuffer(data, dtype=np.uint8, count=H * W * 3, offset=pos).reshape(H, W, 3).copy()


def encode_depth(depth: np.ndarray, depth_max: float) -> np.ndarray:
    d = np.nan_to_num(np.asarray(depth, dtype=np.float64), nan=0.0)
    return np.floor(65535.0 * np.clip(d / depth_max, 0.0, 1.0) + 0.5).astype(">u2")


def write_pgm_depth(path, depth: np.ndarray, depth_max: float | None = None) -> float:
    """Binary P5, maxval 65535; ``depth_max`` goes to ``<path>.depth_max.txt``."""
    d = np.nan_to_num(np.asarray(depth, dtype=np.float64), nan=0.0)
    if depth_max is None:
        depth_max = float(d.max()) if d.size and d.max() > 0 else 1.0
    q = encode_depth(d, depth_max)
    H, W = q.shape
    Path(path).write_bytes(_header(b"P5", W, H, 65535) + q.tobytes())
    Path(str(path) + ".depth_max.txt").write_text(f"{depth_max!r}\n")
    return depth_max


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    W, H, maxval, pos = _parse_header(data, b"P5")
    dtype = ">u2" if maxval > 255 else np.uint8
    return np.frombuffer(data, dtype=dtype, count=H * W, offset=pos).reshape(H, W).astype(np.int64)


def read_pgm_depth(path) -> np.ndarray:
    depth_max = float(Path(str(path) + ".depth_max.txt").read_text())
    return read_pgm(path) / 65535.0 * depth_max


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


def format_metrics_row(row) -> str:
    return ",".join(_fmt(v) for v in row) + "\n"


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(format_metrics_row(row))


def _parse(v: str):
    try:
        return float(v)
    except ValueError:
        return v


def read_csv(path) -> list:
    """Rows as dicts; numeric fields become floats, others stay strings."""
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    return [dict(zip(header, (_parse(v) for v in line.split(",")))) for line in lines[1:]]


def write_points(path, points: np.ndarray) -> None:
    """LiDAR dump: CSV with ``x,y,z,intensity`` header."""
    with open(path, "w") as fh:
        fh.write("x,y,z,intensity\n")
        for row in np.asarray(points, dtype=np.float64):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_points(path) -> np.ndarray:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return arr.reshape(-1, 4)
