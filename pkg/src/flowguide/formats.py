"""On-disk formats: FMLT tensors, binary PGM frames, CSV reports, JSON manifests.

FMLT layout (all little-endian)::

    b"FMLT" | u32 version (=1) | u32 rank | rank x u32 dims | prod(dims) x f32

Values are row-major.  Readers reject a wrong magic, an unknown version and
payloads whose length disagrees with the header.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from pathlib import Path

import numpy as np

FMLT_MAGIC = b"FMLT"
FMLT_VERSION = 1
FORMAT_VERSIONS = {"fmlt": FMLT_VERSION, "pgm": "P5", "manifest": 1}


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


def fmlt_bytes(array) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = FMLT_MAGIC + struct.pack("<II", FMLT_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def parse_fmlt(buf: bytes) -> np.ndarray:
    if len(buf) < 12:
        raise FormatError("truncated FMLT header")
    if buf[:4] != FMLT_MAGIC:
        raise FormatError("bad magic")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != FMLT_VERSION:
        raise FormatError(f"unsupported FMLT version {version}")
    off = 12 + 4 * rank
    if len(buf) < off:
        raise FormatError("truncated FMLT header")
    dims = struct.unpack_from(f"<{rank}I", buf, 12)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) - off != 4 * count:
        raise FormatError(f"truncated FMLT payload: expected {4 * count} bytes, found {len(buf) - off}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float32).reshape(dims)


def save_fmlt(path, array) -> None:
    Path(path).write_bytes(fmlt_bytes(array))


def load_fmlt(path) -> np.ndarray:
    return parse_fmlt(Path(path).read_bytes())


def to_u8(image) -> np.ndarray:
    """Quantize values in [0, 1] to 8-bit gray levels (round half to even)."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.rint(img * 255.0).astype(np.uint8)


def pgm_bytes(image) -> bytes:
    img = np.asarray(image)
    if img.ndim != 2:
        raise FormatError(f"PGM needs a 2-D image, got shape {img.shape}")
    if img.dtype != np.uint8:
        img = to_u8(img)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def parse_pgm(buf: bytes) -> np.ndarray:
    """Decode a binary PGM with maxval 255 into a uint8 array."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5":
        raise FormatError("bad magic")
    w, h, maxval = (int(x) for x in tokens[1:])
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval}")
    pos += 1
    data = buf[pos:pos + w * h]
    if len(data) != w * h:
        raise FormatError("truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def save_pgm(path, image) -> None:
    Path(path).write_bytes(pgm_bytes(image))


def load_pgm(path) -> np.ndarray:
    return parse_pgm(Path(path).read_bytes())


def save_frames(directory, frames, prefix="frame") -> list[str]:
    """Write each frame as ``<prefix>_<index>.pgm`` with a zero-padded index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(len(frames) - 1)))
    names = []
    for k, frame in enumerate(frames):
        name = f"{prefix}_{k:0{width}d}.pgm"
        save_pgm(directory / name, frame)
        names.append(name)
    return names


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def write_csv(path, columns, rows, mode="w") -> None:
    """Write dict rows in a fixed column order with RFC-4180 quoting."""
    new = mode == "w" or not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\r\n",
                                extrasaction="ignore")
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: _csv_value(row.get(k, "")) for k in columns})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _csv_value(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v
