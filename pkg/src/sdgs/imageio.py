"""Binary PPM/PGM reading and writing (8-bit by default; 16-bit PPM is read too)."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _header(kind: str, w: int, h: int, maxval: int) -> bytes:
    return f"{kind}\n{w} {h}\n{maxval}\n".encode("ascii")


def write_ppm(path, img, maxval: int = 255) -> None:
    """Write an (H, W, 3) float image in [0, 1]."""
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    h, w, _ = img.shape
    q = np.round(img * maxval)
    data = q.astype(">u2").tobytes() if maxval > 255 else q.astype(np.uint8).tobytes()
    Path(path).write_bytes(_header("P6", w, h, maxval) + data)


def write_pgm(path, img) -> None:
    """Write an (H, W) uint8 image."""
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(_header("P5", w, h, 255) + img.tobytes())


def _parse(buf: bytes):
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
            raise ValueError("truncated image header")
        tokens.append(buf[start:pos].decode("ascii"))
    return tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3]), pos + 1


def _read(path, kind: str, channels: int):
    buf = Path(path).read_bytes()
    magic, w, h, maxval, off = _parse(buf)
    if magic != kind:
        raise ValueError(f"{path}: expected {kind}, found {magic}")
    dtype = ">u2" if maxval > 255 else np.uint8
    count = w * h * channels
    if len(buf) - off < count * np.dtype(dtype).itemsize:
        raise ValueError(f"{path}: truncated pixel data")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
    return data.reshape((h, w, channels) if channels > 1 else (h, w)), maxval


def read_ppm(path) -> np.ndarray:
    data, maxval = _read(path, "P6", 3)
    return data.astype(np.float64) / maxval


def read_pgm(path) -> np.ndarray:
    data, _ = _read(path, "P5", 1)
    return data.astype(np.uint8)
