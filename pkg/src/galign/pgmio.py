"""Reading and writing binary (P5) PGM images with an 8-bit range."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError


def write_pgm(path: str | Path, data: np.ndarray) -> None:
    """Write a 2-D uint8 array as a binary PGM with maxval 255."""
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise DataError(f"PGM data must be 2-D, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise DataError(f"PGM data must be uint8, got dtype {arr.dtype}")
    h, w = arr.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + arr.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary PGM into a (height, width) uint8 array.

    Accepts comments and arbitrary whitespace in the header, but requires
    the P5 magic and a maxval of 255.
    """
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise DataError(f"{path}: not a binary PGM (missing P5 magic)")

    # Tokenize the header: magic, width, height, maxval. A comment runs
    # from '#' to end of line. Exactly one whitespace byte separates the
    # maxval from the pixel data.
    tokens: list[int] = []
    pos = 2
    while len(tokens) < 3 and pos < len(raw):
        c = raw[pos : pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            nl = raw.find(b"\n", pos)
            pos = len(raw) if nl < 0 else nl + 1
        elif c.isdigit():
            end = pos
            while end < len(raw) and raw[end : end + 1].isdigit():
                end += 1
            tokens.append(int(raw[pos:end]))
            pos = end
        else:
            raise DataError(f"{path}: malformed PGM header")
    if len(tokens) < 3:
        raise DataError(f"{path}: truncated PGM header")
    width, height, maxval = tokens
    if maxval != 255:
        raise DataError(f"{path}: unsupported PGM maxval {maxval}, expected 255")
    pos += 1  # the single whitespace byte after maxval

    pixels = raw[pos : pos + width * height]
    if len(pixels) != width * height:
        raise DataError(
            f"{path}: expected {width * height} pixel bytes, got {len(pixels)}"
        )
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width).copy()
