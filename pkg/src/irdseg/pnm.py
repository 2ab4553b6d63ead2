"""Binary PGM (P5) and PFM (Pf) readers/writers."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header_tokens(buf: bytes, count: int, path) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    for _ in range(count):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise ImageFormatError(f"{path}: truncated header at byte {pos}")
        tokens.append(m.group(1))
        pos = m.end()
    # exactly one whitespace byte separates header and raster
    return tokens, pos + 1


def write_pgm(path, img: np.ndarray, maxval: int = 65535) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    if maxval not in (255, 65535):
        raise ValueError("maxval must be 255 or 65535")
    data = np.clip(np.rint(img), 0, maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(data.astype(dtype).tobytes())


def read_pgm(path) -> np.ndarray:
    """Returns the raster as float64, unscaled (raw integer counts)."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise ImageFormatError(f"{path}: bad magic {buf[:2]!r} at byte 0, expected b'P5'")
    tokens, start = _header_tokens(buf[2:], 3, path)
    start += 2
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ImageFormatError(f"{path}: non-integer header field before byte {start}") from None
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: maxval {maxval} out of range")
    dtype = np.dtype(">u2" if maxval > 255 else "u1")
    need = w * h * dtype.itemsize
    if len(buf) - start < need:
        raise ImageFormatError(f"{path}: raster truncated at byte {len(buf)}, need {need} bytes from byte {start}")
    return np.frombuffer(buf, dtype=dtype, count=w * h, offset=start).reshape(h, w).astype(np.float64)


def write_pfm(path, img: np.ndarray) -> None:
    """Single-channel little-endian PFM (scale -1.0), rows stored bottom to top."""
    img = np.asarray(img, dtype="<f4")
    if img.ndim != 2:
        raise ValueError(f"PFM needs a 2-D image, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != b"Pf":
        raise ImageFormatError(f"{path}: bad magic {buf[:2]!r} at byte 0, expected b'Pf'")
    tokens, start = _header_tokens(buf[2:], 3, path)
    start += 2
    try:
        w, h = int(tokens[0]), int(tokens[1])
        scale = float(tokens[2])
    except ValueError:
        raise ImageFormatError(f"{path}: malformed header before byte {start}") from None
    dtype = np.dtype("<f4" if scale < 0 else ">f4")
    need = w * h * 4
    if len(buf) - start < need:
        raise ImageFormatError(f"{path}: raster truncated at byte {len(buf)}, need {need} bytes from byte {start}")
    data = np.frombuffer(buf, dtype=dtype, count=w * h, offset=start).reshape(h, w)
    return data[::-1].astype(np.float64)
