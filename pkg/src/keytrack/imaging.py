"""Grayscale image I/O.

Images are plain ``(height, width)`` ``uint8`` numpy arrays. Binary PGM (P5)
is parsed directly; PNG decoding goes through Pillow and RGB data is reduced
to luma with the 0.299/0.587/0.114 weights, rounded to nearest.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageFormatError(ValueError):
    """Raised for unsupported or malformed image files."""


def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens: list[bytes] = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise ImageFormatError("truncated PGM header")
        if data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode_pgm(data: bytes) -> np.ndarray:
    tokens, offset = _pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise ImageFormatError(f"unsupported PGM magic {tokens[0]!r}; only P5 is read")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError("non-integer PGM header field") from exc
    if maxval != 255:
        raise ImageFormatError(f"unsupported PGM maxval {maxval}; expected 255")
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"invalid PGM dimensions {width}x{height}")
    raster = data[offset:]
    if len(raster) != width * height:
        raise ImageFormatError(
            f"PGM raster holds {len(raster)} bytes, header declares {width}x{height}"
        )
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy()


def rgb_to_luma(rgb: np.ndarray) -> np.ndarray:
    """Convert an ``(h, w, 3)`` uint8 array to luma, rounded to nearest."""
    weights = np.asarray(LUMA_WEIGHTS)
    luma = rgb[..., :3].astype(np.float64) @ weights
    return np.clip(np.rint(luma), 0, 255).astype(np.uint8)


def decode_png(path: str | os.PathLike) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        mode = im.mode
        if mode == "L":
            return np.asarray(im, dtype=np.uint8).copy()
        if mode in ("RGB", "RGBA"):
            return rgb_to_luma(np.asarray(im, dtype=np.uint8))
        if mode == "P":
            return rgb_to_luma(np.asarray(im.convert("RGB"), dtype=np.uint8))
    raise ImageFormatError(f"unsupported PNG mode {mode!r}; expected 8-bit gray or RGB")


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Load an 8-bit grayscale image from a P5 PGM or PNG file.

    Raises:
        OSError: the file cannot be read.
        ImageFormatError: the format or bit depth is unsupported, or the
            raster length disagrees with the header.
    """
    path = Path(path)
    data = path.read_bytes()
    if data.startswith(PNG_SIGNATURE):
        return decode_png(path)
    if data[:2] in (b"P1", b"P2", b"P3", b"P4", b"P5", b"P6"):
        return decode_pgm(data)
    raise ImageFormatError(f"{path}: not a PGM or PNG file")


def encode_pgm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ImageFormatError("PGM encoding expects a 2-D uint8 array")
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes()


def save_pgm(path: str | os.PathLike, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(img))
