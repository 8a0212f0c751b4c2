"""Binary PPM (P6) and PGM (P5) with 8-bit samples.

Images are ``(3, h, w)`` float arrays in [0, 1] on the Python side; label
maps are ``(h, w)`` uint8 grids where 255 means ignore.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import FormatError

_WS = b" \t\n\r\v\f"


def _parse_header(data: bytes, magic: bytes):
    if data[:2] != magic:
        raise FormatError(f"expected magic {magic!r}, got {data[:2]!r}", offset=0)
    pos = 2
    values = []
    while len(values) < 3:
        # skip whitespace and comments
        while pos < len(data) and (data[pos] in _WS or data[pos] == ord("#")):
            if data[pos] == ord("#"):
                while pos < len(data) and data[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed header field", offset=start)
        values.append(int(data[start:pos]))
    if pos >= len(data) or data[pos] not in _WS:
        raise FormatError("header must end with a single whitespace byte", offset=pos)
    width, height, maxval = values
    if width < 1 or height < 1:
        raise FormatError(f"bad dimensions {width}x{height}", offset=2)
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", offset=pos)
    return width, height, pos + 1


def _read(path, magic, channels):
    data = Path(path).read_bytes()
    width, height, start = _parse_header(data, magic)
    need = width * height * channels
    if len(data) - start < need:
        raise FormatError(f"short payload: need {need} bytes, have {len(data) - start}",
                          offset=len(data))
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=start), height, width


def read_pgm(path) -> np.ndarray:
    raw, h, w = _read(path, b"P5", 1)
    return raw.reshape(h, w).copy()


def write_pgm(path, grid) -> None:
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError(f"PGM needs a 2-D grid, got {grid.shape}")
    if grid.min(initial=0) < 0 or grid.max(initial=0) > 255:
        raise ValueError("PGM values must lie in 0..255")
    h, w = grid.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + grid.astype(np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    """Returns the raw ``(h, w, 3)`` uint8 pixels."""
    raw, h, w = _read(path, b"P6", 3)
    return raw.reshape(h, w, 3).copy()


def write_ppm(path, rgb) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"PPM needs an (h, w, 3) uint8 array, got {rgb.shape} {rgb.dtype}")
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb).tobytes())


def to_uint8(image) -> np.ndarray:
    """(3, h, w) floats in [0, 1] -> (h, w, 3) uint8."""
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def read_image(path, dtype=np.float32) -> np.ndarray:
    return read_ppm(path).transpose(2, 0, 1).astype(dtype) / 255


def write_image(path, image) -> None:
    write_ppm(path, to_uint8(image))


read_labels = read_pgm
write_labels = write_pgm

# index 255 (ignore) is always white
_BASE_PALETTE = np.array([
    [0, 0, 0], [128, 0, 0], [0, 128, 0], [128, 128, 0], [0, 0, 128], [128, 0, 128],
    [0, 128, 128], [128, 128, 128], [64, 0, 0], [192, 0, 0], [64, 128, 0], [192, 128, 0],
    [64, 0, 128], [192, 0, 128], [64, 128, 128], [192, 128, 128], [0, 64, 0], [128, 64, 0],
    [0, 192, 0], [128, 192, 0], [0, 64, 128],
], dtype=np.uint8)


def palette() -> np.ndarray:
    pal = np.zeros((256, 3), dtype=np.uint8)
    pal[:len(_BASE_PALETTE)] = _BASE_PALETTE
    idx = np.arange(len(_BASE_PALETTE), 255)
    pal[len(_BASE_PALETTE):255] = np.stack([(idx * 37) % 256, (idx * 91) % 256, (idx * 173) % 256], 1)
    pal[255] = 255
    return pal


def colorize(labels) -> np.ndarray:
    return palette()[np.asarray(labels, dtype=np.uint8)]


def write_colormap(path, labels) -> None:
    write_ppm(path, colorize(labels))


def write_mask(path, mask) -> None:
    """Binary mask as a black/white PPM."""
    m = np.asarray(mask, dtype=bool)
    write_ppm(path, np.repeat((m * 255).astype(np.uint8)[..., None], 3, axis=2))
