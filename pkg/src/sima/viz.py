"""Token saliency maps from normalized query/key magnitudes, and PGM I/O."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError


class PGMError(ValueError):
    """File is not a binary (P5) 8-bit PGM image."""


@dataclass
class SaliencyMap:
    grid: np.ndarray  # (g, g), entries in [0, 1]
    source: str = "q_hat"
    layer: int = 0


def token_saliency(m_hat, grid_side, source="q_hat", layer=0):
    """Per-token l2 norm over channels, laid out row-major on a g x g grid,
    min-max scaled to [0, 1]. A constant map becomes all zeros.

    ``m_hat`` holds one row per patch token; strip any CLS row first.
    """
    m = np.asarray(m_hat, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != grid_side * grid_side:
        raise ShapeError(f"need ({grid_side}*{grid_side}, d) token matrix, got {m.shape}")
    norms = np.sqrt(np.einsum("nd,nd->n", m, m))
    lo, hi = norms.min(), norms.max()
    if hi > lo:
        scaled = (norms - lo) / (hi - lo)
    else:
        scaled = np.zeros_like(norms)
    return SaliencyMap(scaled.reshape(grid_side, grid_side), source, layer)


def to_pixels(smap, upscale=1):
    """8-bit image of the map, nearest-neighbour upscaled by an integer factor."""
    if upscale < 1:
        raise ValueError(f"upscale must be >= 1, got {upscale}")
    grid = np.clip(np.asarray(smap.grid, dtype=np.float64), 0.0, 1.0)
    pixels = np.rint(255 * grid).astype(np.uint8)
    return np.repeat(np.repeat(pixels, upscale, axis=0), upscale, axis=1)


def write_pgm(smap, path, upscale=1):
    save_pgm(to_pixels(smap, upscale), path)


def save_pgm(pixels, path):
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels).tobytes())


def _header_tokens(data):
    # yields (token, end_offset) for the 4 header fields, skipping comments
    pos, found = 0, []
    while len(found) < 4:
        while pos < len(data) and chr(data[pos]).isspace():
            pos += 1
        if pos < len(data) and data[pos] == ord("#"):
            while pos < len(data) and data[pos] not in (10, 13):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not chr(data[pos]).isspace():
            pos += 1
        if start == pos:
            raise PGMError("truncated PGM header")
        found.append(data[start:pos].decode("ascii", "replace"))
    return found, pos + 1  # exactly one whitespace byte precedes the raster


def read_pgm(path):
    """Read an 8-bit binary PGM into a ``(height, width)`` uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    (magic, w, h, maxval), offset = _header_tokens(data)
    if magic != "P5":
        raise PGMError(f"{path}: not a binary PGM (magic {magic!r})")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise PGMError(f"{path}: bad header") from exc
    if maxval != 255:
        raise PGMError(f"{path}: only maxval 255 is supported, got {maxval}")
    raster = data[offset:offset + w * h]
    if len(raster) != w * h:
        raise PGMError(f"{path}: expected {w * h} pixels, found {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w)


def image_to_tokens(image, grid_side):
    """Split a square image into grid_side**2 patches, flattened row-major.

    Token ``r * grid_side + c`` is the patch in grid row r, column c.
    """
    image = np.asarray(image)
    h, w = image.shape
    if h != w or h % grid_side:
        raise ShapeError(f"image {image.shape} cannot be split into a {grid_side}x{grid_side} grid")
    p = h // grid_side
    return (image.reshape(grid_side, p, grid_side, p)
            .transpose(0, 2, 1, 3)
            .reshape(grid_side * grid_side, p * p))


def tokens_to_image(tokens, grid_side):
    tokens = np.asarray(tokens)
    p = math.isqrt(tokens.shape[-1])
    if p * p != tokens.shape[-1] or tokens.shape[0] != grid_side * grid_side:
        raise ShapeError(f"tokens {tokens.shape} do not form square patches on a {grid_side} grid")
    return (tokens.reshape(grid_side, grid_side, p, p)
            .transpose(0, 2, 1, 3)
            .reshape(grid_side * p, grid_side * p))
