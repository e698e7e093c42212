"""Georeferenced 8-bit rasters and road-aligned tile extraction.

Rasters are binary PPM (RGB) or PGM (single channel, e.g. a DSM) images
paired with a six-line world file ``A, D, B, E, C, F``::

    x = A*col + B*row + C
    y = D*col + E*row + F

where ``(col, row)`` addresses pixel centers and ``(C, F)`` is the center of
the top-left pixel in planar meters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from roadgnn.errors import ParseError

TILE_SIZE = 120


@dataclass(frozen=True, eq=False)
class Raster:
    pixels: np.ndarray  # (height, width, channels) uint8
    affine: tuple  # (A, D, B, E, C, F)

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.dtype != np.uint8:
            raise ValueError("pixels must be a (height, width, channels) uint8 array")
        if self.height <= 0 or self.width <= 0:
            raise ValueError("raster must have positive width and height")
        a, d, b, e, _, _ = self.affine
        if a * e - d * b == 0:
            raise ValueError(f"world file affine {self.affine} is not invertible")
        self.pixels.setflags(write=False)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def pixel_pitch(self) -> float:
        """Ground size of one pixel in meters; non-square pixels are rejected."""
        a, d, b, e, _, _ = self.affine
        sx, sy = math.hypot(a, d), math.hypot(b, e)
        if sx == 0 or sy == 0:
            raise ValueError("degenerate pixel pitch (0)")
        if not math.isclose(sx, sy, rel_tol=1e-9):
            raise ValueError(f"non-square pixels ({sx} x {sy}) are not supported")
        return sx


@dataclass(frozen=True, eq=False)
class ImageTile:
    pixels: np.ndarray  # (TILE_SIZE, TILE_SIZE, channels) uint8
    center: tuple
    heading: float
    out_of_bounds_fraction: float

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


def read_world_file(path) -> tuple:
    values = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            values.append(float(line))
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: not a number: {line!r}") from None
    if len(values) != 6:
        raise ParseError(f"{path}: expected 6 numbers (A, D, B, E, C, F), found {len(values)}")
    return tuple(values)


def write_world_file(affine, path) -> None:
    Path(path).write_text("".join(f"{v!r}\n" for v in affine))


def load_raster(image_path, world_path) -> Raster:
    """Load a P6/P5 netpbm image and its world file."""
    with open(image_path, "rb") as fh:
        magic = fh.read(2)
    if magic not in (b"P6", b"P5"):
        raise ParseError(f"{image_path}: expected binary PPM (P6) or PGM (P5), got {magic!r}")
    with Image.open(image_path) as img:
        if img.mode not in ("RGB", "L"):
            raise ParseError(
                f"{image_path}: unsupported depth (mode {img.mode}); only 8-bit maxval 255"
            )
        pixels = np.asarray(img, dtype=np.uint8)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    return Raster(np.ascontiguousarray(pixels), read_world_file(world_path))


def save_raster(raster: Raster, image_path, world_path=None) -> None:
    px = raster.pixels
    img = Image.fromarray(px[:, :, 0] if px.shape[2] == 1 else px)
    img.save(image_path, format="PPM")
    if world_path is not None:
        write_world_file(raster.affine, world_path)


def pixel_to_world(raster: Raster, col, row):
    a, d, b, e, c, f = raster.affine
    col = np.asarray(col, dtype=np.float64)
    row = np.asarray(row, dtype=np.float64)
    return a * col + b * row + c, d * col + e * row + f


def world_to_pixel(raster: Raster, x, y):
    """Fractional ``(col, row)`` of planar point(s); may fall outside the raster."""
    a, d, b, e, c, f = raster.affine
    det = a * e - d * b
    dx = np.asarray(x, dtype=np.float64) - c
    dy = np.asarray(y, dtype=np.float64) - f
    return (e * dx - b * dy) / det, (a * dy - d * dx) / det


def _heading_axes(heading: float):
    """Unit vectors (east, north) of the tile's up and right directions."""
    quarter, rem = divmod(heading, 90.0)
    if rem == 0.0:
        # exact trig on the axes keeps axis-aligned tiles bit-exact
        s, c = [(0.0, 1.0), (1.0, 0.0), (0.0, -1.0), (-1.0, 0.0)][int(quarter) % 4]
    else:
        theta = math.radians(heading)
        s, c = math.sin(theta), math.cos(theta)
    return (s, c), (c, -s)


def bilinear_sample(pixels: np.ndarray, cols: np.ndarray, rows: np.ndarray):
    """Sample ``pixels`` at fractional pixel-center coordinates.

    Returns float samples (zero outside the raster) and the in-bounds mask.
    A point is in bounds when it lies inside the hull of pixel centers.
    """
    h, w = pixels.shape[:2]
    inside = (cols >= 0) & (cols <= w - 1) & (rows >= 0) & (rows <= h - 1)
    cc = np.where(inside, cols, 0.0)
    rr = np.where(inside, rows, 0.0)
    c0 = np.floor(cc).astype(np.intp)
    r0 = np.floor(rr).astype(np.intp)
    fc = (cc - c0)[..., None]
    fr = (rr - r0)[..., None]
    c1 = np.minimum(c0 + 1, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    src = pixels.astype(np.float64)
    top = src[r0, c0] * (1.0 - fc) + src[r0, c1] * fc
    bottom = src[r1, c0] * (1.0 - fc) + src[r1, c1] * fc
    out = top * (1.0 - fr) + bottom * fr
    out[~inside] = 0.0
    return out, inside


def extract_tile(raster: Raster, center, heading: float, size: int = TILE_SIZE) -> ImageTile:
    """Cut a ``size`` x ``size`` tile centred on ``center`` with the road heading up.

    ``heading`` is in degrees clockwise from north. Tile pixel ``(r, c)``
    sits ``(c - size//2, r - size//2)`` pixel pitches right/down of the
    center in the rotated frame and is filled by bilinear interpolation.
    """
    if not 0.0 <= heading < 360.0:
        raise ValueError(f"heading must be in [0, 360), got {heading}")
    pitch = raster.pixel_pitch
    (ux, uy), (rx, ry) = _heading_axes(float(heading))
    half = size // 2
    offs = (np.arange(size, dtype=np.float64) - half) * pitch
    right = offs[None, :]
    down = offs[:, None]
    x = center[0] + right * rx - down * ux
    y = center[1] + right * ry - down * uy
    cols, rows = world_to_pixel(raster, x, y)
    values, inside = bilinear_sample(raster.pixels, cols, rows)
    pixels = np.clip(np.rint(values), 0, 255).astype(np.uint8)
    oob = 1.0 - float(np.count_nonzero(inside)) / inside.size
    return ImageTile(pixels, (float(center[0]), float(center[1])), float(heading), oob)
