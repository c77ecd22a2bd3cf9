"""Grid images <-> cell functions.

Pixel ``(r, c)`` of a ``GridImage`` covers
``[lo_x + c dx, lo_x + (c+1) dx] x [lo_y + r dy, lo_y + (r+1) dy]``, so row 0
is the bottom of the domain.  PNG files are written top row first, i.e.
flipped, so they look upright in a viewer.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DimensionUnsupported, DomainMismatch
from .geometry import Box, clip_polygon, ordered_polygon, volume
from .network import CellFunction
from .voronoi import Partition, locate_many


@dataclass(eq=False)
class GridImage:
    values: np.ndarray  # (height, width, channels)
    domain: Box

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"image values must be (height, width, channels), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("image values must be finite")
        if self.domain.dim != 2:
            raise DimensionUnsupported("images live on 2D domains")
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def pixel_size(self):
        span = self.domain.hi - self.domain.lo
        return span[0] / self.width, span[1] / self.height


_X = np.array([1.0, 0.0])
_Y = np.array([0.0, 1.0])


def _clip_x(poly, a, b):
    poly = clip_polygon(poly, -_X, -a)
    return clip_polygon(poly, _X, b)


def _shoelace(poly) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(x[:-1] @ y[1:] - y[:-1] @ x[1:] + x[-1] * y[0] - y[-1] * x[0]))


def _line_extent(piece, y0, tol):
    on = np.abs(piece[:, 1] - y0) <= tol
    if not on.any():
        return None
    xs = piece[on, 0]
    return xs.min(), xs.max()


def _cell_integral(poly, img: GridImage, prefix):
    """Integral of the pixelwise-constant image over a convex polygon."""
    lo = img.domain.lo
    dx, dy = img.pixel_size
    H, W = img.height, img.width
    acc = np.zeros(img.channels)
    covered = 0.0
    if len(poly) < 3:
        return acc, covered
    tol = 1e-12 * max(1.0, float(np.abs(poly).max()))
    r0 = max(0, int(np.floor((poly[:, 1].min() - lo[1]) / dy)))
    r1 = min(H - 1, int(np.ceil((poly[:, 1].max() - lo[1]) / dy)) - 1)
    for r in range(r0, r1 + 1):
        ya = lo[1] + r * dy
        yb = lo[1] + (r + 1) * dy if r + 1 < H else img.domain.hi[1]
        piece = clip_polygon(clip_polygon(poly, -_Y, -ya), _Y, yb)
        if len(piece) < 3:
            continue
        c0 = max(0, int(np.floor((piece[:, 0].min() - lo[0]) / dx)))
        c1 = min(W - 1, int(np.ceil((piece[:, 0].max() - lo[0]) / dx)) - 1)
        # columns whose pixel lies wholly inside the piece
        f0, f1 = c1 + 1, c1
        bot, top = _line_extent(piece, ya, tol), _line_extent(piece, yb, tol)
        if bot is not None and top is not None:
            left, right = max(bot[0], top[0]), min(bot[1], top[1])
            f0 = max(c0, int(np.ceil((left - lo[0]) / dx - 1e-12)))
            f1 = min(c1, int(np.floor((right - lo[0]) / dx + 1e-12)) - 1)
        if f1 >= f0:
            acc += (prefix[r, f1 + 1] - prefix[r, f0]) * (dx * (yb - ya))
            covered += (f1 + 1 - f0) * dx * (yb - ya)
            partial = list(range(c0, f0)) + list(range(f1 + 1, c1 + 1))
        else:
            partial = range(c0, c1 + 1)
        for c in partial:
            xa = lo[0] + c * dx
            xb = lo[0] + (c + 1) * dx if c + 1 < W else img.domain.hi[0]
            area = _shoelace(_clip_x(piece, xa, xb))
            if area > 0.0:
                acc += area * img.values[r, c]
                covered += area
    return acc, covered


def _same_box(a: Box, b: Box) -> bool:
    return a.dim == b.dim and np.allclose(a.lo, b.lo, atol=1e-12) and np.allclose(a.hi, b.hi, atol=1e-12)


def discretize(img: GridImage, partition: Partition) -> CellFunction:
    """Exact cell averages of the pixelwise-constant image over each cell.

    The divisor is the clipped area actually accumulated, which equals the
    cell volume up to rounding and keeps constant images exactly constant.
    """
    if partition.dim != 2:
        raise DimensionUnsupported("discretize supports 2D partitions only")
    if not _same_box(img.domain, partition.domain):
        raise DomainMismatch("image and partition domains differ")
    prefix = np.concatenate([np.zeros((img.height, 1, img.channels)), np.cumsum(img.values, axis=1)], axis=1)
    out = np.zeros((partition.cell_count, img.channels))
    for k, cell in enumerate(partition.cells):
        vol = volume(cell)
        if vol == 0.0:
            continue
        acc, covered = _cell_integral(ordered_polygon(cell), img, prefix)
        out[k] = acc / (covered if covered > 0.0 else vol)
    return CellFunction(partition, out)


def pixel_centers(domain: Box, width: int, height: int) -> np.ndarray:
    """Centers in row-major (row, col) order; row 0 at the bottom."""
    span = domain.hi - domain.lo
    xs = domain.lo[0] + (np.arange(width) + 0.5) * span[0] / width
    ys = domain.lo[1] + (np.arange(height) + 0.5) * span[1] / height
    X, Y = np.meshgrid(xs, ys)
    return np.column_stack([X.ravel(), Y.ravel()])


def rasterize(f: CellFunction, width: int, height: int) -> GridImage:
    """Sample ``f`` at pixel centers.  A visualization aid, not an area average."""
    if f.partition.dim != 2:
        raise DimensionUnsupported("rasterize supports 2D partitions only")
    if width < 1 or height < 1:
        raise ValueError("resolution must be positive")
    idx = locate_many(f.partition, pixel_centers(f.partition.domain, width, height))
    return GridImage(f.values[idx].reshape(height, width, f.channels), f.partition.domain)


# ------------------------------------------------------------------ PNG I/O

_MODES = {1: "L", 2: "LA", 3: "RGB", 4: "RGBA"}


def save_png(img: GridImage, path, value_range: Optional[tuple] = None) -> dict:
    """Write an 8-bit PNG plus ``<path>.json`` recording ``value = offset + scale * byte``."""
    from PIL import Image

    if img.channels not in _MODES:
        raise DimensionUnsupported(f"PNG export supports 1-4 channels, got {img.channels}; use a VCNT blob")
    if value_range is None:
        lo, hi = float(img.values.min()), float(img.values.max())
    else:
        lo, hi = map(float, value_range)
    scale = (hi - lo) / 255.0 if hi > lo else 1.0
    data = np.clip(np.rint((img.values - lo) / scale), 0, 255).astype(np.uint8)[::-1]
    if img.channels == 1:
        data = data[:, :, 0]
    Image.fromarray(data, mode=_MODES[img.channels]).save(path, format="PNG")
    meta = {
        "offset": lo,
        "scale": scale,
        "width": img.width,
        "height": img.height,
        "channels": img.channels,
        "domain": {"lo": img.domain.lo.tolist(), "hi": img.domain.hi.tolist()},
    }
    Path(f"{path}.json").write_text(json.dumps(meta, indent=1) + "\n")
    return meta


def load_png(path, domain: Optional[Box] = None) -> GridImage:
    """Read a PNG; values are mapped through the sidecar if present, else ``byte / 255``."""
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in _MODES.values():
            im = im.convert("RGBA" if "A" in im.mode else "RGB")
        data = np.asarray(im, dtype=float)
    if data.ndim == 2:
        data = data[:, :, None]
    sidecar = Path(f"{path}.json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        values = meta["offset"] + meta["scale"] * data
        if domain is None:
            domain = Box(meta["domain"]["lo"], meta["domain"]["hi"])
    else:
        values = data / 255.0
    return GridImage(values[::-1].copy(), domain if domain is not None else Box.unit(2))
