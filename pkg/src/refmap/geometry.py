"""Polygon rasterization, mask overlap, connected components, centroids.

Pixel (x, y) covers [x, x+1) x [y, y+1) with the origin at the top-left
corner; a pixel belongs to a polygon iff its center (x+0.5, y+0.5) is
inside under the even-odd rule.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch, ZeroMass

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Polygon:
    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise ValueError("polygon needs at least 3 vertices")
        if not all(math.isfinite(c) for v in self.vertices for c in v):
            raise ValueError("polygon vertices must be finite")

    @classmethod
    def from_points(cls, pts) -> "Polygon":
        return cls(tuple((float(x), float(y)) for x, y in pts))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=np.float64)

    def signed_area(self) -> float:
        v = self.as_array()
        x, y = v[:, 0], v[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


@dataclass(frozen=True)
class ComponentSet:
    labels: np.ndarray  # (H, W) int32, 0 = background
    count: int
    sizes: np.ndarray  # (count,) pixel counts for labels 1..count
    centroids: np.ndarray  # (count, 2) as (x, y) = (col, row)


def _fill_polygon(mask: np.ndarray, poly: Polygon) -> bool:
    """OR one polygon's even-odd pixel-center coverage into ``mask``.

    Returns whether the polygon covers any pixel center.
    """
    height, width = mask.shape
    v = poly.as_array()
    # edge from vertex a to the previous vertex b, as in the classic crossing test
    xa, ya = v[:, 0], v[:, 1]
    xb, yb = np.roll(xa, 1), np.roll(ya, 1)

    lo = np.ceil(np.minimum(ya, yb) - 0.5).astype(np.int64)
    hi = np.ceil(np.maximum(ya, yb) - 0.5).astype(np.int64)
    lo = np.clip(lo - 1, 0, height)
    hi = np.clip(hi + 1, 0, height)
    span = hi - lo
    if span.sum() == 0:
        return False
    edge = np.repeat(np.arange(len(xa)), span)
    starts = np.repeat(lo - np.cumsum(span) + span, span)
    rows = np.arange(edge.size) + starts
    yc = rows + 0.5
    e_xa, e_ya, e_xb, e_yb = xa[edge], ya[edge], xb[edge], yb[edge]
    hit = (e_ya > yc) != (e_yb > yc)
    rows, yc = rows[hit], yc[hit]
    e_xa, e_ya, e_xb, e_yb = e_xa[hit], e_ya[hit], e_xb[hit], e_yb[hit]
    if rows.size == 0:
        return False
    xint = (e_xb - e_xa) * (yc - e_ya) / (e_yb - e_ya) + e_xa

    # the crossing count left of-or-at a center has the parity of the count
    # strictly right of it, since every scanline crosses an even number of edges
    col = np.ceil(xint - 0.5)
    col[(col - 1.0) + 0.5 >= xint] -= 1.0
    col[col + 0.5 < xint] += 1.0

    c0 = max(0, int(math.floor(v[:, 0].min())))
    c1 = min(width, int(math.ceil(v[:, 0].max())) + 1)
    r0, r1 = int(rows.min()), int(rows.max()) + 1
    if c1 <= c0:
        return False
    col = np.clip(col, c0, c1).astype(np.int64) - c0
    toggles = np.zeros((r1 - r0, c1 - c0 + 1), dtype=np.uint8)
    np.bitwise_xor.at(toggles, (rows - r0, col), 1)
    inside = np.bitwise_xor.accumulate(toggles[:, :-1], axis=1).view(bool)
    mask[r0:r1, c0:c1] |= inside
    return bool(inside.any())


def rasterize(regions: Sequence[Polygon], width: int, height: int) -> np.ndarray:
    """Union of the regions' pixel-center coverage as an (H, W) bool mask."""
    if width < 1 or height < 1:
        raise ValueError(f"raster dims must be >= 1, got {width}x{height}")
    mask = np.zeros((height, width), dtype=bool)
    for poly in regions:
        if not _fill_polygon(mask, poly):
            log.warning("degenerate polygon covers no pixel center: %s", poly.vertices[:4])
    return mask


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise DimensionMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def area_fraction(mask: np.ndarray) -> float:
    return np.count_nonzero(mask) / mask.size


_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def connected_components(mask: np.ndarray, connectivity: int = 8) -> ComponentSet:
    if connectivity not in _STRUCTURES:
        raise ValueError("connectivity must be 4 or 8")
    labels, count = ndimage.label(mask, structure=_STRUCTURES[connectivity])
    labels = labels.astype(np.int32, copy=False)
    if count == 0:
        return ComponentSet(labels, 0, np.zeros(0, np.int64), np.zeros((0, 2)))
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=count + 1)[1:]
    rows, cols = np.divmod(np.arange(flat.size), labels.shape[1])
    sx = np.bincount(flat, weights=cols, minlength=count + 1)[1:]
    sy = np.bincount(flat, weights=rows, minlength=count + 1)[1:]
    centroids = np.stack([sx / sizes, sy / sizes], axis=1)
    return ComponentSet(labels, int(count), sizes, centroids)


def weighted_centroid(values: np.ndarray) -> tuple[float, float]:
    """Mass-weighted (x, y) = (col, row) position of a nonnegative map."""
    values = np.asarray(values, dtype=np.float64)
    total = values.sum()
    if not total > 0:
        raise ZeroMass("map has no mass")
    height, width = values.shape
    x = float(values.sum(axis=0) @ np.arange(width, dtype=np.float64)) / total
    y = float(values.sum(axis=1) @ np.arange(height, dtype=np.float64)) / total
    return x, y
