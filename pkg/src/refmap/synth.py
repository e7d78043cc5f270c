"""Seeded synthetic fixtures standing in for encoder outputs and annotations."""

from __future__ import annotations

import math

import numpy as np

from .formats import AnnotationSet, QueryRecord
from .geometry import Polygon, area_fraction, rasterize


def star_polygon(rng: np.random.Generator, width: int, height: int,
                 min_frac: float = 0.01, max_frac: float = 0.15, n_vertices: int | None = None) -> Polygon:
    """Random star-shaped polygon fully inside the image.

    Radii jitter in [0.7, 1] of the nominal radius, which keeps the raster
    8-connected for any nominal radius above a few pixels.
    """
    n = n_vertices or int(rng.integers(3, 10))
    frac = rng.uniform(min_frac, max_frac)
    r = math.sqrt(frac * width * height / math.pi)
    r = min(r, 0.45 * width, 0.45 * height)
    cx = rng.uniform(r, width - r)
    cy = rng.uniform(r, height - r)
    angles = np.sort(rng.uniform(0, 2 * math.pi, n))
    radii = r * rng.uniform(0.7, 1.0, n)
    pts = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)
    pts[:, 0] = np.clip(pts[:, 0], 0, width)
    pts[:, 1] = np.clip(pts[:, 1], 0, height)
    return Polygon.from_points(np.round(pts, 3))


def synthetic_annotations(rng: np.random.Generator, width: int, height: int, n_queries: int = 3,
                          max_regions: int = 2) -> AnnotationSet:
    queries = []
    for i in range(n_queries):
        n_regions = int(rng.integers(1, max_regions + 1))
        regions = []
        while len(regions) < n_regions:
            poly = star_polygon(rng, width, height, max_frac=0.3 / n_regions)
            if 0.002 <= area_fraction(rasterize([poly], width, height)) <= 0.75:
                regions.append(poly)
        queries.append(QueryRecord(
            text=f"synthetic region group {i}",
            regions=tuple(regions),
            multi_hop=bool(rng.integers(0, 2)),
            multi_ref=n_regions > 1,
        ))
    return AnnotationSet(width, height, tuple(queries))


def synthetic_embeddings(rng: np.random.Generator, seq: int, dim: int, height: int, width: int,
                         levels: int = 4) -> tuple[np.ndarray, list[np.ndarray]]:
    """Text tokens (seq, dim) and a finest-first pyramid halving per level."""
    text = rng.standard_normal((seq, dim)).astype(np.float32)
    feats = []
    h, w = height, width
    for _ in range(levels):
        feats.append(rng.standard_normal((h, w, dim)).astype(np.float32))
        h, w = max(1, h // 2), max(1, w // 2)
    return text, feats
