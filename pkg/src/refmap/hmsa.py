"""Multiscale text-image alignment head and L1 objective.

The pooled text vector is dot-multiplied with every L2-normalized location
of every feature level, mapped from [-1, 1] to [0, 1], upsampled to the
image size and averaged over levels.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyInput, OutOfRange
from .fusion import pool_text, unflatten

SLACK = 1e-6


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Unit-normalize along the last axis; zero vectors stay zero."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.divide(v, norm, out=np.zeros_like(v), where=norm > 0)


def correlation_level(g: np.ndarray, s: np.ndarray) -> np.ndarray:
    if g.shape[-1] != s.shape[-1]:
        raise DimensionMismatch(f"feature dim {g.shape[-1]} != text dim {s.shape[-1]}")
    return g @ s


def rescale_unit(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if c.size and (c.min() < -1 - SLACK or c.max() > 1 + SLACK):
        raise OutOfRange("correlation outside [-1, 1]")
    return (np.clip(c, -1.0, 1.0) + 1.0) / 2.0


def bilinear_weights(n_src: int, n_dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Neighbor indices and blend fraction for half-pixel-center resampling.

    Destination index i samples source coordinate (i + 0.5) * n_src / n_dst - 0.5,
    clamped to [0, n_src - 1]; the value is (1 - f) * src[i0] + f * src[i1].
    """
    if n_src < 1 or n_dst < 1:
        raise ValueError("resample extents must be >= 1")
    if n_src == n_dst:
        idx = np.arange(n_dst)
        return idx, idx, np.zeros(n_dst)
    u = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    u = np.clip(u, 0.0, n_src - 1)
    i0 = np.floor(u).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_src - 1)
    return i0, i1, u - i0


def resample_rows(a: np.ndarray, n_dst: int) -> np.ndarray:
    """Bilinear resample along axis 0."""
    i0, i1, f = bilinear_weights(a.shape[0], n_dst)
    if a.shape[0] == n_dst:
        return a.copy()
    f = f.reshape((-1,) + (1,) * (a.ndim - 1))
    return a[i0] * (1.0 - f) + a[i1] * f


def bilinear_upsample(m: np.ndarray, height: int, width: int) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    out = resample_rows(m, height)
    return resample_rows(out.T, width).T


def integrate_levels(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Per-pixel mean over levels, summed in level order."""
    if len(maps) == 0:
        raise EmptyInput("no level maps to integrate")
    shape = maps[0].shape
    acc = np.array(maps[0], dtype=np.float64)
    for m in maps[1:]:
        if m.shape != shape:
            raise DimensionMismatch(f"level map shapes differ: {shape} vs {m.shape}")
        acc += m
    acc /= len(maps)
    return acc


def hmsa_forward(
    image_rows: np.ndarray,
    level_dims: Sequence[tuple[int, int]],
    text: np.ndarray,
    height: int,
    width: int,
    pool_mode: str = "average",
) -> np.ndarray:
    """Correlation map in [0, 1] of shape (height, width)."""
    text = np.asarray(text, dtype=np.float64)
    if text.ndim != 2 or text.shape[1] != image_rows.shape[1]:
        raise DimensionMismatch(
            f"text shape {text.shape} incompatible with image rows {image_rows.shape}"
        )
    s = l2_normalize(pool_text(text, pool_mode))
    maps = []
    for g in unflatten(image_rows, level_dims):
        c = correlation_level(l2_normalize(g), s)
        maps.append(bilinear_upsample(rescale_unit(c), height, width))
    return integrate_levels(maps)


def l1_loss(pred: np.ndarray, gt: np.ndarray) -> float:
    """Unreduced sum of absolute differences."""
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"map shapes differ: {pred.shape} vs {gt.shape}")
    return float(np.abs(np.asarray(pred, np.float64) - np.asarray(gt, np.float64)).sum())


def l1_loss_mean(pred: np.ndarray, gt: np.ndarray) -> float:
    return l1_loss(pred, gt) / pred.size
