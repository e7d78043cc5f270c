"""Compile polygon queries into soft multiscale correlation maps.

Pipeline per query: rasterize the regions into a binary mask, measure the
mask's occupancy ratio in every cell of several square grids, expand each
grid back to pixels, average the levels, blur with a truncated Gaussian and
quantize to 8 bits.

Before smoothing, the averaged map is constant on the rectangles cut out by
the union of all grid lines. ``mcmg_compile`` exploits this: a separable
filter applied to a block-constant map equals ``Lv @ M @ Lh.T`` where ``M``
holds one value per block and ``Lv``/``Lh`` are the 1-D filter responses of
the block indicator columns. Large images then cost one small correlation
per axis and a rank-``len(M)`` product, instead of two full-size passes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch, EmptyInput, OutOfRange
from .geometry import Polygon, rasterize
from .hmsa import bilinear_upsample, bilinear_weights

log = logging.getLogger(__name__)

QUANT_SLACK = 1e-6
# rows of output quantized per product chunk; bounds peak float64 memory
_CHUNK_ROWS = 512


@dataclass(frozen=True)
class McmgConfig:
    """Unset fields are derived from the image size by ``resolve``."""

    levels: tuple[int, ...] | None = None
    sigma: float | None = None
    radius: int | None = None
    output_size: tuple[int, int] | None = None  # (width, height)

    def resolve(self, width: int, height: int) -> "McmgConfig":
        levels = tuple(self.levels) if self.levels else default_levels(width, height)
        if any(c < 1 for c in levels):
            raise ValueError(f"cell sizes must be >= 1, got {levels}")
        if len(set(levels)) != len(levels):
            raise ValueError(f"duplicate cell sizes in {levels}")
        sigma = self.sigma if self.sigma is not None else min(levels) / 2.0
        if not sigma > 0:
            raise ValueError(f"sigma must be > 0, got {sigma}")
        radius = self.radius if self.radius is not None else max(1, math.ceil(3.0 * sigma))
        if radius < 1:
            raise ValueError(f"radius must be >= 1, got {radius}")
        return McmgConfig(levels, float(sigma), int(radius), self.output_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = list(self.levels) if self.levels else None
        d["output_size"] = list(self.output_size) if self.output_size else None
        return d


def default_levels(width: int, height: int) -> tuple[int, ...]:
    """Cell sizes min(W, H) / {64, 32, 16, 8}, floored to >= 1, finest first."""
    s = min(width, height)
    return tuple(sorted({max(1, s // d) for d in (8, 16, 32, 64)}))


def grid_overlap(mask: np.ndarray, cell_size: int) -> np.ndarray:
    """Fraction of set pixels in each (edge-clipped) square cell."""
    if cell_size < 1:
        raise ValueError("cell_size must be >= 1")
    height, width = mask.shape
    row_starts = np.arange(0, height, cell_size)
    col_starts = np.arange(0, width, cell_size)
    counts = _block_counts(mask, row_starts, col_starts)
    cell_h = np.minimum(row_starts + cell_size, height) - row_starts
    cell_w = np.minimum(col_starts + cell_size, width) - col_starts
    return counts / np.outer(cell_h, cell_w)


def _block_counts(mask: np.ndarray, row_starts: np.ndarray, col_starts: np.ndarray) -> np.ndarray:
    """Set-pixel count of every block delimited by the given start offsets."""
    # summing uint8 along the contiguous axis first is several times faster
    m = np.ascontiguousarray(mask, dtype=bool).view(np.uint8)
    counts = np.add.reduceat(m, col_starts, axis=1, dtype=np.int32)
    return np.add.reduceat(counts, row_starts, axis=0, dtype=np.int64)


def expand_to_pixels(grid: np.ndarray, width: int, height: int, cell_size: int) -> np.ndarray:
    rows = np.arange(height) // cell_size
    cols = np.arange(width) // cell_size
    if rows[-1] >= grid.shape[0] or cols[-1] >= grid.shape[1]:
        raise DimensionMismatch(f"grid {grid.shape} does not cover {width}x{height} at cell {cell_size}")
    return np.asarray(grid, dtype=np.float64)[np.ix_(rows, cols)]


def aggregate_levels(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Per-pixel arithmetic mean, accumulated in level order."""
    if len(maps) == 0:
        raise EmptyInput("no level maps to aggregate")
    acc = np.array(maps[0], dtype=np.float64)
    for m in maps[1:]:
        if m.shape != acc.shape:
            raise DimensionMismatch(f"level map shapes differ: {acc.shape} vs {m.shape}")
        acc += m
    acc /= len(maps)
    return acc


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(d * d) / (2.0 * sigma * sigma))
    return k / k.sum()


def _smooth_axis(a: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    # scipy's "reflect" is the half-sample mirror (d c b a | a b c d | d c b a)
    return ndimage.correlate1d(a, kernel, axis=axis, mode="reflect")


def gaussian_smooth(m: np.ndarray, sigma: float, radius: int) -> np.ndarray:
    if not sigma > 0 or radius < 1:
        raise ValueError(f"need sigma > 0 and radius >= 1, got {sigma}, {radius}")
    k = gaussian_kernel(sigma, radius)
    out = _smooth_axis(np.asarray(m, dtype=np.float64), k, axis=0)
    return _smooth_axis(out, k, axis=1)


def _check_unit_range(m: np.ndarray) -> None:
    if m.size and (m.min() < -QUANT_SLACK or m.max() > 1.0 + QUANT_SLACK):
        raise OutOfRange(f"map values span [{m.min()}, {m.max()}], outside [0, 1]")


def _quantize_inplace(out: np.ndarray, v: np.ndarray) -> None:
    """floor(255 clip(v, 0, 1) + 0.5) into ``out``; overwrites ``v``."""
    v *= 255.0
    v += 0.5
    np.clip(v, 0.5, 255.5, out=v)
    # values are >= 0.5 here, so truncation is the floor
    out[...] = v


def quantize_u8(m: np.ndarray) -> np.ndarray:
    """round(255 v), ties away from zero; values within 1e-6 of [0, 1] are clamped."""
    m = np.asarray(m, dtype=np.float64)
    _check_unit_range(m)
    out = np.empty(m.shape, dtype=np.uint8)
    _quantize_inplace(out, m.copy())
    return out


def dequantize(q: np.ndarray) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) / 255.0


# --- full pipeline ---------------------------------------------------------


def compile_reference(regions: Sequence[Polygon], width: int, height: int, config: McmgConfig) -> np.ndarray:
    """Pre-quantization map built stage by stage at full resolution."""
    cfg = config.resolve(width, height)
    mask = rasterize(regions, width, height)
    maps = [expand_to_pixels(grid_overlap(mask, c), width, height, c) for c in cfg.levels]
    out = gaussian_smooth(aggregate_levels(maps), cfg.sigma, cfg.radius)
    if cfg.output_size and cfg.output_size != (width, height):
        out = bilinear_upsample(out, cfg.output_size[1], cfg.output_size[0])
    return out


def _breakpoints(extent: int, levels: Sequence[int]) -> np.ndarray:
    cuts = {extent}
    for c in levels:
        cuts.update(range(0, extent, c))
    return np.array(sorted(cuts), dtype=np.int64)


def _axis_operator(bounds: np.ndarray, extent: int, kernel: np.ndarray, target: int) -> np.ndarray:
    """(target, n_blocks) matrix: smoothing, then resampling, of each block indicator."""
    n_blocks = len(bounds) - 1
    indicator = np.zeros((extent, n_blocks))
    block_of = np.repeat(np.arange(n_blocks), np.diff(bounds))
    indicator[np.arange(extent), block_of] = 1.0
    op = _smooth_axis(indicator, kernel, axis=0)
    if target != extent:
        i0, i1, f = bilinear_weights(extent, target)
        op = op[i0] * (1.0 - f)[:, None] + op[i1] * f[:, None]
    return op


def _compile_blocks(mask: np.ndarray, cfg: McmgConfig) -> np.ndarray:
    height, width = mask.shape
    out_w, out_h = cfg.output_size or (width, height)
    rb, cb = _breakpoints(height, cfg.levels), _breakpoints(width, cfg.levels)
    counts = _block_counts(mask, rb[:-1], cb[:-1])
    blocks = []
    for c in cfg.levels:
        # every cell of level c is a contiguous run of blocks
        rs, cs = np.flatnonzero(rb[:-1] % c == 0), np.flatnonzero(cb[:-1] % c == 0)
        cell = np.add.reduceat(np.add.reduceat(counts, rs, axis=0), cs, axis=1)
        area = np.outer(np.diff(np.append(rb[rs], height)), np.diff(np.append(cb[cs], width)))
        grid = cell / area
        blocks.append(grid[np.ix_(rb[:-1] // c, cb[:-1] // c)])
    m = aggregate_levels(blocks)

    kernel = gaussian_kernel(cfg.sigma, cfg.radius)
    lv = _axis_operator(rb, height, kernel, out_h)
    lh = _axis_operator(cb, width, kernel, out_w)
    # associate the product so the inner dimension is the smaller block count
    if m.shape[0] <= m.shape[1]:
        left, right = lv, m @ lh.T
    else:
        left, right = lv @ m, lh.T
    # all factors are nonnegative; when every row of ``left`` sums to at most
    # one and ``right`` stays within [0, 1] the product cannot leave [0, 1]
    bounded = (
        left.min() >= 0.0 and right.min() >= 0.0
        and left.sum(axis=1).max() * right.max() <= 1.0 + QUANT_SLACK
    )
    out = np.empty((out_h, out_w), dtype=np.uint8)
    for r0 in range(0, out_h, _CHUNK_ROWS):
        vals = left[r0:r0 + _CHUNK_ROWS] @ right
        if not bounded:
            _check_unit_range(vals)
        _quantize_inplace(out[r0:r0 + _CHUNK_ROWS], vals)
    return out


def mcmg_compile(regions: Sequence[Polygon], width: int, height: int, config: McmgConfig | None = None) -> np.ndarray:
    """8-bit correlation map for one query's regions."""
    cfg = (config or McmgConfig()).resolve(width, height)
    if not regions:
        raise EmptyInput("query has no regions")
    mask = rasterize(regions, width, height)
    if not mask.any():
        log.warning("regions rasterize to an empty mask; emitting an all-zero map")
        out_w, out_h = cfg.output_size or (width, height)
        return np.zeros((out_h, out_w), dtype=np.uint8)
    n_r = len(_breakpoints(height, cfg.levels)) - 1
    n_c = len(_breakpoints(width, cfg.levels)) - 1
    # block form wins while the block counts stay below the dense filter's tap count
    if max(n_r, n_c) <= 2 * (2 * cfg.radius + 1):
        return _compile_blocks(mask, cfg)
    maps = [expand_to_pixels(grid_overlap(mask, c), width, height, c) for c in cfg.levels]
    out = gaussian_smooth(aggregate_levels(maps), cfg.sigma, cfg.radius)
    if cfg.output_size and cfg.output_size != (width, height):
        out = bilinear_upsample(out, cfg.output_size[1], cfg.output_size[0])
    return quantize_u8(out)
