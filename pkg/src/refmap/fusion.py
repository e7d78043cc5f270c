"""Forward-only text/image fusion layer.

Each block runs, in order:

1. bidirectional cross-attention (image rows attend to text tokens and text
   tokens attend to image rows, both from the block's inputs),
2. multiscale deformable self-attention over the image rows,
3. text self-attention.

Every attention sub-module is wrapped in a residual connection; there are no
feed-forward or normalization sub-layers. Projections act on row vectors
(``x @ W``). Weights are held as float32 and all arithmetic runs in float64.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, SchemaError
from .formats import read_tensor, write_tensor

POOL_MODES = {"average": "average", "avg": "average", "mean": "average", "max": "max", "first": "first"}
WEIGHTS_FORMAT = "refmap-weights/1"


@dataclass(frozen=True)
class AttentionWeights:
    query: np.ndarray
    key: np.ndarray
    value: np.ndarray
    output: np.ndarray


@dataclass(frozen=True)
class DeformableWeights:
    value: np.ndarray
    output: np.ndarray
    offset: np.ndarray  # (D, heads * levels * points * 2), (x, y) pairs innermost
    offset_bias: np.ndarray
    weight: np.ndarray  # (D, heads * levels * points)
    weight_bias: np.ndarray


@dataclass(frozen=True)
class FusionBlock:
    image_to_text: AttentionWeights
    text_to_image: AttentionWeights
    deformable: DeformableWeights
    text_self: AttentionWeights


@dataclass(frozen=True)
class FusionParams:
    dim: int
    n_heads: int
    n_levels: int
    n_points: int
    blocks: tuple[FusionBlock, ...]

    def __post_init__(self):
        if self.dim < 1 or self.n_heads < 1 or self.dim % self.n_heads:
            raise ValueError(f"dim {self.dim} is not divisible by head count {self.n_heads}")


# --- primitives ------------------------------------------------------------


def attention_kernel(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """softmax(q k^T / sqrt(d)) v with row-max stabilization."""
    logits = (q @ k.T) / math.sqrt(q.shape[1])
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w @ v


def multi_head_attention(xq: np.ndarray, xkv: np.ndarray, w: AttentionWeights, n_heads: int) -> np.ndarray:
    q, k, v = xq @ w.query, xkv @ w.key, xkv @ w.value
    dh = q.shape[1] // n_heads
    heads = [
        attention_kernel(q[:, h * dh:(h + 1) * dh], k[:, h * dh:(h + 1) * dh], v[:, h * dh:(h + 1) * dh])
        for h in range(n_heads)
    ]
    return np.concatenate(heads, axis=1) @ w.output


def _as_matrix(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {x.shape}")
    return x


def cross_attention_block(text, image, block: FusionBlock, n_heads: int):
    text, image = _as_matrix(text, "text"), _as_matrix(image, "image")
    if text.shape[1] != image.shape[1]:
        raise DimensionMismatch(f"text dim {text.shape[1]} != image dim {image.shape[1]}")
    new_image = image + multi_head_attention(image, text, block.image_to_text, n_heads)
    new_text = text + multi_head_attention(text, image, block.text_to_image, n_heads)
    return new_text, new_image


def text_self_attention(text, w: AttentionWeights, n_heads: int) -> np.ndarray:
    text = _as_matrix(text, "text")
    return text + multi_head_attention(text, text, w, n_heads)


def pool_text(text: np.ndarray, mode: str = "average") -> np.ndarray:
    text = np.asarray(text, dtype=np.float64)
    if text.ndim != 2 or text.shape[0] < 1:
        raise DimensionMismatch(f"text must be (S >= 1, D), got shape {text.shape}")
    try:
        mode = POOL_MODES[mode]
    except KeyError:
        raise ValueError(f"unknown pooling mode {mode!r}") from None
    if mode == "average":
        return text.mean(axis=0)
    if mode == "max":
        return text.max(axis=0)
    return text[0].copy()


# --- multiscale layout -----------------------------------------------------


def check_levels(levels: Sequence[np.ndarray], require_decreasing: bool = True) -> int:
    """Validate a multiscale feature set and return its embedding dim."""
    if len(levels) < 1:
        raise DimensionMismatch("feature set needs at least one level")
    dims = set()
    for i, f in enumerate(levels):
        if f.ndim != 3 or f.shape[0] < 1 or f.shape[1] < 1:
            raise DimensionMismatch(f"level {i} must be (H, W, D), got shape {f.shape}")
        dims.add(f.shape[2])
    if len(dims) != 1:
        raise DimensionMismatch(f"levels disagree on embedding dim: {sorted(dims)}")
    if require_decreasing:
        for a, b in zip(levels, levels[1:]):
            if not (b.shape[0] < a.shape[0] and b.shape[1] < a.shape[1]):
                raise DimensionMismatch(
                    f"level extents must strictly decrease, got {a.shape[:2]} then {b.shape[:2]}"
                )
    return dims.pop()


def flatten(levels: Sequence[np.ndarray]) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Concatenate levels row-major, finest first, into a (P, D) matrix."""
    check_levels(levels, require_decreasing=False)
    dims = [(f.shape[0], f.shape[1]) for f in levels]
    rows = np.concatenate([f.reshape(-1, f.shape[2]) for f in levels], axis=0)
    return rows, dims


def unflatten(rows: np.ndarray, level_dims: Sequence[tuple[int, int]]) -> list[np.ndarray]:
    total = sum(h * w for h, w in level_dims)
    if rows.ndim != 2 or rows.shape[0] != total:
        raise DimensionMismatch(f"{rows.shape[0] if rows.ndim else 0} rows for levels totalling {total}")
    out, start = [], 0
    for h, w in level_dims:
        out.append(rows[start:start + h * w].reshape(h, w, rows.shape[1]))
        start += h * w
    return out


# --- deformable attention --------------------------------------------------


def _sample_bilinear(value: np.ndarray, x: np.ndarray, y: np.ndarray, head: np.ndarray) -> np.ndarray:
    """Zero-padded bilinear lookup of value[row, col, head, :] at pixel coords."""
    h, w = value.shape[:2]
    x0, y0 = np.floor(x), np.floor(y)
    fx, fy = x - x0, y - y0
    x0, y0 = x0.astype(np.int64), y0.astype(np.int64)
    out = np.zeros(x.shape + (value.shape[3],))
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            sample = value[np.where(ok, yi, 0), np.where(ok, xi, 0), head]
            out += np.where(ok, wx * wy, 0.0)[..., None] * sample
    return out


def deformable_self_attention(
    image: np.ndarray,
    level_dims: Sequence[tuple[int, int]],
    w: DeformableWeights,
    n_heads: int,
    n_points: int,
) -> np.ndarray:
    image = _as_matrix(image, "image")
    n_rows, dim = image.shape
    n_levels = len(level_dims)
    if n_rows != sum(h * ww for h, ww in level_dims):
        raise DimensionMismatch(f"{n_rows} image rows do not match level dims {list(level_dims)}")
    if w.offset.shape[1] != n_heads * n_levels * n_points * 2:
        raise DimensionMismatch("offset projection does not match heads x levels x points")
    dh = dim // n_heads

    values = unflatten(image @ w.value, level_dims)
    values = [v.reshape(v.shape[0], v.shape[1], n_heads, dh) for v in values]
    offsets = (image @ w.offset + w.offset_bias).reshape(n_rows, n_heads, n_levels, n_points, 2)
    logits = (image @ w.weight + w.weight_bias).reshape(n_rows, n_heads, n_levels * n_points)
    logits -= logits.max(axis=2, keepdims=True)
    attn = np.exp(logits)
    attn /= attn.sum(axis=2, keepdims=True)
    attn = attn.reshape(n_rows, n_heads, n_levels, n_points)

    # cell centers of each query in its own level's pixel units, plus the
    # extent of that level, so positions rescale exactly onto other levels
    cx = np.concatenate([np.tile(np.arange(ww) + 0.5, h) for h, ww in level_dims])
    cy = np.concatenate([np.repeat(np.arange(h) + 0.5, ww) for h, ww in level_dims])
    qw = np.concatenate([np.full(h * ww, ww, dtype=np.float64) for h, ww in level_dims])
    qh = np.concatenate([np.full(h * ww, h, dtype=np.float64) for h, ww in level_dims])

    head = np.broadcast_to(np.arange(n_heads)[None, :, None], (n_rows, n_heads, n_points))
    out = np.zeros((n_rows, n_heads, dh))
    for lvl, (h, ww) in enumerate(level_dims):
        px = (cx * ww / qw - 0.5)[:, None, None] + offsets[:, :, lvl, :, 0]
        py = (cy * h / qh - 0.5)[:, None, None] + offsets[:, :, lvl, :, 1]
        samples = _sample_bilinear(values[lvl], px, py, head)
        out += np.einsum("nhk,nhkd->nhd", attn[:, :, lvl], samples)
    return image + out.reshape(n_rows, dim) @ w.output


# --- full layer ------------------------------------------------------------


def fusion_forward(text, levels: Sequence[np.ndarray], params: FusionParams, n_blocks: int | None = None):
    """Run the fusion blocks; returns (text', image rows', level dims)."""
    text = _as_matrix(text, "text")
    dim = check_levels(levels, require_decreasing=False)
    if text.shape[1] != dim or dim != params.dim:
        raise DimensionMismatch(f"text dim {text.shape[1]}, feature dim {dim}, weights dim {params.dim}")
    if len(levels) != params.n_levels:
        raise DimensionMismatch(f"{len(levels)} feature levels, weights expect {params.n_levels}")
    rows, dims = flatten(levels)
    rows = rows.astype(np.float64)
    n_blocks = len(params.blocks) if n_blocks is None else n_blocks
    if n_blocks > len(params.blocks):
        raise ValueError(f"requested {n_blocks} blocks, weights hold {len(params.blocks)}")
    for block in params.blocks[:n_blocks]:
        text, rows = cross_attention_block(text, rows, block, params.n_heads)
        rows = deformable_self_attention(rows, dims, block.deformable, params.n_heads, params.n_points)
        text = text_self_attention(text, block.text_self, params.n_heads)
    return text, rows, dims


# --- parameters ------------------------------------------------------------


def _param_shapes(dim, n_heads, n_levels, n_points):
    sampling = n_heads * n_levels * n_points
    attn = {f.name: (dim, dim) for f in fields(AttentionWeights)}
    deform = {
        "value": (dim, dim),
        "output": (dim, dim),
        "offset": (dim, sampling * 2),
        "offset_bias": (sampling * 2,),
        "weight": (dim, sampling),
        "weight_bias": (sampling,),
    }
    return {"image_to_text": attn, "text_to_image": attn, "deformable": deform, "text_self": attn}


_MODULE_TYPES = {
    "image_to_text": AttentionWeights,
    "text_to_image": AttentionWeights,
    "deformable": DeformableWeights,
    "text_self": AttentionWeights,
}


def parameter_names(params: FusionParams) -> list[str]:
    shapes = _param_shapes(params.dim, params.n_heads, params.n_levels, params.n_points)
    return [
        f"blocks.{b}.{module}.{name}"
        for b in range(len(params.blocks))
        for module, entries in shapes.items()
        for name in entries
    ]


def _build(dim, n_heads, n_levels, n_points, n_blocks, make) -> FusionParams:
    shapes = _param_shapes(dim, n_heads, n_levels, n_points)
    blocks = []
    for b in range(n_blocks):
        modules = {}
        for module, entries in shapes.items():
            modules[module] = _MODULE_TYPES[module](
                **{name: make(f"blocks.{b}.{module}.{name}", shape) for name, shape in entries.items()}
            )
        blocks.append(FusionBlock(**modules))
    return FusionParams(dim, n_heads, n_levels, n_points, tuple(blocks))


def init_params(
    dim: int, n_levels: int = 4, n_heads: int = 4, n_points: int = 4, n_blocks: int = 1, seed: int = 0
) -> FusionParams:
    """Seeded uniform weights in [-1/sqrt(dim), 1/sqrt(dim)], drawn in name order."""
    if dim % n_heads:
        raise ValueError(f"dim {dim} is not divisible by head count {n_heads}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(dim)
    return _build(
        dim, n_heads, n_levels, n_points, n_blocks,
        lambda name, shape: rng.uniform(-bound, bound, size=shape).astype(np.float32),
    )


def zero_output_params(params: FusionParams) -> FusionParams:
    """Copy of ``params`` with every output projection zeroed."""
    blocks = []
    for blk in params.blocks:
        blocks.append(FusionBlock(**{
            module: replace(getattr(blk, module), output=np.zeros_like(getattr(blk, module).output))
            for module in _MODULE_TYPES
        }))
    return replace(params, blocks=tuple(blocks))


def _get(params: FusionParams, name: str) -> np.ndarray:
    _, b, module, field_name = name.split(".")
    return getattr(getattr(params.blocks[int(b)], module), field_name)


def encode_params(params: FusionParams, stream_name: str) -> tuple[bytes, bytes]:
    """(JSON index, concatenated XTEN stream) for a weights file pair."""
    chunks, tensors, offset = [], {}, 0
    for name in parameter_names(params):
        blob = write_tensor(np.asarray(_get(params, name), dtype=np.float32))
        tensors[name] = {"offset": offset, "nbytes": len(blob)}
        chunks.append(blob)
        offset += len(blob)
    index = {
        "format": WEIGHTS_FORMAT,
        "dim": params.dim,
        "n_heads": params.n_heads,
        "n_levels": params.n_levels,
        "n_points": params.n_points,
        "n_blocks": len(params.blocks),
        "stream": stream_name,
        "tensors": tensors,
    }
    return (json.dumps(index, indent=1, sort_keys=True) + "\n").encode("utf-8"), b"".join(chunks)


def save_params(index_path: str | Path, params: FusionParams) -> None:
    """Write a JSON index plus a sibling ``.xten`` stream."""
    index_path = Path(index_path)
    stream_path = index_path.with_suffix(".xten")
    index, stream = encode_params(params, stream_path.name)
    stream_path.write_bytes(stream)
    index_path.write_bytes(index)


def load_params(index_path: str | Path) -> FusionParams:
    index_path = Path(index_path)
    try:
        index = json.loads(index_path.read_text(encoding="utf-8"))
        if index.get("format") != WEIGHTS_FORMAT:
            raise SchemaError(f"unsupported weights format {index.get('format')!r}")
        stream = (index_path.parent / index["stream"]).read_bytes()
        meta = [int(index[k]) for k in ("dim", "n_heads", "n_levels", "n_points", "n_blocks")]
        table = index["tensors"]
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed weights index: {exc}") from exc

    def make(name, shape):
        if name not in table:
            raise SchemaError(f"weights file lacks {name}")
        off, n = table[name]["offset"], table[name]["nbytes"]
        arr = read_tensor(stream[off:off + n])
        if arr.shape != shape or arr.dtype != np.float32:
            raise DimensionMismatch(f"{name}: expected float32 {shape}, got {arr.dtype} {arr.shape}")
        return arr

    return _build(*meta, make)
