"""Binary tensor files, annotation documents, stored maps and manifests.

XTEN layout (little-endian, no padding)::

    bytes 0-3   magic b"XTEN"
    byte  4     dtype code (1 = float32, 2 = uint8)
    byte  5     ndim (0-8)
    ...         ndim x uint64 extents
    ...         row-major payload

Several XTEN records may be concatenated into one stream; ``read_tensors``
splits such a stream back into its records.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import (
    BadMagic,
    EmptyRegions,
    NonFiniteValue,
    SchemaError,
    ShapeOverflow,
    TensorFormatError,
)
from .geometry import Polygon

log = logging.getLogger(__name__)

MAGIC = b"XTEN"
DTYPE_F32 = 1
DTYPE_U8 = 2
MAX_NDIM = 8
_U64_MAX = 2**64 - 1

_CODE_TO_DTYPE = {DTYPE_F32: np.dtype("<f4"), DTYPE_U8: np.dtype("u1")}


def _dtype_code(arr: np.ndarray) -> int:
    if arr.dtype == np.float32:
        return DTYPE_F32
    if arr.dtype == np.uint8:
        return DTYPE_U8
    raise TensorFormatError(f"unsupported tensor dtype {arr.dtype}; expected float32 or uint8")


def check_finite(arr: np.ndarray) -> None:
    if arr.dtype.kind == "f" and not np.isfinite(arr).all():
        raise NonFiniteValue("tensor contains NaN or Inf")


def write_tensor(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    code = _dtype_code(t)
    if t.ndim > MAX_NDIM:
        raise ShapeOverflow(f"ndim {t.ndim} exceeds {MAX_NDIM}")
    check_finite(t)
    header = MAGIC + struct.pack("<BB", code, t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape)
    payload = np.ascontiguousarray(t, dtype=_CODE_TO_DTYPE[code]).tobytes()
    return header + payload


def _decode_one(buf: bytes | memoryview, pos: int) -> tuple[np.ndarray, int]:
    view = memoryview(buf)
    if bytes(view[pos:pos + 4]) != MAGIC:
        raise BadMagic("not an XTEN tensor (bad magic)")
    if len(view) < pos + 6:
        raise ShapeOverflow("truncated XTEN header")
    code, ndim = view[pos + 4], view[pos + 5]
    if code not in _CODE_TO_DTYPE:
        raise TensorFormatError(f"unknown XTEN dtype code {code}")
    if ndim > MAX_NDIM:
        raise ShapeOverflow(f"ndim {ndim} exceeds {MAX_NDIM}")
    pos += 6
    if len(view) < pos + 8 * ndim:
        raise ShapeOverflow("truncated XTEN extents")
    shape = struct.unpack_from(f"<{ndim}Q", view, pos)
    pos += 8 * ndim
    dtype = _CODE_TO_DTYPE[code]
    count = math.prod(shape)
    nbytes = count * dtype.itemsize
    if nbytes > _U64_MAX:
        raise ShapeOverflow("extent product overflows 64 bits")
    if len(view) < pos + nbytes:
        raise ShapeOverflow(f"payload holds {len(view) - pos} bytes, header declares {nbytes}")
    arr = np.frombuffer(view[pos:pos + nbytes], dtype=dtype).reshape(shape)
    # native-endian, writable copy detached from the input buffer
    arr = arr.astype(dtype.newbyteorder("="), copy=True)
    check_finite(arr)
    return arr, pos + nbytes


def read_tensor(data: bytes) -> np.ndarray:
    arr, end = _decode_one(data, 0)
    if end != len(data):
        raise ShapeOverflow(f"payload holds {len(data) - end} bytes beyond the declared shape")
    return arr


def read_tensors(data: bytes) -> list[np.ndarray]:
    """Split a stream of concatenated XTEN records."""
    out = []
    pos = 0
    while pos < len(data):
        arr, pos = _decode_one(data, pos)
        out.append(arr)
    return out


def write_tensors(tensors: Sequence[np.ndarray]) -> bytes:
    return b"".join(write_tensor(t) for t in tensors)


def load_tensor(path: str | Path) -> np.ndarray:
    return read_tensor(Path(path).read_bytes())


def save_tensor(path: str | Path, t: np.ndarray) -> None:
    Path(path).write_bytes(write_tensor(t))


# --- annotations -----------------------------------------------------------


@dataclass(frozen=True)
class QueryRecord:
    text: str
    regions: tuple[Polygon, ...]
    multi_hop: bool = False
    multi_ref: bool = False


@dataclass(frozen=True)
class AnnotationSet:
    image_width: int
    image_height: int
    queries: tuple[QueryRecord, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "image": {"width": self.image_width, "height": self.image_height},
            "queries": [
                {
                    "text": q.text,
                    "regions": [[[x, y] for x, y in poly.vertices] for poly in q.regions],
                    "multi_hop": q.multi_hop,
                    "multi_ref": q.multi_ref,
                }
                for q in self.queries
            ],
        }


def _require(obj: dict, key: str, kind, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"{where}: missing field {key!r}")
    value = obj[key]
    # bool is an int subclass; reject it where a number is expected
    if kind in (int, float) and isinstance(value, bool):
        raise SchemaError(f"{where}.{key}: expected {kind.__name__}, got bool")
    if kind is float and isinstance(value, int):
        return float(value)
    if not isinstance(value, kind):
        raise SchemaError(f"{where}.{key}: expected {kind.__name__}, got {type(value).__name__}")
    return value


def _parse_vertex(v, where: str) -> tuple[float, float]:
    if not isinstance(v, (list, tuple)) or len(v) != 2:
        raise SchemaError(f"{where}: vertex must be [x, y]")
    out = []
    for c in v:
        if isinstance(c, bool) or not isinstance(c, (int, float)) or not math.isfinite(c):
            raise SchemaError(f"{where}: vertex coordinates must be finite numbers")
        out.append(float(c))
    return out[0], out[1]


def parse_annotations(doc: dict) -> tuple[AnnotationSet, int]:
    """Validate an annotation document and clamp vertices into the image.

    Returns the annotation set and the number of clamped vertices.
    """
    image = _require(doc, "image", dict, "document")
    width = _require(image, "width", int, "image")
    height = _require(image, "height", int, "image")
    if width < 1 or height < 1:
        raise SchemaError(f"image dims must be >= 1, got {width}x{height}")
    raw_queries = _require(doc, "queries", list, "document")

    clamped = 0
    queries = []
    for qi, rq in enumerate(raw_queries):
        where = f"queries[{qi}]"
        text = _require(rq, "text", str, where)
        raw_regions = _require(rq, "regions", list, where)
        multi_hop = _require(rq, "multi_hop", bool, where)
        multi_ref = _require(rq, "multi_ref", bool, where)
        if not raw_regions:
            raise EmptyRegions(f"{where}: query has no regions")
        regions = []
        for ri, rr in enumerate(raw_regions):
            rwhere = f"{where}.regions[{ri}]"
            if not isinstance(rr, list):
                raise SchemaError(f"{rwhere}: polygon must be a list of vertices")
            verts = [_parse_vertex(v, rwhere) for v in rr]
            # explicit closing vertex is redundant
            if len(verts) > 1 and verts[0] == verts[-1]:
                verts.pop()
            if len(verts) < 3:
                raise SchemaError(f"{rwhere}: polygon needs at least 3 vertices")
            fixed = []
            for x, y in verts:
                cx = min(max(x, 0.0), float(width))
                cy = min(max(y, 0.0), float(height))
                if (cx, cy) != (x, y):
                    clamped += 1
                fixed.append((cx, cy))
            regions.append(Polygon(tuple(fixed)))
        if multi_ref and len(regions) < 2:
            log.warning("%s: multi_ref query has a single annotated region", where)
        queries.append(QueryRecord(text, tuple(regions), multi_hop, multi_ref))
    if clamped:
        log.warning("clamped %d out-of-bounds vertices", clamped)
    return AnnotationSet(width, height, tuple(queries)), clamped


def read_annotations(text: str) -> tuple[AnnotationSet, int]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"annotation document is not valid JSON: {exc}") from exc
    return parse_annotations(doc)


def write_annotations(a: AnnotationSet) -> str:
    return json.dumps(a.to_dict(), indent=1, sort_keys=True) + "\n"


def load_annotations(path: str | Path) -> tuple[AnnotationSet, int]:
    return read_annotations(Path(path).read_text(encoding="utf-8"))


# --- stored correlation maps -----------------------------------------------


def encode_png(img: np.ndarray) -> bytes:
    """8-bit grayscale (H, W) or RGB (H, W, 3) PNG, deterministic bytes."""
    img = np.ascontiguousarray(img, dtype=np.uint8)
    mode = "L" if img.ndim == 2 else "RGB"
    buf = io.BytesIO()
    Image.fromarray(img, mode=mode).save(buf, format="PNG", compress_level=1)
    return buf.getvalue()


def decode_png(data: bytes, mode: str = "L") -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        if im.format != "PNG":
            raise TensorFormatError(f"expected PNG, got {im.format}")
        return np.array(im.convert(mode))


def read_map(path: str | Path) -> np.ndarray:
    """Load a stored correlation map as float64 values in [0, 1].

    PNG and XTEN u8 maps are dequantized by 1/255; XTEN f32 maps are taken
    as-is.
    """
    data = Path(path).read_bytes()
    if data[:4] == MAGIC:
        arr = read_tensor(data)
        if arr.ndim != 2:
            raise TensorFormatError(f"map must be 2-D, got shape {arr.shape}")
        if arr.dtype == np.uint8:
            return arr.astype(np.float64) / 255.0
        return arr.astype(np.float64)
    try:
        arr = decode_png(data, "L")
    except (OSError, ValueError) as exc:
        raise TensorFormatError(f"{path}: neither XTEN nor PNG ({exc})") from exc
    return arr.astype(np.float64) / 255.0


# --- manifests -------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    annotations: Path
    features: tuple[Path, ...] = ()
    text: Path | None = None
    gt_dir: Path | None = None


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    """Entries of a JSON manifest, with paths resolved against its directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"manifest is not valid JSON: {exc}") from exc
    return parse_manifest(doc, path.parent)


def parse_manifest(doc, base: Path) -> list[ManifestEntry]:
    if not isinstance(doc, list):
        raise SchemaError("manifest must be a JSON list")
    entries, seen = [], set()
    for i, raw in enumerate(doc):
        where = f"manifest[{i}]"
        ident = _require(raw, "id", str, where)
        if ident in seen:
            raise SchemaError(f"{where}: duplicate id {ident!r}")
        seen.add(ident)
        ann = base / _require(raw, "annotations", str, where)
        feats = tuple(base / p for p in raw.get("features", []))
        text = base / raw["text"] if raw.get("text") else None
        gt_dir = base / raw["gt_dir"] if raw.get("gt_dir") else None
        entries.append(ManifestEntry(ident, ann, feats, text, gt_dir))
    return entries


def is_manifest(path: str | Path) -> bool:
    try:
        return isinstance(json.loads(Path(path).read_text(encoding="utf-8")), list)
    except (OSError, ValueError):
        return False
