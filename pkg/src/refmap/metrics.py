"""Localization scores for correlation maps against polygon ground truth.

* ``r_su``: share of the map's mass that falls on ground-truth pixels (higher is better).
* ``r_as``: distance from the map's center of mass to the nearest region
  centroid, over the image diagonal in pixel-center units (lower is better).
* ``r_da``: (1 - Jensen-Shannon distance to the uniform ground-truth
  distribution) scaled by agreement between the number of attention blobs
  and the number of regions (higher is better).
* ``r_mi``: weighted blend ``w_su*r_su + w_as*(1 - r_as) + w_da*r_da``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, NoGroundTruth, QueryCountMismatch
from .formats import AnnotationSet, QueryRecord
from .geometry import area_fraction, connected_components, mask_iou, rasterize, weighted_centroid
from .hmsa import bilinear_upsample

AREA_MIN = 0.002
AREA_MAX = 0.75


@dataclass(frozen=True)
class RmiWeights:
    su: float = 0.40
    as_: float = 0.35
    da: float = 0.25

    def __post_init__(self):
        if min(self.su, self.as_, self.da) < 0:
            raise ValueError("metric weights must be nonnegative")
        if abs(self.su + self.as_ + self.da - 1.0) > 1e-9:
            raise ValueError(f"metric weights must sum to 1, got {self.su + self.as_ + self.da}")

    def as_list(self) -> list[float]:
        return [self.su, self.as_, self.da]


@dataclass(frozen=True)
class QueryScore:
    id: str
    r_su: float
    r_as: float
    r_da: float
    r_mi: float


@dataclass
class MetricReport:
    queries: list[QueryScore] = field(default_factory=list)
    weights: RmiWeights = field(default_factory=RmiWeights)
    config: dict = field(default_factory=dict)

    def aggregate(self) -> dict[str, float]:
        n = len(self.queries)
        out = {}
        for key in ("r_su", "r_as", "r_da", "r_mi"):
            total = 0.0
            for q in self.queries:
                total += getattr(q, key)
            out[key] = total / n if n else 0.0
        return out

    def to_dict(self) -> dict:
        return {
            "queries": [asdict(q) for q in self.queries],
            "aggregate": {**self.aggregate(), "count": len(self.queries)},
            "weights": self.weights.as_list(),
            "config": self.config,
        }


def _check_shapes(m: np.ndarray, gt: np.ndarray) -> None:
    if m.shape != gt.shape:
        raise DimensionMismatch(f"map shape {m.shape} != ground-truth shape {gt.shape}")


def r_su(m: np.ndarray, gt: np.ndarray) -> float:
    _check_shapes(m, gt)
    total = float(m.sum())
    if total <= 0:
        return 0.0
    return float(m[gt].sum()) / total


def region_centroids(region_masks: Sequence[np.ndarray]) -> list[tuple[float, float]]:
    """Pixel-center centroid of every nonempty region mask."""
    return [weighted_centroid(r.astype(np.float64)) for r in region_masks if r.any()]


def r_as(m: np.ndarray, centroids: Sequence[tuple[float, float]]) -> float:
    if not centroids:
        raise NoGroundTruth("no ground-truth region to measure shift against")
    if not m.sum() > 0:
        return 1.0
    x, y = weighted_centroid(m)
    height, width = m.shape
    diag = math.hypot(width - 1, height - 1)
    dist = min(math.hypot(x - cx, y - cy) for cx, cy in centroids)
    if diag == 0:
        return 0.0
    return min(1.0, dist / diag)


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Base-2 Jensen-Shannon divergence of two distributions, in [0, 1]."""
    p, q = p.ravel(), q.ravel()
    mid = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log2(a[nz] / mid[nz])))

    return min(1.0, max(0.0, 0.5 * kl(p) + 0.5 * kl(q)))


def attention_points(m: np.ndarray, tau_frac: float = 0.5) -> int:
    """Number of 8-connected blobs at or above ``tau_frac`` of the map's peak."""
    peak = m.max()
    if not peak > 0:
        return 0
    return connected_components(m >= tau_frac * peak, connectivity=8).count


def r_da(m: np.ndarray, gt: np.ndarray, n_regions: int, tau_frac: float = 0.5) -> float:
    _check_shapes(m, gt)
    n_gt = int(np.count_nonzero(gt))
    if n_gt == 0 or n_regions < 1:
        raise NoGroundTruth("ground-truth mask is empty")
    total = float(m.sum())
    if total <= 0:
        return 0.0
    p = m / total
    q = gt / float(n_gt)
    distance = math.sqrt(js_divergence(p, q))
    c = attention_points(m, tau_frac)
    rho = min(c, n_regions) / max(c, n_regions)
    return (1.0 - distance) * rho


def r_mi(su: float, as_: float, da: float, w: RmiWeights = RmiWeights()) -> float:
    return w.su * su + w.as_ * (1.0 - as_) + w.da * da


def evaluate_query(
    m: np.ndarray,
    query: QueryRecord,
    width: int,
    height: int,
    weights: RmiWeights = RmiWeights(),
    tau_frac: float = 0.5,
    query_id: str = "",
) -> QueryScore:
    """Score one map; maps at another resolution are resized to the image first."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (height, width):
        m = bilinear_upsample(m, height, width)
    region_masks = [rasterize([poly], width, height) for poly in query.regions]
    gt = np.logical_or.reduce(region_masks)
    centroids = region_centroids(region_masks)
    n_regions = len(centroids)
    su = r_su(m, gt)
    shift = r_as(m, centroids)
    da = r_da(m, gt, n_regions, tau_frac)
    return QueryScore(query_id, su, shift, da, r_mi(su, shift, da, weights))


@dataclass(frozen=True)
class ValidationResult:
    index: int
    passed: bool
    iou: float
    area: float
    reasons: tuple[str, ...]


def validate_annotations(
    a: AnnotationSet, b: AnnotationSet, iou_threshold: float = 0.5
) -> list[ValidationResult]:
    """Pair queries by index; each needs IoU above threshold and an admissible area."""
    if (a.image_width, a.image_height) != (b.image_width, b.image_height):
        raise DimensionMismatch("annotation sets describe different image sizes")
    if len(a.queries) != len(b.queries):
        raise QueryCountMismatch(f"{len(a.queries)} queries vs {len(b.queries)}")
    w, h = a.image_width, a.image_height
    results = []
    for i, (qa, qb) in enumerate(zip(a.queries, b.queries)):
        ma, mb = rasterize(qa.regions, w, h), rasterize(qb.regions, w, h)
        iou = mask_iou(ma, mb)
        area = area_fraction(ma)
        reasons = []
        if not iou > iou_threshold:
            reasons.append(f"iou {iou:.4f} <= {iou_threshold}")
        if not AREA_MIN <= area <= AREA_MAX:
            reasons.append(f"area {area:.6f} outside [{AREA_MIN}, {AREA_MAX}]")
        results.append(ValidationResult(i, not reasons, iou, area, tuple(reasons)))
    return results

