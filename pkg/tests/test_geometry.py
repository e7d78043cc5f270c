import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import flood_fill_labels, raster_oracle, same_partition
from refmap.errors import DimensionMismatch, ZeroMass
from refmap.geometry import (
    Polygon,
    area_fraction,
    connected_components,
    mask_iou,
    rasterize,
    weighted_centroid,
)


def P(*pts):
    return Polygon.from_points(pts)


def test_square_covers_everything():
    assert rasterize([P((0, 0), (4, 0), (4, 4), (0, 4))], 4, 4).all()


def test_empty_region_list():
    m = rasterize([], 5, 3)
    assert m.shape == (3, 5) and not m.any()


def test_triangle_matches_point_in_polygon():
    tri = [(0, 0), (4, 0), (0, 4)]
    m = rasterize([P(*tri)], 4, 4)
    assert np.array_equal(m, raster_oracle([tri], 4, 4))
    # the four centers with x + y == 4 sit on the hypotenuse and are outside
    assert m.sum() == 6


def test_degenerate_polygon_sets_nothing(caplog):
    m = rasterize([P((1, 1), (3, 3), (2, 2))], 4, 4)
    assert not m.any()
    assert "degenerate" in caplog.text


def _random_polygon(rng, w, h, star):
    n = int(rng.integers(3, 12))
    cx, cy = rng.uniform(0, w), rng.uniform(0, h)
    ang = np.sort(rng.uniform(0, 2 * math.pi, n))
    if star:
        rad = rng.uniform(0.1, 0.7, n) * max(w, h)
    else:
        rad = np.full(n, rng.uniform(0.1, 0.7) * max(w, h))
    pts = np.stack([cx + rad * np.cos(ang), cy + rad * np.sin(ang)], 1)
    return [tuple(p) for p in np.round(pts, 2)]


@pytest.mark.parametrize("seed", range(12))
def test_rasterize_matches_oracle_random(seed):
    rng = np.random.default_rng(seed)
    w, h = int(rng.integers(1, 48)), int(rng.integers(1, 48))
    polys = [_random_polygon(rng, w, h, star=bool(seed % 2)) for _ in range(int(rng.integers(1, 4)))]
    got = rasterize([P(*p) for p in polys], w, h)
    assert np.array_equal(got, raster_oracle(polys, w, h))


def test_rasterize_integer_vertices_on_centers():
    # vertices and edges passing exactly through pixel centers
    poly = [(0.5, 0.5), (6.5, 0.5), (6.5, 4.5), (3.5, 7.5), (0.5, 4.5)]
    assert np.array_equal(rasterize([P(*poly)], 8, 8), raster_oracle([poly], 8, 8))


def test_self_intersecting_even_odd():
    bowtie = [(0, 0), (8, 8), (8, 0), (0, 8)]
    assert np.array_equal(rasterize([P(*bowtie)], 8, 8), raster_oracle([bowtie], 8, 8))


def test_iou_cases():
    a = np.ones((3, 3), bool)
    assert mask_iou(a, a) == 1.0
    b = np.zeros((3, 3), bool)
    c = np.zeros((3, 3), bool)
    b[0, 0] = c[2, 2] = True
    assert mask_iou(b, c) == 0.0
    assert mask_iou(np.array([[1, 1]], bool), np.array([[0, 1]], bool)) == 0.5
    assert mask_iou(np.zeros((2, 2), bool), np.zeros((2, 2), bool)) == 1.0
    assert mask_iou(np.zeros((2, 2), bool), np.ones((2, 2), bool)) == 0.0
    with pytest.raises(DimensionMismatch):
        mask_iou(np.zeros((2, 2), bool), np.zeros((2, 3), bool))


masks = st.integers(0, 2**30).map(lambda s: np.random.default_rng(s).random((9, 7)) < 0.4)


@given(masks, masks)
def test_iou_properties(a, b):
    iou = mask_iou(a, b)
    assert iou == mask_iou(b, a)
    assert 0.0 <= iou <= 1.0
    if a.any() or b.any():
        assert (iou == 1.0) == np.array_equal(a, b)
        na, nb = a.sum(), b.sum()
        if max(na, nb):
            assert iou <= min(na, nb) / max(na, nb) + 1e-12


def test_components_diagonal():
    m = np.array([[1, 0], [0, 1]], bool)
    assert connected_components(m, 8).count == 1
    assert connected_components(m, 4).count == 2
    assert connected_components(np.zeros((4, 4), bool)).count == 0


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("conn", [4, 8])
def test_components_match_flood_fill(seed, conn):
    m = np.random.default_rng(seed).random((32, 32)) < 0.45
    cs = connected_components(m, conn)
    ref, count = flood_fill_labels(m, conn)
    assert cs.count == count
    assert same_partition(cs.labels, ref)
    assert cs.sizes.sum() == m.sum()
    assert (cs.sizes > 0).all()
    for lab in range(1, cs.count + 1):
        rows, cols = np.nonzero(cs.labels == lab)
        assert cs.centroids[lab - 1] == pytest.approx((cols.mean(), rows.mean()))


def test_centroid_cases():
    m = np.zeros((8, 6))
    m[5, 3] = 2.0
    assert weighted_centroid(m) == (3.0, 5.0)
    assert weighted_centroid(np.ones((4, 7))) == (3.0, 1.5)
    two = np.zeros((1, 5))
    two[0, 0] = two[0, 4] = 1.0
    assert weighted_centroid(two) == (2.0, 0.0)
    with pytest.raises(ZeroMass):
        weighted_centroid(np.zeros((2, 2)))


@settings(max_examples=50)
@given(st.integers(0, 2**30), st.integers(0, 5), st.integers(0, 5))
def test_centroid_translation(seed, dx, dy):
    rng = np.random.default_rng(seed)
    m = np.zeros((16, 16))
    m[:8, :8] = rng.random((8, 8))
    shifted = np.roll(np.roll(m, dy, axis=0), dx, axis=1)
    x0, y0 = weighted_centroid(m)
    x1, y1 = weighted_centroid(shifted)
    assert x1 - x0 == pytest.approx(dx, abs=1e-9)
    assert y1 - y0 == pytest.approx(dy, abs=1e-9)


def test_area_fraction():
    assert area_fraction(np.ones((3, 3), bool)) == 1.0
    assert area_fraction(np.zeros((3, 3), bool)) == 0.0
    one = np.zeros((100, 500), bool)
    one[0, 0] = True
    assert area_fraction(one) == 0.00002
    assert area_fraction(one) < 0.002
