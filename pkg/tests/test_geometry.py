import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from setdet.geometry import (
    Box,
    contains,
    from_corner,
    giou,
    giou_corner,
    iou,
    iou_corner,
    pairwise_giou,
    pairwise_iou,
    to_corner,
)


def raster_iou(a, b, res=1e-3):
    """Area-count oracle: sample a grid of cell centres over both boxes."""
    lo = np.minimum(a[:2], b[:2])
    hi = np.maximum(a[2:], b[2:])
    xs = np.arange(lo[0] + res / 2, hi[0], res)
    ys = np.arange(lo[1] + res / 2, hi[1], res)
    gx, gy = np.meshgrid(xs, ys)
    in_a = (gx >= a[0]) & (gx <= a[2]) & (gy >= a[1]) & (gy <= a[3])
    in_b = (gx >= b[0]) & (gx <= b[2]) & (gy >= b[1]) & (gy <= b[3])
    return (in_a & in_b).sum() / (in_a | in_b).sum()


boxes = st.tuples(
    st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(0.01, 1.0), st.floats(0.01, 1.0)
).map(lambda t: Box(*t))


class TestIoU:
    def test_identical(self):
        assert iou(Box(0.5, 0.5, 1, 1), Box(0.5, 0.5, 1, 1)) == 1.0

    def test_disjoint(self):
        assert iou_corner((0, 0, 0.2, 0.2), (0.5, 0.5, 0.9, 0.9)) == 0.0

    def test_corner_offset_matches_raster(self):
        a, b = np.array([0, 0, 1, 1.0]), np.array([0.5, 0.5, 1.5, 1.5])
        oracle = raster_iou(a, b)
        assert oracle == pytest.approx(1 / 7, abs=1e-3)
        assert iou_corner(a, b) == pytest.approx(1 / 7, abs=1e-12)

    def test_zero_area_is_zero(self):
        assert iou(Box(0.5, 0.5, 0, 0), Box(0.5, 0.5, 0, 0)) == 0.0
        assert iou(Box(0.5, 0.5, 0, 0.3), Box(0.5, 0.5, 0.2, 0.2)) == 0.0


class TestGIoU:
    def test_identical(self):
        assert giou(Box(0.3, 0.4, 0.2, 0.1), Box(0.3, 0.4, 0.2, 0.1)) == pytest.approx(1.0)

    def test_touching(self):
        assert giou_corner((0, 0, 1, 1), (1, 0, 2, 1)) == pytest.approx(0.0, abs=1e-15)

    def test_gap(self):
        assert giou_corner((0, 0, 1, 1), (2, 0, 3, 1)) == pytest.approx(-1 / 3)

    def test_both_degenerate(self):
        assert giou(Box(0.1, 0.1, 0, 0), Box(0.9, 0.9, 0, 0)) == 0.0

    def test_one_degenerate_finite(self):
        v = giou(Box(0.1, 0.1, 0, 0), Box(0.5, 0.5, 0.2, 0.2))
        assert np.isfinite(v) and -1 <= v < 0


class TestConversions:
    def test_unit_box(self):
        assert to_corner(Box(0.5, 0.5, 1, 1)) == (0, 0, 1, 1)

    def test_quarter_box(self):
        assert to_corner(Box(0.25, 0.25, 0.5, 0.5)) == (0, 0, 0.5, 0.5)

    @given(boxes)
    def test_round_trip(self, b):
        np.testing.assert_allclose(from_corner(to_corner(b)), b, atol=1e-12)


class TestContains:
    def test_centre(self):
        b = Box(0.4, 0.6, 0.2, 0.2)
        assert contains((0.4, 0.6), b)

    def test_outside(self):
        assert not contains((0.9, 0.9), Box(0.4, 0.6, 0.2, 0.2))

    def test_edge_is_inside(self):
        assert contains((0.5, 0.5), from_corner((0.25, 0.25, 0.5, 0.75)))


@settings(max_examples=200)
@given(boxes, boxes)
def test_giou_bounded_by_iou_and_symmetric(a, b):
    i, g = iou(a, b), giou(a, b)
    assert g <= i + 1e-12
    assert -1 <= g <= 1 and 0 <= i <= 1
    assert iou(b, a) == pytest.approx(i, abs=1e-12)
    assert giou(b, a) == pytest.approx(g, abs=1e-12)


@given(boxes)
def test_self_giou_is_one(a):
    assert giou(a, a) == pytest.approx(1.0)


def test_giou_equals_iou_iff_enclosing_is_union():
    # nested boxes: the enclosing box is the outer box, which is the union
    a, b = Box(0.5, 0.5, 0.4, 0.4), Box(0.5, 0.5, 0.2, 0.2)
    assert giou(a, b) == pytest.approx(iou(a, b))
    c = Box(0.2, 0.2, 0.2, 0.2)
    assert giou(a, c) < iou(a, c)


def test_pairwise_shapes():
    a = np.random.default_rng(0).uniform(0.2, 0.5, (5, 4))
    b = np.random.default_rng(1).uniform(0.2, 0.5, (3, 4))
    assert pairwise_iou(a, b).shape == (5, 3)
    assert pairwise_giou(a, b).shape == (5, 3)
