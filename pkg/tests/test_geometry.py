import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from petricount.errors import EllipseFitError, MaskShapeError
from petricount.geometry import (
    BBox,
    EllipseModel,
    RleMask,
    estimate_dish_ellipse,
    fit_ellipse,
    inscribed_ellipse,
    instance_touches_ellipse,
    iou_bbox,
    iou_mask,
    mask_area,
    rasterize_polygons,
    shrink_ellipse,
)


def dense_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = int(np.logical_and(a, b).sum())
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 0.0
    return inter / union


def random_mask(rng, w, h, p=0.5) -> np.ndarray:
    return (rng.random((h, w)) < p).astype(np.uint8)


class TestBBox:
    def test_identical_boxes(self):
        b = BBox(0, 0, 2, 2)
        assert iou_bbox(b, b) == 1.0

    def test_disjoint(self):
        assert iou_bbox(BBox(0, 0, 1, 1), BBox(5, 5, 6, 6)) == 0.0

    def test_partial_overlap(self):
        assert iou_bbox(BBox(0, 0, 2, 2), BBox(1, 0, 3, 2)) == pytest.approx(1 / 3)

    def test_symmetric(self):
        p, q = BBox(0, 0, 3, 4), BBox(1, 1, 5, 2)
        assert iou_bbox(p, q) == iou_bbox(q, p)

    def test_degenerate_rejected(self):
        with pytest.raises(MaskShapeError):
            BBox(2, 0, 2, 1)

    def test_xywh_round_trip(self):
        b = BBox(1.5, 2.0, 4.5, 7.0)
        assert BBox.from_xywh(b.to_xywh()) == b


class TestRleMask:
    def test_round_trip_small(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            w, h = int(rng.integers(1, 65)), int(rng.integers(1, 65))
            dense = random_mask(rng, w, h)
            m = RleMask.from_dense(dense)
            assert np.array_equal(m.to_dense(), dense)

    @settings(max_examples=60, deadline=None)
    @given(
        w=st.integers(1, 32),
        h=st.integers(1, 32),
        seed=st.integers(0, 2**31),
        p=st.floats(0.05, 0.95),
    )
    def test_round_trip_property(self, w, h, seed, p):
        dense = random_mask(np.random.default_rng(seed), w, h, p)
        m = RleMask.from_dense(dense)
        assert np.array_equal(m.to_dense(), dense)
        assert m.counts[0] == 0 or dense.flatten(order="F")[0] == 0

    def test_background_first_convention(self):
        dense = np.zeros((2, 2), dtype=np.uint8)
        dense[0, 0] = 1  # first pixel in column-major order
        m = RleMask.from_dense(dense)
        assert m.counts == (0, 1, 3)

    def test_area_all_background(self):
        m = RleMask(width=4, height=3, counts=(12,))
        assert mask_area(m) == 0

    def test_area_all_foreground(self):
        m = RleMask(width=5, height=4, counts=(0, 20))
        assert mask_area(m) == 20

    def test_area_matches_dense_count(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            dense = random_mask(rng, int(rng.integers(1, 50)), int(rng.integers(1, 50)))
            assert mask_area(RleMask.from_dense(dense)) == int(dense.sum())

    def test_sum_invariant_enforced(self):
        with pytest.raises(MaskShapeError):
            RleMask(width=3, height=3, counts=(4, 4))

    def test_tight_bbox_matches_dense(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            w, h = int(rng.integers(2, 40)), int(rng.integers(2, 40))
            dense = random_mask(rng, w, h, p=0.15)
            if dense.sum() == 0:
                continue
            box = RleMask.from_dense(dense).tight_bbox()
            ys, xs = np.nonzero(dense)
            assert box == BBox(xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)


class TestMaskIoU:
    def test_equal_masks(self):
        dense = random_mask(np.random.default_rng(1), 8, 8)
        m = RleMask.from_dense(dense)
        assert iou_mask(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((3, 3), dtype=np.uint8)
        b = np.zeros((3, 3), dtype=np.uint8)
        a[0, 0] = 1
        b[2, 2] = 1
        assert iou_mask(RleMask.from_dense(a), RleMask.from_dense(b)) == 0.0

    def test_three_by_three_overlap(self):
        # areas 4 and 3 with overlap 2 -> 2/5
        a = np.array([[1, 1, 0], [1, 1, 0], [0, 0, 0]], dtype=np.uint8)
        b = np.array([[0, 1, 0], [0, 1, 0], [0, 1, 0]], dtype=np.uint8)
        assert dense_iou(a, b) == pytest.approx(0.4)
        assert iou_mask(RleMask.from_dense(a), RleMask.from_dense(b)) == pytest.approx(0.4)

    def test_matches_dense_exactly(self):
        rng = np.random.default_rng(11)
        for _ in range(300):
            w, h = int(rng.integers(1, 65)), int(rng.integers(1, 65))
            da, db = random_mask(rng, w, h), random_mask(rng, w, h)
            got = iou_mask(RleMask.from_dense(da), RleMask.from_dense(db))
            assert got == dense_iou(da, db)

    def test_symmetry_and_bounds(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            da, db = random_mask(rng, 16, 16), random_mask(rng, 16, 16)
            p, q = RleMask.from_dense(da), RleMask.from_dense(db)
            v = iou_mask(p, q)
            assert v == iou_mask(q, p)
            assert 0.0 <= v <= 1.0

    def test_dimension_mismatch(self):
        a = RleMask(width=2, height=2, counts=(4,))
        b = RleMask(width=3, height=2, counts=(6,))
        with pytest.raises(MaskShapeError):
            iou_mask(a, b)


class TestEllipseFit:
    def test_circle_recovery(self):
        phi = np.linspace(0, 2 * math.pi, 12, endpoint=False)
        pts = np.column_stack([10 * np.cos(phi), 10 * np.sin(phi)])
        e = fit_ellipse(pts)
        assert e.cx == pytest.approx(0.0, abs=1e-6)
        assert e.cy == pytest.approx(0.0, abs=1e-6)
        assert e.a == pytest.approx(10.0, rel=1e-6)
        assert e.b == pytest.approx(10.0, rel=1e-6)

    def test_rotated_ellipse_recovery(self):
        truth = EllipseModel(cx=250.0, cy=180.0, a=100.0, b=80.0, theta=0.3)
        e = fit_ellipse(truth.boundary_points(20))
        assert e.cx == pytest.approx(truth.cx, rel=1e-6)
        assert e.cy == pytest.approx(truth.cy, rel=1e-6)
        assert e.a == pytest.approx(truth.a, rel=1e-6)
        assert e.b == pytest.approx(truth.b, rel=1e-6)
        assert e.theta == pytest.approx(truth.theta, rel=1e-6)

    def test_too_few_points(self):
        with pytest.raises(EllipseFitError):
            fit_ellipse([(0, 0), (1, 0), (2, 1), (3, 3), (1, 2)])

    def test_collinear_points(self):
        pts = [(float(i), 2.0 * i) for i in range(10)]
        with pytest.raises(EllipseFitError):
            fit_ellipse(pts)

    def test_noise_tolerance(self):
        truth = EllipseModel(cx=300.0, cy=260.0, a=200.0, b=150.0, theta=1.1)
        rng = np.random.default_rng(5)
        pts = truth.boundary_points(200)
        pts = pts + rng.normal(0, 0.01 * truth.a, size=pts.shape)
        e = fit_ellipse(pts)
        err = math.hypot(e.cx - truth.cx, e.cy - truth.cy)
        assert err < 0.01 * truth.a

    def test_random_ellipses_recovered(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            a = float(rng.uniform(50, 300))
            truth = EllipseModel(
                cx=float(rng.uniform(-100, 500)),
                cy=float(rng.uniform(-100, 500)),
                a=a,
                b=float(rng.uniform(0.4, 1.0)) * a,
                theta=float(rng.uniform(0, math.pi)),
            )
            e = fit_ellipse(truth.boundary_points(40, phase=0.17))
            assert e.a == pytest.approx(truth.a, rel=1e-6)
            assert e.b == pytest.approx(truth.b, rel=1e-6)
            assert e.cx == pytest.approx(truth.cx, rel=1e-6, abs=1e-6)
            assert e.cy == pytest.approx(truth.cy, rel=1e-6, abs=1e-6)


class TestShrink:
    def test_identity(self):
        e = EllipseModel(5, 6, 10, 8, 0.4)
        assert shrink_ellipse(e, 1.0) == e

    def test_axis_scaling(self):
        e = shrink_ellipse(EllipseModel(0, 0, 10, 8, 0.0), 0.98)
        assert e.a == pytest.approx(9.8)
        assert e.b == pytest.approx(7.84)

    def test_area_scaling_law(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a = float(rng.uniform(5, 50))
            e = EllipseModel(
                float(rng.uniform(-10, 10)),
                float(rng.uniform(-10, 10)),
                a,
                float(rng.uniform(0.3, 1.0)) * a,
                float(rng.uniform(0, math.pi)),
            )
            f = float(rng.uniform(0.2, 1.0))
            s = shrink_ellipse(e, f)
            assert s.area() == pytest.approx(f**2 * e.area(), rel=1e-12)
            assert (s.cx, s.cy, s.theta) == (e.cx, e.cy, e.theta)
            assert s.a / s.b == pytest.approx(e.a / e.b, rel=1e-12)


def _mask_instance(dense):
    m = RleMask.from_dense(dense)
    return SimpleNamespace(mask=m, bbox=m.tight_bbox())


class TestTouchesEllipse:
    def test_center_instance(self):
        e = EllipseModel(16, 16, 10, 10, 0.0)
        dense = np.zeros((32, 32), dtype=np.uint8)
        dense[14:18, 14:18] = 1
        assert instance_touches_ellipse(_mask_instance(dense), e)

    def test_fully_outside(self):
        e = EllipseModel(16, 16, 6, 6, 0.0)
        dense = np.zeros((32, 32), dtype=np.uint8)
        dense[28:31, 28:31] = 1
        assert not instance_touches_ellipse(_mask_instance(dense), e)

    def test_single_interior_pixel(self):
        # dense oracle: exactly the pixels whose centers satisfy the inequality
        e = EllipseModel(10, 10, 4, 4, 0.0)
        dense = np.zeros((24, 24), dtype=np.uint8)
        dense[10, 13:20] = 1  # row through the boundary; pixel x=13 center at 13.5
        inst = _mask_instance(dense)
        xs, ys = np.meshgrid(np.arange(24) + 0.5, np.arange(24) + 0.5)
        inside = e.contains(xs.ravel(), ys.ravel()).reshape(24, 24)
        n_inside = int(np.logical_and(inside.T, dense.T == 1).sum())
        assert n_inside == 1
        assert instance_touches_ellipse(inst, e)

    def test_box_only_instance(self):
        e = EllipseModel(50, 50, 20, 20, 0.0)
        inside = SimpleNamespace(mask=None, bbox=BBox(45, 45, 55, 55))
        outside = SimpleNamespace(mask=None, bbox=BBox(80, 80, 90, 90))
        assert instance_touches_ellipse(inside, e)
        assert not instance_touches_ellipse(outside, e)

    def test_boundary_point_counts_as_inside(self):
        e = EllipseModel(10, 10, 5, 5, 0.0)
        boundary = SimpleNamespace(mask=None, bbox=BBox(15, 10, 25, 12))  # corner exactly on rim
        assert instance_touches_ellipse(boundary, e)


def render_ring(truth: EllipseModel, w: int, h: int, stroke: float = 2.0) -> np.ndarray:
    """Independent ring renderer: dark smooth band centered on the boundary.

    Distance to the rim is measured radially from the center, which is exact
    along each ray and symmetric inside/outside, so the darkest pixels trace
    the planted boundary without bias.
    """
    xs, ys = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    v = truth.value(xs.ravel(), ys.ravel()).reshape(h, w)
    rho = np.hypot(xs - truth.cx, ys - truth.cy)
    with np.errstate(divide="ignore"):
        d = rho * (1.0 - 1.0 / np.sqrt(np.maximum(v, 1e-12)))
    return 255.0 - 215.0 * np.exp(-((d / stroke) ** 2))


class TestRasterizePolygons:
    def test_axis_aligned_rectangle(self):
        # centers strictly inside [2, 6] x [1, 4]: cols 2..5, rows 1..3
        m = rasterize_polygons([[2, 1, 6, 1, 6, 4, 2, 4]], 10, 8)
        dense = m.to_dense()
        want = np.zeros((8, 10), dtype=np.uint8)
        want[1:4, 2:6] = 1
        assert np.array_equal(dense, want)

    def test_triangle_area(self):
        m = rasterize_polygons([[0, 0, 40, 0, 0, 40]], 40, 40)
        # half the square, up to boundary rasterization
        assert abs(m.area() - 800) < 40

    def test_union_of_parts(self):
        left = [0.9, 0.9, 5.1, 0.9, 5.1, 5.1, 0.9, 5.1]
        right = [7.9, 0.9, 12.1, 0.9, 12.1, 5.1, 7.9, 5.1]
        m = rasterize_polygons([left, right], 16, 8)
        both = rasterize_polygons([left], 16, 8).area() + rasterize_polygons([right], 16, 8).area()
        assert m.area() == both

    def test_matches_path_oracle_on_convex_polygons(self):
        from matplotlib.path import Path

        rng = np.random.default_rng(6)
        for _ in range(40):
            n = int(rng.integers(3, 9))
            cx, cy = rng.uniform(10, 30, size=2)
            angles = np.sort(rng.uniform(0, 2 * math.pi, size=n))
            radii = rng.uniform(3, 9, size=n)
            xs = cx + radii * np.cos(angles)
            ys = cy + radii * np.sin(angles)
            poly = np.column_stack([xs, ys]).ravel().tolist()
            m = rasterize_polygons([poly], 40, 40)
            gx, gy = np.meshgrid(np.arange(40) + 0.5, np.arange(40) + 0.5)
            inside = Path(np.column_stack([xs, ys])).contains_points(
                np.column_stack([gx.ravel(), gy.ravel()])
            ).reshape(40, 40)
            assert np.array_equal(m.to_dense().astype(bool), inside)

    def test_bad_polygon_rejected(self):
        with pytest.raises(MaskShapeError):
            rasterize_polygons([[0, 0, 1, 1]], 10, 10)
        with pytest.raises(MaskShapeError):
            rasterize_polygons([[0, 0, 1, 1, 2]], 10, 10)


class TestDishEstimation:
    @pytest.mark.parametrize(
        "truth",
        [
            EllipseModel(cx=250.0, cy=260.0, a=220.0, b=205.0, theta=2.1),
            EllipseModel(cx=258.0, cy=250.0, a=230.0, b=214.0, theta=0.7),
            EllipseModel(cx=256.0, cy=256.0, a=235.0, b=235.0, theta=0.0),
        ],
    )
    def test_planted_ring_recovered(self, truth):
        img = render_ring(truth, 512, 512)
        e, source = estimate_dish_ellipse(img)
        assert source == "fitted"
        assert abs(e.cx - truth.cx) < 0.01 * truth.a
        assert abs(e.cy - truth.cy) < 0.01 * truth.a
        assert abs(e.a - truth.a) < 0.01 * truth.a
        assert abs(e.b - truth.b) < 0.01 * truth.a

    def test_blank_image_with_fallback(self):
        fb = EllipseModel(10, 10, 8, 7, 0.0)
        e, source = estimate_dish_ellipse(np.full((64, 64), 128.0), fallback=fb)
        assert source == "fallback"
        assert e == fb

    def test_blank_image_without_fallback(self):
        e, source = estimate_dish_ellipse(np.zeros((100, 60)))
        assert source == "fallback"
        assert e == inscribed_ellipse(60, 100)
        assert e.cx == 30 and e.cy == 50
        assert e.a == pytest.approx(0.95 * 50)
        assert e.b == pytest.approx(0.95 * 30)
