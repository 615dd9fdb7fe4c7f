"""Boxes, run-length masks, IoU, and the Petri-dish ellipse.

Masks are stored run-length encoded in column-major scan order with the
first run counting background pixels (possibly zero). Pixel (col, row)
covers the unit square [col, col+1) x [row, row+1); its center is at
(col + 0.5, row + 0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EllipseFitError, MaskShapeError


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in continuous pixel coordinates, min-corner inclusive."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise MaskShapeError(f"degenerate bbox {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def area(self) -> float:
        return self.width * self.height

    def corners(self) -> list[tuple[float, float]]:
        return [
            (self.x_min, self.y_min),
            (self.x_max, self.y_min),
            (self.x_max, self.y_max),
            (self.x_min, self.y_max),
        ]

    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def to_xywh(self) -> list[float]:
        return [self.x_min, self.y_min, self.width, self.height]

    @classmethod
    def from_xywh(cls, xywh) -> "BBox":
        x, y, w, h = xywh
        return cls(x, y, x + w, y + h)


def iou_bbox(p: BBox, q: BBox) -> float:
    """Intersection-over-union of two boxes."""
    ix = min(p.x_max, q.x_max) - max(p.x_min, q.x_min)
    iy = min(p.y_max, q.y_max) - max(p.y_min, q.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = p.area() + q.area() - inter
    return inter / union


@dataclass(frozen=True)
class RleMask:
    """Binary mask as alternating background/foreground run lengths.

    ``counts`` scans the image column by column (top to bottom within each
    column) and always starts with a background run, which may be 0.
    """

    width: int
    height: int
    counts: tuple[int, ...]

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise MaskShapeError(f"bad mask dimensions {self.width}x{self.height}")
        if any(c < 0 for c in self.counts):
            raise MaskShapeError("negative run length")
        if sum(self.counts) != self.width * self.height:
            raise MaskShapeError(
                f"run lengths sum to {sum(self.counts)}, expected {self.width * self.height}"
            )

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "RleMask":
        """Encode a (height, width) boolean/0-1 array."""
        arr = np.asarray(dense)
        if arr.ndim != 2:
            raise MaskShapeError("dense mask must be 2-D")
        h, w = arr.shape
        flat = (arr != 0).flatten(order="F").astype(np.int8)
        if flat.size == 0:
            raise MaskShapeError("empty mask")
        change = np.flatnonzero(np.diff(flat)) + 1
        bounds = np.concatenate([[0], change, [flat.size]])
        runs = np.diff(bounds).tolist()
        if flat[0] == 1:
            runs = [0] + runs
        return cls(width=w, height=h, counts=tuple(int(r) for r in runs))

    def to_dense(self) -> np.ndarray:
        """Decode to a (height, width) uint8 array."""
        vals = np.zeros(len(self.counts), dtype=np.uint8)
        vals[1::2] = 1
        flat = np.repeat(vals, np.asarray(self.counts, dtype=np.int64))
        return flat.reshape((self.height, self.width), order="F")

    def foreground_intervals(self) -> np.ndarray:
        """(n, 2) array of [start, end) runs in column-major flat coordinates."""
        ends = np.cumsum(np.asarray(self.counts, dtype=np.int64))
        starts = ends - np.asarray(self.counts, dtype=np.int64)
        return np.column_stack([starts[1::2], ends[1::2]])

    def area(self) -> int:
        return int(sum(self.counts[1::2]))

    def foreground_pixels(self) -> np.ndarray:
        """(n, 2) array of (col, row) indices of foreground pixels."""
        iv = self.foreground_intervals()
        if len(iv) == 0:
            return np.zeros((0, 2), dtype=np.int64)
        idx = np.concatenate([np.arange(s, e) for s, e in iv])
        return np.column_stack([idx // self.height, idx % self.height])

    def tight_bbox(self) -> BBox:
        """Smallest box covering all foreground pixels."""
        iv = self.foreground_intervals()
        if len(iv) == 0:
            raise MaskShapeError("mask has no foreground")
        starts, ends = iv[:, 0], iv[:, 1] - 1
        cols = np.concatenate([starts // self.height, ends // self.height])
        rows = np.concatenate([starts % self.height, ends % self.height])
        # runs can wrap across column boundaries; a wrapped run covers whole rows
        wraps = (starts // self.height) != (ends // self.height)
        y_min, y_max = int(rows.min()), int(rows.max())
        if wraps.any():
            y_min, y_max = 0, self.height - 1
        return BBox(float(cols.min()), float(y_min), float(cols.max() + 1), float(y_max + 1))


def mask_area(m: RleMask) -> int:
    """Foreground pixel count."""
    return m.area()


def iou_mask(p: RleMask, q: RleMask) -> float:
    """Foreground IoU computed on the run lists, no dense decode."""
    if (p.width, p.height) != (q.width, q.height):
        raise MaskShapeError(
            f"mask dimension mismatch: {p.width}x{p.height} vs {q.width}x{q.height}"
        )
    ap, aq = p.area(), q.area()
    if ap == 0 or aq == 0:
        return 0.0
    inter = _interval_intersection(p.foreground_intervals(), q.foreground_intervals())
    union = ap + aq - inter
    return inter / union


def _interval_intersection(a: np.ndarray, b: np.ndarray) -> int:
    """Total overlap length of two sorted disjoint [start, end) interval sets."""
    points = np.concatenate([a[:, 0], a[:, 1], b[:, 0], b[:, 1]])
    deltas = np.concatenate(
        [np.ones(len(a)), -np.ones(len(a)), np.ones(len(b)), -np.ones(len(b))]
    )
    order = np.argsort(points, kind="stable")
    points = points[order]
    cover = np.cumsum(deltas[order])
    both = cover[:-1] >= 2  # covered by at least one run of each set
    return int(np.sum((points[1:] - points[:-1])[both]))


@dataclass(frozen=True)
class EllipseModel:
    """Ellipse in center / semi-axes / rotation form; a >= b > 0, theta in [0, pi)."""

    cx: float
    cy: float
    a: float
    b: float
    theta: float

    def __post_init__(self):
        if not (self.a >= self.b > 0):
            raise EllipseFitError(f"semi-axes must satisfy a >= b > 0, got a={self.a}, b={self.b}")
        if not (0.0 <= self.theta < math.pi):
            raise EllipseFitError(f"theta must lie in [0, pi), got {self.theta}")

    def area(self) -> float:
        return math.pi * self.a * self.b

    def value(self, xs, ys) -> np.ndarray:
        """Interior inequality value: <= 1 on or inside the ellipse."""
        dx = np.asarray(xs, dtype=float) - self.cx
        dy = np.asarray(ys, dtype=float) - self.cy
        c, s = math.cos(self.theta), math.sin(self.theta)
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (u / self.a) ** 2 + (v / self.b) ** 2

    def contains(self, xs, ys) -> np.ndarray:
        return self.value(xs, ys) <= 1.0

    def boundary_points(self, n: int = 64, phase: float = 0.0) -> np.ndarray:
        """(n, 2) points sampled along the boundary."""
        phi = np.linspace(0, 2 * math.pi, n, endpoint=False) + phase
        c, s = math.cos(self.theta), math.sin(self.theta)
        x = self.cx + self.a * np.cos(phi) * c - self.b * np.sin(phi) * s
        y = self.cy + self.a * np.cos(phi) * s + self.b * np.sin(phi) * c
        return np.column_stack([x, y])

    def to_dict(self) -> dict:
        return {"cx": self.cx, "cy": self.cy, "a": self.a, "b": self.b, "theta": self.theta}

    @classmethod
    def from_dict(cls, d: dict) -> "EllipseModel":
        return cls(float(d["cx"]), float(d["cy"]), float(d["a"]), float(d["b"]), float(d["theta"]))


def shrink_ellipse(e: EllipseModel, factor: float) -> EllipseModel:
    """Scale both semi-axes by ``factor`` about the same center and rotation."""
    if not (0 < factor <= 1):
        raise EllipseFitError(f"shrink factor must be in (0, 1], got {factor}")
    return EllipseModel(e.cx, e.cy, e.a * factor, e.b * factor, e.theta)


def fit_ellipse(points) -> EllipseModel:
    """Direct least-squares conic fit constrained to an ellipse.

    Numerically stable variant of the constrained algebraic fit: the design
    matrix is split into quadratic and linear blocks and the data are
    normalised before solving, so large pixel coordinates stay well
    conditioned. Needs at least 6 points in non-degenerate position.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise EllipseFitError("points must be an (n, 2) array")
    if len(pts) < 6:
        raise EllipseFitError(f"need at least 6 points, got {len(pts)}")
    x, y = pts[:, 0], pts[:, 1]
    mx, my = x.mean(), y.mean()
    scale = math.sqrt(((x - mx) ** 2 + (y - my) ** 2).mean())
    if scale <= 0 or not np.isfinite(scale):
        raise EllipseFitError("degenerate points (all coincident)")
    xn, yn = (x - mx) / scale, (y - my) / scale

    d1 = np.column_stack([xn**2, xn * yn, yn**2])
    d2 = np.column_stack([xn, yn, np.ones_like(xn)])
    s1 = d1.T @ d1
    s2 = d1.T @ d2
    s3 = d2.T @ d2
    try:
        t = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError as exc:
        raise EllipseFitError("degenerate point configuration") from exc
    m = s1 + s2 @ t
    # premultiply by inverse of the constraint matrix [[0,0,2],[0,-1,0],[2,0,0]]
    m = np.vstack([m[2, :] / 2.0, -m[1, :], m[0, :] / 2.0])
    w, v = np.linalg.eig(m)
    v = np.real(v)
    cond = 4.0 * v[0, :] * v[2, :] - v[1, :] ** 2
    idx = np.flatnonzero(cond > 0)
    if len(idx) == 0:
        raise EllipseFitError("no elliptical solution (points may be collinear)")
    a1 = v[:, idx[0]]
    coeffs = np.concatenate([a1, t @ a1])  # A,B,C,D,E,F in normalised frame
    ca, cb, cc, cd, ce, cf = coeffs
    # undo the normalisation u = (x - mx)/scale, v = (y - my)/scale
    A, B, C = ca, cb, cc
    D = -2 * ca * mx - cb * my + scale * cd
    E = -cb * mx - 2 * cc * my + scale * ce
    F = (
        ca * mx**2
        + cb * mx * my
        + cc * my**2
        - scale * cd * mx
        - scale * ce * my
        + scale**2 * cf
    )
    return conic_to_ellipse(A, B, C, D, E, F)


def conic_to_ellipse(A, B, C, D, E, F) -> EllipseModel:
    """Convert A x^2 + B xy + C y^2 + D x + E y + F = 0 to geometric form."""
    disc = 4 * A * C - B * B
    if disc <= 0:
        raise EllipseFitError("conic is not an ellipse")
    try:
        cx, cy = np.linalg.solve(np.array([[2 * A, B], [B, 2 * C]]), [-D, -E])
    except np.linalg.LinAlgError as exc:
        raise EllipseFitError("conic has no finite center") from exc
    k = -((D * cx + E * cy) / 2.0 + F)
    if k == 0:
        raise EllipseFitError("degenerate (point) ellipse")
    m2 = np.array([[A, B / 2.0], [B / 2.0, C]]) / k
    evals, evecs = np.linalg.eigh(m2)
    if evals.min() <= 0:
        raise EllipseFitError("conic is not a real ellipse")
    axes = 1.0 / np.sqrt(evals)  # eigh sorts ascending, so axes descending
    a, b = float(axes[0]), float(axes[1])
    major = evecs[:, 0]  # eigenvector of the smaller eigenvalue = major axis
    theta = math.atan2(major[1], major[0]) % math.pi
    if a < b:  # pragma: no cover - eigh ordering makes this unreachable
        a, b = b, a
        theta = (theta + math.pi / 2) % math.pi
    return EllipseModel(float(cx), float(cy), a, b, theta)


def inscribed_ellipse(width: int, height: int, margin: float = 0.95) -> EllipseModel:
    """Centered axis-aligned ellipse at ``margin`` of the image half-extents."""
    ax = margin * width / 2.0
    ay = margin * height / 2.0
    if ax >= ay:
        return EllipseModel(width / 2.0, height / 2.0, ax, ay, 0.0)
    return EllipseModel(width / 2.0, height / 2.0, ay, ax, math.pi / 2)


def estimate_dish_ellipse(image, fallback: EllipseModel | None = None):
    """Locate the dish boundary in a grayscale image.

    Thresholds gradient magnitude at its 99th percentile, keeps the largest
    8-connected edge component and fits an ellipse through it. Falls back to
    ``fallback`` (or the inscribed centered ellipse at 95% of the image
    half-extents) whenever the fit fails or the result spans less than half
    the image diagonal.

    Returns (ellipse, source) with source "fitted" or "fallback".
    """
    gray = np.asarray(image, dtype=float)
    if gray.ndim == 3:
        gray = gray.mean(axis=2)
    if gray.ndim != 2:
        raise MaskShapeError("image must be 2-D grayscale or 3-D color")
    h, w = gray.shape
    fitted = _fit_dish_edges(gray)
    if fitted is not None:
        return fitted, "fitted"
    if fallback is not None:
        return fallback, "fallback"
    return inscribed_ellipse(w, h), "fallback"


def _fit_dish_edges(gray: np.ndarray) -> EllipseModel | None:
    h, w = gray.shape
    smooth = ndimage.gaussian_filter(gray, sigma=1.5)
    gy, gx = np.gradient(smooth)
    mag = np.hypot(gx, gy)
    if mag.max() <= 1e-9:
        return None
    thr = np.percentile(mag, 99.0)
    if thr <= 1e-9:
        return None
    edges = mag >= thr
    # bridge small rasterisation gaps so the rim labels as one component
    merged = ndimage.binary_dilation(edges, structure=np.ones((3, 3), dtype=bool), iterations=2)
    labels, n = ndimage.label(merged, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return None
    sizes = ndimage.sum(edges, labels, index=np.arange(1, n + 1))
    keep = (labels == int(np.argmax(sizes)) + 1) & edges
    ys, xs = np.nonzero(keep)
    if len(xs) < 6:
        return None
    try:
        e = fit_ellipse(np.column_stack([xs + 0.5, ys + 0.5]))
    except EllipseFitError:
        return None
    diag = math.hypot(w, h)
    plausible = (
        2 * e.a >= 0.5 * diag
        and e.a <= diag
        and 0 <= e.cx <= w
        and 0 <= e.cy <= h
        and e.b / e.a >= 0.2
    )
    return e if plausible else None


def rasterize_polygons(polygons, width: int, height: int) -> RleMask:
    """Fill polygons into a full-image mask by even-odd pixel-center inclusion.

    ``polygons`` is a list of flat [x0, y0, x1, y1, ...] vertex lists in pixel
    coordinates. A pixel belongs to the mask when its center lies inside an
    odd number of polygon boundaries (union of even-odd fills).
    """
    if width <= 0 or height <= 0:
        raise MaskShapeError(f"bad mask dimensions {width}x{height}")
    dense = np.zeros((height, width), dtype=np.uint8)
    centers_x = np.arange(width) + 0.5
    for poly in polygons:
        pts = np.asarray(poly, dtype=float)
        if pts.ndim != 1 or pts.size < 6 or pts.size % 2 != 0:
            raise MaskShapeError("polygon needs a flat, even-length list of >= 3 vertices")
        xs = pts[0::2]
        ys = pts[1::2]
        x2 = np.roll(xs, -1)
        y2 = np.roll(ys, -1)
        y_lo = max(0, int(np.floor(ys.min() - 0.5)))
        y_hi = min(height, int(np.ceil(ys.max() + 0.5)))
        for row in range(y_lo, y_hi):
            yc = row + 0.5
            crosses = (ys <= yc) != (y2 <= yc)
            if not crosses.any():
                continue
            t = (yc - ys[crosses]) / (y2[crosses] - ys[crosses])
            cx = xs[crosses] + t * (x2[crosses] - xs[crosses])
            inside = (cx[None, :] > centers_x[:, None]).sum(axis=1) % 2 == 1
            dense[row, inside] = 1
    return RleMask.from_dense(dense)


def instance_touches_ellipse(inst, e: EllipseModel) -> bool:
    """True iff the instance reaches inside or onto the ellipse.

    Tested on foreground pixel centers when a mask is present, otherwise on
    the bbox corners and center. Boundary-exact points count as inside.
    """
    if getattr(inst, "mask", None) is not None:
        pix = inst.mask.foreground_pixels()
        if len(pix) == 0:
            return False
        return bool(e.contains(pix[:, 0] + 0.5, pix[:, 1] + 0.5).any())
    box = inst.bbox
    pts = box.corners() + [box.center()]
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    return bool(e.contains(xs, ys).any())
