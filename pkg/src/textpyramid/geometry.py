"""Polygon primitives and the vector/raster operations built on them.

Coordinates are (x, y) in pixels, x to the right and y down.  Polygons are
normalized to counter-clockwise order in the shoelace sense (positive signed
area under the standard formula).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import shapely.geometry

__all__ = [
    "Polygon",
    "RotatedRect",
    "AxisRect",
    "polygon_area",
    "axis_aligned_bbox",
    "convex_hull",
    "min_area_rect",
    "min_area_rect_of_points",
    "polygon_iou",
    "polygon_nms",
    "rasterize",
]


def _signed_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _on_segment(a, b, p) -> bool:
    return (
        min(a[0], b[0]) <= p[0] <= max(a[0], b[0])
        and min(a[1], b[1]) <= p[1] <= max(a[1], b[1])
    )


def _segments_touch(a, b, c, d) -> bool:
    """True when segment ab intersects or touches segment cd."""
    d1 = _orient(c, d, a)
    d2 = _orient(c, d, b)
    d3 = _orient(a, b, c)
    d4 = _orient(a, b, d)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 != 0 and d2 != 0:
        return True
    if d1 == 0 and _on_segment(c, d, a):
        return True
    if d2 == 0 and _on_segment(c, d, b):
        return True
    if d3 == 0 and _on_segment(a, b, c):
        return True
    if d4 == 0 and _on_segment(a, b, d):
        return True
    return False


def _self_intersects(pts: np.ndarray) -> bool:
    n = len(pts)
    for i in range(n):
        a, b = pts[i], pts[(i + 1) % n]
        for j in range(i + 1, n):
            # skip the edge itself and the two edges sharing a vertex with it
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            c, d = pts[j], pts[(j + 1) % n]
            if _segments_touch(a, b, c, d):
                return True
    return False


class Polygon:
    """Simple polygon with >= 3 vertices and strictly positive area.

    The constructor normalizes vertex order to counter-clockwise and rejects
    degenerate (zero-area, repeated-vertex, back-tracking) or
    self-intersecting input.
    """

    __slots__ = ("_vertices", "_area")

    def __init__(self, vertices) -> None:
        pts = np.array(vertices, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
            raise ValueError(
                f"polygon needs an (N, 2) vertex array with N >= 3, got shape {pts.shape}"
            )
        if not np.all(np.isfinite(pts)):
            raise ValueError("polygon vertices must be finite")
        if np.any(np.all(pts == np.roll(pts, -1, axis=0), axis=1)):
            raise ValueError("polygon has repeated consecutive vertices")
        signed = _signed_area(pts)
        if abs(signed) < 1e-9:
            raise ValueError("degenerate polygon: area is (near) zero")
        if signed < 0:
            pts = pts[::-1].copy()
        for i in range(len(pts)):
            a, b, c = pts[i - 1], pts[i], pts[(i + 1) % len(pts)]
            ab, bc = b - a, c - b
            if _orient(a, b, c) == 0 and float(np.dot(ab, bc)) < 0:
                raise ValueError("polygon boundary backtracks over itself")
        if _self_intersects(pts):
            raise ValueError("polygon is self-intersecting")
        pts.setflags(write=False)
        self._vertices = pts
        self._area = abs(signed)

    @property
    def vertices(self) -> np.ndarray:
        return self._vertices

    @property
    def area(self) -> float:
        return self._area

    def __len__(self) -> int:
        return len(self._vertices)

    def __repr__(self) -> str:
        return f"Polygon({self._vertices.tolist()!r})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Polygon) and np.array_equal(
            self._vertices, other._vertices
        )

    def transformed(self, fn) -> "Polygon":
        """New polygon with ``fn`` applied to the (N, 2) vertex array."""
        return Polygon(fn(np.asarray(self._vertices).copy()))


@dataclass(frozen=True)
class AxisRect:
    """Axis-aligned rectangle, corners (x_min, y_min) to (x_max, y_max)."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(
                f"empty axis rect: ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def to_polygon(self) -> Polygon:
        return Polygon(
            [
                (self.x_min, self.y_min),
                (self.x_max, self.y_min),
                (self.x_max, self.y_max),
                (self.x_min, self.y_max),
            ]
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max])


@dataclass(frozen=True)
class RotatedRect:
    """Oriented rectangle: center, width >= height, angle in [-90, 90) degrees.

    The angle is measured from the +x axis to the width direction.  The
    constructor normalizes width/height order and wraps the angle.
    """

    center: tuple[float, float]
    width: float
    height: float
    angle: float

    def __post_init__(self) -> None:
        w, h, a = float(self.width), float(self.height), float(self.angle)
        if w < h:
            w, h = h, w
            a += 90.0
        a = (a + 90.0) % 180.0 - 90.0
        if not (w >= h > 0):
            raise ValueError(f"rotated rect needs width >= height > 0, got {w} x {h}")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "width", w)
        object.__setattr__(self, "height", h)
        object.__setattr__(self, "angle", a)

    @property
    def area(self) -> float:
        return self.width * self.height

    def to_polygon(self) -> Polygon:
        t = np.deg2rad(self.angle)
        c, s = np.cos(t), np.sin(t)
        hw, hh = self.width / 2.0, self.height / 2.0
        local = np.array([(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)])
        rot = local @ np.array([[c, s], [-s, c]])
        return Polygon(rot + np.asarray(self.center))


def polygon_area(p: Polygon) -> float:
    """Shoelace area in square pixels; orientation independent."""
    return p.area


def axis_aligned_bbox(p: Polygon) -> AxisRect:
    """Minimum bounding horizontal rectangle of the polygon's vertices."""
    v = p.vertices
    return AxisRect(
        float(v[:, 0].min()), float(v[:, 1].min()),
        float(v[:, 0].max()), float(v[:, 1].max()),
    )


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Convex hull of a point set (monotone chain), counter-clockwise."""
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    if len(pts) < 3:
        return pts
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def half(seq):
        out: list[np.ndarray] = []
        for q in seq:
            while len(out) >= 2 and _orient(out[-2], out[-1], q) <= 0:
                out.pop()
            out.append(q)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def min_area_rect_of_points(points: np.ndarray) -> RotatedRect:
    """Smallest-area oriented rectangle enclosing a point set.

    Rotating calipers over the convex hull: the optimal rectangle has one
    side collinear with a hull edge, so each hull edge direction is tried
    and the first minimum found is kept.
    """
    hull = convex_hull(points)
    if len(hull) < 3:
        raise ValueError("point set is collinear; no enclosing rectangle with area > 0")
    edges = np.roll(hull, -1, axis=0) - hull
    best = None
    for ex, ey in edges:
        norm = float(np.hypot(ex, ey))
        if norm == 0.0:
            continue
        c, s = ex / norm, ey / norm
        u = hull[:, 0] * c + hull[:, 1] * s
        v = -hull[:, 0] * s + hull[:, 1] * c
        u0, u1 = float(u.min()), float(u.max())
        v0, v1 = float(v.min()), float(v.max())
        area = (u1 - u0) * (v1 - v0)
        if best is None or area < best[0]:
            best = (area, c, s, u0, u1, v0, v1)
    assert best is not None
    _, c, s, u0, u1, v0, v1 = best
    cu, cv = (u0 + u1) / 2.0, (v0 + v1) / 2.0
    center = (cu * c - cv * s, cu * s + cv * c)
    return RotatedRect(center, u1 - u0, v1 - v0, float(np.degrees(np.arctan2(s, c))))


def min_area_rect(p: Polygon) -> RotatedRect:
    """Smallest-area enclosing rectangle of a polygon over all orientations."""
    return min_area_rect_of_points(p.vertices)


def polygon_iou(a: Polygon, b: Polygon) -> float:
    """Intersection-over-union of two polygons via exact polygon clipping."""
    if np.array_equal(a.vertices, b.vertices):
        return 1.0
    # clipping is not bit-symmetric in its operand order, so fix the order
    # by a deterministic key to make iou(a, b) == iou(b, a) exact
    if a.vertices.tobytes() > b.vertices.tobytes():
        a, b = b, a
    sa = shapely.geometry.Polygon(a.vertices)
    sb = shapely.geometry.Polygon(b.vertices)
    inter = sa.intersection(sb).area
    if inter <= 0.0:
        return 0.0
    union = sa.area + sb.area - inter
    return float(inter / union)


def polygon_nms(
    instances: list[tuple[Polygon, float]], iou_threshold: float
) -> list[int]:
    """Greedy non-maximum suppression over scored polygons.

    Candidates are visited in descending score (ties broken by lower input
    index); a candidate is dropped iff its IoU with an already-kept polygon
    exceeds the threshold.  Returns kept indices in visiting order.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    for _, score in instances:
        if not np.isfinite(score):
            raise ValueError("polygon_nms requires finite scores")
    order = sorted(range(len(instances)), key=lambda i: (-instances[i][1], i))
    kept: list[int] = []
    for i in order:
        poly = instances[i][0]
        if all(polygon_iou(poly, instances[k][0]) <= iou_threshold for k in kept):
            kept.append(i)
    return kept


def rasterize(p: Polygon, height: int, width: int) -> np.ndarray:
    """Binary mask: pixel (i, j) is set iff its center (j+0.5, i+0.5) lies
    inside the polygon under the even-odd rule.  Pixels outside the frame
    are simply not part of the mask.
    """
    if height < 1 or width < 1:
        raise ValueError(f"mask dimensions must be >= 1, got {height} x {width}")
    ys = np.arange(height, dtype=np.float64) + 0.5
    xs = np.arange(width, dtype=np.float64) + 0.5
    inside = np.zeros((height, width), dtype=bool)
    v = p.vertices
    x1, y1 = v[:, 0], v[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    for e in range(len(v)):
        crosses = (y1[e] > ys) != (y2[e] > ys)
        if not crosses.any():
            continue
        t = (ys[crosses] - y1[e]) / (y2[e] - y1[e])
        xint = x1[e] + t * (x2[e] - x1[e])
        inside[crosses] ^= xs[None, :] < xint[:, None]
    return inside
