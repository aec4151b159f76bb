"""Ellipse and box geometry: bounding boxes, exact rotated-box IoU, equivalent diameters.

Coordinates are continuous pixel units with x to the right and y down; pixel
``(row, col)`` covers ``[col, col + 1) x [row, row + 1)``. Angles are measured
from the +x axis towards +y and have period pi for every shape in this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

CLIP_EPS = 1e-9


def normalize_angle(angle: float) -> float:
    """Wrap an unoriented angle into ``[0, pi)``."""
    a = math.fmod(angle, math.pi)
    if a < 0.0:
        a += math.pi
    if a >= math.pi:
        a = 0.0
    return a


class EmptyComponentError(ValueError):
    """Raised when a diameter is requested for a component with zero area."""


@dataclass(frozen=True)
class EllipseShape:
    center_x: float
    center_y: float
    semi_major: float
    semi_minor: float
    angle: float = 0.0
    gray_level: float = 0.0

    def __post_init__(self):
        a, b, theta = float(self.semi_major), float(self.semi_minor), float(self.angle)
        if not (math.isfinite(self.center_x) and math.isfinite(self.center_y)):
            raise ValueError("ellipse center must be finite")
        if b <= 0 or a <= 0:
            raise ValueError(f"semi-axes must be positive, got a={a}, b={b}")
        if a < b:
            a, b, theta = b, a, theta + math.pi / 2
        theta = 0.0 if a == b else normalize_angle(theta)
        if not 0.0 <= self.gray_level <= 1.0:
            raise ValueError(f"gray_level must lie in [0, 1], got {self.gray_level}")
        object.__setattr__(self, "semi_major", a)
        object.__setattr__(self, "semi_minor", b)
        object.__setattr__(self, "angle", theta)

    @property
    def area(self) -> float:
        return math.pi * self.semi_major * self.semi_minor

    def contains(self, x, y):
        """Vectorised point-in-ellipse test (boundary counts as inside)."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        dx = np.asarray(x, dtype=float) - self.center_x
        dy = np.asarray(y, dtype=float) - self.center_y
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (u / self.semi_major) ** 2 + (v / self.semi_minor) ** 2 <= 1.0


@dataclass(frozen=True)
class DiskShape:
    """Calibration droplet. Diameter and focal offset are physical (um)."""

    center_x: float
    center_y: float
    diameter: float
    focal_offset: float = 0.0

    def __post_init__(self):
        if not self.diameter > 0:
            raise ValueError(f"disk diameter must be positive, got {self.diameter}")
        if not (math.isfinite(self.center_x) and math.isfinite(self.center_y)):
            raise ValueError("disk center must be finite")

    def to_ellipse(self, scale: float) -> EllipseShape:
        r = 0.5 * self.diameter / scale
        return EllipseShape(self.center_x, self.center_y, r, r, 0.0, 0.0)


@dataclass(frozen=True)
class AxisAlignedBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"degenerate box {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def to_obb(self) -> "OrientedBox":
        return OrientedBox(
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
            self.width,
            self.height,
            0.0,
        )

    def bounds(self) -> tuple[float, float, float, float]:
        return self.x_min, self.y_min, self.x_max, self.y_max


@dataclass(frozen=True)
class OrientedBox:
    center_x: float
    center_y: float
    width: float
    height: float
    angle: float = 0.0

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"box sides must be positive, got {self.width}x{self.height}")
        object.__setattr__(self, "angle", normalize_angle(float(self.angle)))

    @property
    def area(self) -> float:
        return self.width * self.height

    def corners(self) -> np.ndarray:
        """(4, 2) corner array, counterclockwise (positive shoelace area)."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        hw, hh = 0.5 * self.width, 0.5 * self.height
        local = ((-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh))
        return np.array(
            [(self.center_x + u * c - v * s, self.center_y + u * s + v * c) for u, v in local]
        )

    def to_obb(self) -> "OrientedBox":
        return self

    def bounds(self) -> tuple[float, float, float, float]:
        pts = self.corners()
        return pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max()


def aabb_of_ellipse(e: EllipseShape) -> AxisAlignedBox:
    c, s = math.cos(e.angle), math.sin(e.angle)
    a, b = e.semi_major, e.semi_minor
    hx = math.sqrt(a * a * c * c + b * b * s * s)
    hy = math.sqrt(a * a * s * s + b * b * c * c)
    return AxisAlignedBox(e.center_x - hx, e.center_y - hy, e.center_x + hx, e.center_y + hy)


def obb_of_ellipse(e: EllipseShape) -> OrientedBox:
    return OrientedBox(e.center_x, e.center_y, 2 * e.semi_major, 2 * e.semi_minor, e.angle)


def iou_aabb(p: AxisAlignedBox, q: AxisAlignedBox) -> float:
    iw = min(p.x_max, q.x_max) - max(p.x_min, q.x_min)
    ih = min(p.y_max, q.y_max) - max(p.y_min, q.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (p.area + q.area - inter)


def polygon_area(pts: np.ndarray) -> float:
    """Signed shoelace area; positive for counterclockwise vertex order."""
    if len(pts) < 3:
        return 0.0
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject: np.ndarray, clipper: np.ndarray, eps: float = CLIP_EPS) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex polygon by a CCW convex polygon."""
    out = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        length = math.hypot(ex, ey)
        if length == 0.0:
            continue
        ex, ey = ex / length, ey / length
        inp, out = out, []
        # signed distance to the edge line; > 0 is inside for CCW order
        sides = [ex * (py - ay) - ey * (px - ax) for px, py in inp]
        m = len(inp)
        for j in range(m):
            cur, nxt = inp[j], inp[(j + 1) % m]
            sc, sn = sides[j], sides[(j + 1) % m]
            cur_in, nxt_in = sc >= -eps, sn >= -eps
            if cur_in:
                out.append(cur)
            if cur_in != nxt_in and abs(sc - sn) > 0:
                t = sc / (sc - sn)
                out.append((cur[0] + t * (nxt[0] - cur[0]), cur[1] + t * (nxt[1] - cur[1])))
    return np.array(out, dtype=float).reshape(-1, 2)


def intersection_area_obb(p: OrientedBox, q: OrientedBox) -> float:
    poly = clip_convex(p.corners(), q.corners())
    area = polygon_area(poly)
    return min(max(area, 0.0), p.area, q.area)


def _same_box(p: OrientedBox, q: OrientedBox) -> bool:
    return (p.center_x, p.center_y, p.width, p.height, p.angle) == (
        q.center_x,
        q.center_y,
        q.width,
        q.height,
        q.angle,
    )


def iou_obb(p, q) -> float:
    """Exact IoU of two rectangles; axis-aligned boxes are promoted to angle 0."""
    p, q = p.to_obb(), q.to_obb()
    if _same_box(p, q):
        return 1.0
    px0, py0, px1, py1 = p.bounds()
    qx0, qy0, qx1, qy1 = q.bounds()
    if px1 <= qx0 or qx1 <= px0 or py1 <= qy0 or qy1 <= py0:
        return 0.0
    inter = intersection_area_obb(p, q)
    if inter <= 0.0:
        return 0.0
    return min(1.0, inter / (p.area + q.area - inter))


def box_iou(p, q) -> float:
    """IoU for any pair of boxes; uses the axis-aligned fast path when both allow it."""
    if isinstance(p, AxisAlignedBox) and isinstance(q, AxisAlignedBox):
        return iou_aabb(p, q)
    return iou_obb(p, q)


def equivalent_diameter(area: float) -> float:
    if area < 0:
        raise ValueError(f"area must be non-negative, got {area}")
    if area == 0:
        raise EmptyComponentError("empty component has no equivalent diameter")
    return 2.0 * math.sqrt(area / math.pi)
