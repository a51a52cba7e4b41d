"""Oriented-rectangle geometry kernel.

Boxes are canonical oriented rectangles: center (x, y), extents w >= h > 0
with w along the long axis, and theta in [0, pi) measured from the x-axis to
the long axis. Intersection areas are exact, via half-plane clipping of one
corner quad against the other and the shoelace formula.

All functions are pure and thread-safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ContractError, InvalidGeometryError

_TWO_PI = 2.0 * math.pi
_HALF_PI = 0.5 * math.pi

# Edge shorter than this (in px) makes a corner quad degenerate.
MIN_EDGE_LENGTH = 1e-6


@dataclass(frozen=True)
class OBB:
    """Canonical oriented bounding box. Build via canonicalize()."""

    x: float
    y: float
    w: float
    h: float
    theta: float

    @property
    def area(self) -> float:
        return self.w * self.h


# A corner quad is a tuple of four (x, y) vertices in CCW order.
CornerQuad = tuple


def reduce_mod_pi(theta: float) -> float:
    """Fold an angle into the orientation range [0, pi)."""
    t = math.fmod(theta, math.pi)
    if t < 0.0:
        t += math.pi
    if t >= math.pi:  # fp guard: fmod of a tiny negative can round up to pi
        t = 0.0
    return t


def canonicalize(x: float, y: float, w: float, h: float, theta: float) -> OBB:
    """Build a canonical OBB, swapping extents so that w >= h.

    Swapping rotates theta by pi/2; theta is then reduced into [0, pi).
    Exact squares get theta reduced into [0, pi/2) so the representation
    stays unique.

    Raises:
        InvalidGeometryError: non-finite input or non-positive extent.
    """
    if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(theta)):
        raise InvalidGeometryError(f"non-finite OBB parameters ({x}, {y}, theta={theta})")
    if not (math.isfinite(w) and math.isfinite(h)) or w <= 0.0 or h <= 0.0:
        raise InvalidGeometryError(f"extents must be positive and finite, got w={w}, h={h}")
    if w < h:
        w, h = h, w
        theta += _HALF_PI
    theta = reduce_mod_pi(theta)
    if w == h and theta >= _HALF_PI:
        theta -= _HALF_PI
    return OBB(x, y, w, h, theta)


def obb_to_corners(obb: OBB) -> CornerQuad:
    """Return the four corners, CCW, starting at the local (-w/2, -h/2) one."""
    c = math.cos(obb.theta)
    s = math.sin(obb.theta)
    hw = 0.5 * obb.w
    hh = 0.5 * obb.h
    wx, wy = hw * c, hw * s
    hx, hy = -hh * s, hh * c
    x, y = obb.x, obb.y
    return (
        (x - wx - hx, y - wy - hy),
        (x + wx - hx, y + wy - hy),
        (x + wx + hx, y + wy + hy),
        (x - wx + hx, y - wy + hy),
    )


def _signed_area(quad) -> float:
    total = 0.0
    n = len(quad)
    for i in range(n):
        x0, y0 = quad[i]
        x1, y1 = quad[(i + 1) % n]
        total += x0 * y1 - x1 * y0
    return 0.5 * total


def _mean_direction(d1: float, d2: float) -> float:
    """Average two undirected edge directions (each in [0, pi)), mod pi."""
    return reduce_mod_pi(d1 + 0.5 * relative_angle(d2, d1))


def corners_to_obb(quad) -> OBB:
    """Fit a canonical OBB to four corners of a possibly imperfect rectangle.

    Center is the corner mean; each extent is the mean length of a pair of
    opposite edges; theta is the averaged direction of the longer edge pair.
    Vertex order may be CW or CCW but must trace the perimeter.

    Raises:
        InvalidGeometryError: nonfinite corner or edge shorter than 1e-6 px.
    """
    if len(quad) != 4:
        raise InvalidGeometryError(f"corner quad needs 4 vertices, got {len(quad)}")
    pts = [(float(px), float(py)) for px, py in quad]
    for px, py in pts:
        if not (math.isfinite(px) and math.isfinite(py)):
            raise InvalidGeometryError("non-finite corner coordinate")
    if _signed_area(pts) < 0.0:
        pts.reverse()

    cx = (pts[0][0] + pts[1][0] + pts[2][0] + pts[3][0]) / 4.0
    cy = (pts[0][1] + pts[1][1] + pts[2][1] + pts[3][1]) / 4.0

    edges = []
    for i in range(4):
        ex = pts[(i + 1) % 4][0] - pts[i][0]
        ey = pts[(i + 1) % 4][1] - pts[i][1]
        length = math.hypot(ex, ey)
        if length < MIN_EDGE_LENGTH:
            raise InvalidGeometryError(f"degenerate quad: edge {i} has length {length:.3g}")
        edges.append((ex, ey, length))

    # Opposite-edge pairs: (e0, e2) and (e1, e3).
    len_a = 0.5 * (edges[0][2] + edges[2][2])
    len_b = 0.5 * (edges[1][2] + edges[3][2])
    dir_a = _mean_direction(
        reduce_mod_pi(math.atan2(edges[0][1], edges[0][0])),
        reduce_mod_pi(math.atan2(-edges[2][1], -edges[2][0])),
    )
    dir_b = _mean_direction(
        reduce_mod_pi(math.atan2(edges[1][1], edges[1][0])),
        reduce_mod_pi(math.atan2(-edges[3][1], -edges[3][0])),
    )
    if len_a >= len_b:
        return canonicalize(cx, cy, len_a, len_b, dir_a)
    return canonicalize(cx, cy, len_b, len_a, dir_b)


def _clip_polygon(poly, edge_p0, edge_p1):
    """Clip a CCW polygon against the left half-plane of edge p0 -> p1."""
    ax, ay = edge_p0
    ex = edge_p1[0] - ax
    ey = edge_p1[1] - ay
    out = []
    n = len(poly)
    sx, sy = poly[-1]
    s_side = ex * (sy - ay) - ey * (sx - ax)
    for i in range(n):
        px, py = poly[i]
        p_side = ex * (py - ay) - ey * (px - ax)
        if p_side >= 0.0:
            if s_side < 0.0:
                t = s_side / (s_side - p_side)
                out.append((sx + t * (px - sx), sy + t * (py - sy)))
            out.append((px, py))
        elif s_side >= 0.0:
            t = s_side / (s_side - p_side)
            out.append((sx + t * (px - sx), sy + t * (py - sy)))
        sx, sy, s_side = px, py, p_side
    return out


def intersection_area(a: OBB, b: OBB) -> float:
    """Exact area of the intersection of two boxes; 0 when disjoint."""
    # Circumscribed-circle reject keeps the common disjoint case cheap.
    dx = b.x - a.x
    dy = b.y - a.y
    reach = 0.5 * (math.hypot(a.w, a.h) + math.hypot(b.w, b.h))
    if dx * dx + dy * dy >= reach * reach:
        return 0.0
    poly = list(obb_to_corners(a))
    clip = obb_to_corners(b)
    for i in range(4):
        poly = _clip_polygon(poly, clip[i], clip[(i + 1) % 4])
        if not poly:
            return 0.0
    return abs(_signed_area(poly))


def iou(a: OBB, b: OBB) -> float:
    """Intersection over union; 1.0 iff the boxes cover the same point set."""
    inter = intersection_area(a, b)
    if inter <= 0.0:
        return 0.0
    union = a.area + b.area - inter
    ratio = inter / union
    # Shoelace rounding can push a self-intersection an ulp past 1.
    return 1.0 if ratio > 1.0 else ratio


def relative_angle(theta1: float, theta2: float) -> float:
    """Cyclic difference of two orientations, in [-pi/2, pi/2].

    Orientations are undirected (period pi), so the difference is folded:
    d for |d| <= pi/2, d + pi for d < -pi/2, d - pi for d > pi/2.

    Raises:
        ContractError: either input outside [0, pi).
    """
    if not (0.0 <= theta1 < math.pi) or not (0.0 <= theta2 < math.pi):
        raise ContractError(f"orientations must lie in [0, pi), got {theta1}, {theta2}")
    d = theta1 - theta2
    if d > _HALF_PI:
        return d - math.pi
    if d < -_HALF_PI:
        return d + math.pi
    return d
