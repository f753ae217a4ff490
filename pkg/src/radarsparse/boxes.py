"""Oriented BEV boxes and their exact rotated intersection-over-union."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


@dataclass(frozen=True)
class OBB:
    """Oriented box: center (cx, cy), width w across, length l along the yaw axis."""

    cx: float
    cy: float
    w: float
    l: float
    yaw: float

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0):
            raise ValueError(f"box extents must be positive, got w={self.w}, l={self.l}")
        for name in ("cx", "cy", "w", "l", "yaw"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite box field {name}")

    def canonical(self) -> "OBB":
        """Equivalent box with w <= l and yaw in (-pi, pi]."""
        w, l, yaw = self.w, self.l, self.yaw
        if w > l:
            w, l, yaw = l, w, yaw + math.pi / 2
        return OBB(self.cx, self.cy, w, l, wrap_angle(yaw))

    @property
    def area(self) -> float:
        return self.w * self.l

    def corners(self) -> np.ndarray:
        """Counter-clockwise corners, shape (4, 2)."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.l / 2.0, self.w / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])

    def contains(self, xy: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Boolean mask of points inside the box dilated by ``margin``."""
        xy = np.atleast_2d(xy)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx, dy = xy[:, 0] - self.cx, xy[:, 1] - self.cy
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (np.abs(u) <= self.l / 2 + margin) & (np.abs(v) <= self.w / 2 + margin)


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip(subject: list, a: np.ndarray, b: np.ndarray) -> list:
    # Sutherland-Hodgman against the half-plane left of edge a->b (CCW clip polygon).
    def side(p):
        return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])

    out = []
    n = len(subject)
    for k in range(n):
        cur, nxt = subject[k], subject[(k + 1) % n]
        sc, sn = side(cur), side(nxt)
        if sc >= 0:
            out.append(cur)
        if (sc >= 0) != (sn >= 0):
            t = sc / (sc - sn)
            out.append(cur + t * (nxt - cur))
    return out


def intersection_area(a: OBB, b: OBB) -> float:
    poly = list(a.corners())
    cb = b.corners()
    for k in range(4):
        if not poly:
            return 0.0
        poly = _clip(poly, cb[k], cb[(k + 1) % 4])
    if len(poly) < 3:
        return 0.0
    return _polygon_area(np.asarray(poly))


def rotated_iou(a: OBB, b: OBB) -> float:
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.w, a.l)
    rb = 0.5 * math.hypot(b.w, b.l)
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > ra + rb:
        return 0.0
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))
