"""Rotated-rectangle geometry: corners, polygon IoU and angle-aware soft-NMS.

Coordinates follow the image convention (x to the right, y down), so a
positive angle turns a box clockwise on screen.
"""
import math
from dataclasses import dataclass, replace
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np

Point = Tuple[float, float]

HALF_PI = math.pi / 2


def canonical_angle(theta):
    """Fold an angle (radians) into [-pi/2, pi/2); rectangles repeat every pi."""
    if -HALF_PI <= theta < HALF_PI:
        return theta  # the fold below can round values next to the upper edge onto -pi/2
    t = math.fmod(theta + HALF_PI, math.pi)
    if t < 0:
        t += math.pi
    t -= HALF_PI
    if t >= HALF_PI:  # fmod rounding at the upper edge
        t -= math.pi
    return t


@dataclass(frozen=True)
class Septet:
    """One oriented box: center, size, angle and sub-cell offset."""

    cx: float
    cy: float
    w: float
    h: float
    theta: float = 0.0
    dx: float = 0.0
    dy: float = 0.0

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h, self.theta, self.dx, self.dy)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"septet fields must be finite: {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"septet size must be positive, got w={self.w}, h={self.h}")

    @property
    def center(self) -> Point:
        return (self.cx + self.dx, self.cy + self.dy)

    @property
    def area(self):
        return self.w * self.h

    def canonical(self) -> "Septet":
        return replace(self, theta=canonical_angle(self.theta))

    def folded(self) -> "Septet":
        """Same rectangle with the offset merged into the center."""
        cx, cy = self.center
        return Septet(cx, cy, self.w, self.h, canonical_angle(self.theta))

    def as_tuple(self):
        return (self.cx, self.cy, self.w, self.h, self.theta, self.dx, self.dy)


class CornerBox(NamedTuple):
    lt: Point
    rt: Point
    lb: Point
    rb: Point

    def polygon(self) -> np.ndarray:
        """Vertices in traversal order lt, rt, rb, lb (positive shoelace area)."""
        return np.array([self.lt, self.rt, self.rb, self.lb], dtype=np.float64)


@dataclass(frozen=True)
class Detection:
    box: Septet
    class_id: int
    score: float

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


def rotation_matrix(theta):
    if not math.isfinite(theta):
        raise ValueError(f"theta must be finite, got {theta}")
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]], dtype=np.float64)


def corners_from_septet(s: Septet) -> CornerBox:
    if s.w <= 0 or s.h <= 0:
        raise ValueError(f"box size must be positive, got w={s.w}, h={s.h}")
    m = rotation_matrix(s.theta)
    center = np.array(s.center)
    hw, hh = s.w / 2, s.h / 2
    pts = [m @ np.array(v) + center for v in ((-hw, -hh), (hw, -hh), (-hw, hh), (hw, hh))]
    return CornerBox(*(tuple(float(c) for c in p) for p in pts))


def septet_from_corners(c: CornerBox, tol=1e-4) -> Septet:
    """Recover a septet (offset folded into the center) from four labelled corners.

    ``w`` is the length of the lt->rt edge and ``theta`` its direction, folded
    into [-pi/2, pi/2).
    """
    lt, rt, lb, rb = (np.asarray(p, dtype=np.float64) for p in c)
    top = rt - lt
    side = lb - lt
    w = float(np.hypot(*top))
    h = float(np.hypot(*side))
    if w * h <= 1e-12:
        raise ValueError("degenerate corner set (zero area)")
    scale = max(w, h, 1.0)
    if abs(float(top @ side)) > tol * scale * scale or np.abs(rb - rt - side).max() > tol * scale:
        raise ValueError("corners do not form a rectangle")
    center = (lt + rt + lb + rb) / 4
    theta = math.atan2(top[1], top[0])
    if HALF_PI <= theta < HALF_PI + 1e-9:
        # rounding pushed an in-range direction onto the excluded upper edge;
        # stay just inside so the corner labels come back unchanged
        theta = math.nextafter(HALF_PI, 0.0)
    return Septet(float(center[0]), float(center[1]), w, h, canonical_angle(theta))


def polygon_area(poly) -> float:
    """Signed shoelace area; positive for the lt, rt, rb, lb traversal."""
    p = np.asarray(poly, dtype=np.float64)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _positive(poly):
    p = np.asarray(poly, dtype=np.float64)
    return p[::-1] if polygon_area(p) < 0 else p


def clip_polygon(subject, clip) -> np.ndarray:
    """Clip ``subject`` against every half-plane of the convex polygon ``clip``."""
    out = list(map(tuple, _positive(subject)))
    clip = _positive(clip)
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp, out = out, []
        prev = inp[-1]
        prev_side = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for cur in inp:
            cur_side = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            if cur_side >= 0:
                if prev_side < 0:
                    t = prev_side / (prev_side - cur_side)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif prev_side >= 0:
                t = prev_side / (prev_side - cur_side)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, prev_side = cur, cur_side
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def polygon_intersection_area(a, b) -> float:
    """Area of the intersection of two convex polygons; symmetric in its arguments."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    # clip in a fixed order so that swapping arguments gives bit-identical results
    if tuple(a.ravel()) > tuple(b.ravel()):
        a, b = b, a
    return max(0.0, polygon_area(clip_polygon(a, b)))


def _circumradius(s: Septet):
    return 0.5 * math.hypot(s.w, s.h)


def rotated_iou(a: Septet, b: Septet) -> float:
    (ax, ay), (bx, by) = a.center, b.center
    if math.hypot(ax - bx, ay - by) >= _circumradius(a) + _circumradius(b):
        return 0.0
    area_a, area_b = a.area, b.area
    if area_a <= 0 and area_b <= 0:
        return 0.0
    inter = polygon_intersection_area(corners_from_septet(a).polygon(), corners_from_septet(b).polygon())
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def iou_matrix(boxes_a: Sequence[Septet], boxes_b: Sequence[Septet]) -> np.ndarray:
    out = np.zeros((len(boxes_a), len(boxes_b)))
    if not len(boxes_a) or not len(boxes_b):
        return out
    ca = np.array([s.center for s in boxes_a])
    cb = np.array([s.center for s in boxes_b])
    ra = np.array([_circumradius(s) for s in boxes_a])
    rb = np.array([_circumradius(s) for s in boxes_b])
    dist = np.linalg.norm(ca[:, None, :] - cb[None, :, :], axis=-1)
    for i, j in zip(*np.nonzero(dist < ra[:, None] + rb[None, :])):
        out[i, j] = rotated_iou(boxes_a[i], boxes_b[j])
    return out


def _soft_nms_pass(dets: List[Detection], iou_threshold, suppress_threshold) -> List[Detection]:
    scores = [d.score for d in dets]
    alive = [d.score >= suppress_threshold for d in dets]
    kept = []
    while True:
        best = -1
        for i, ok in enumerate(alive):
            # strict '>' keeps the earliest index on score ties
            if ok and (best < 0 or scores[i] > scores[best]):
                best = i
        if best < 0:
            break
        alive[best] = False
        kept.append(best)
        ref = dets[best]
        for i, ok in enumerate(alive):
            if not ok or dets[i].class_id != ref.class_id:
                continue
            iou = rotated_iou(ref.box, dets[i].box)
            if iou > iou_threshold:
                scores[i] *= 1.0 - iou
                if scores[i] < suppress_threshold:
                    alive[i] = False
    out = [replace(dets[i], score=scores[i]) for i in kept]
    order = sorted(range(len(out)), key=lambda k: (-out[k].score, kept[k]))
    return [out[k] for k in order]


def angle_soft_nms(dets: Sequence[Detection], iou_threshold=0.5, suppress_threshold=0.03,
                   until_stable=True) -> List[Detection]:
    """Class-aware soft-NMS on oriented boxes with linear score decay.

    Each pass keeps the highest-scoring detection, multiplies the score of
    every same-class detection overlapping it by more than ``iou_threshold``
    by ``1 - IoU`` and drops scores under ``suppress_threshold``. With
    ``until_stable`` the pass is repeated until it no longer changes the
    result, which makes the operation idempotent. Output is sorted by final
    score, ties broken by input order.
    """
    for name, v in (("iou_threshold", iou_threshold), ("suppress_threshold", suppress_threshold)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    cur = _soft_nms_pass(list(dets), iou_threshold, suppress_threshold)
    while until_stable:
        nxt = _soft_nms_pass(cur, iou_threshold, suppress_threshold)
        if nxt == cur:
            break
        cur = nxt
    return cur


def rotate_septet(s: Septet, angle, about: Point = (0.0, 0.0), new_about: Point = None) -> Septet:
    """Rotate a box by ``angle`` about ``about``; the pivot lands at ``new_about``."""
    new_about = about if new_about is None else new_about
    m = rotation_matrix(angle)
    cx, cy = s.center
    c = m @ np.array([cx - about[0], cy - about[1]]) + np.array(new_about)
    return Septet(float(c[0]), float(c[1]), s.w, s.h, canonical_angle(s.theta + angle))
