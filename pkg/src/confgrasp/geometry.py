"""Rotated grasp rectangles, the IoU/angle success test, heatmap targets, peaks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

PARALLELOGRAM_TOL = 1.5
SUCCESS_IOU = 0.25
SUCCESS_ANGLE = math.pi / 6


class GeometryError(ValueError):
    pass


def normalize_angle(theta: float) -> float:
    """Map an orientation onto [-pi/2, pi/2) modulo pi."""
    t = math.fmod(theta + math.pi / 2, math.pi)
    if t < 0:
        t += math.pi
    t -= math.pi / 2
    # fmod can land exactly on +pi/2 after the shift for inputs just below a multiple of pi
    if t >= math.pi / 2:
        t -= math.pi
    return t


@dataclass(frozen=True)
class GraspRect:
    """Planar parallel-jaw grasp: center, orientation, plate width, opening.

    ``theta`` is the direction of the plate edge (length ``w``) measured in
    image coordinates (x right, y down).  The jaws close along the
    perpendicular, over distance ``h``.
    """

    x: float
    y: float
    theta: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise GeometryError(f"rectangle extents must be positive, got w={self.w}, h={self.h}")
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    def normalized(self) -> "GraspRect":
        return self

    def vertices(self) -> np.ndarray:
        return vertices_from_rect(self)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.x, self.y, self.theta, self.w, self.h)


def rect_normalize(r: GraspRect) -> GraspRect:
    return GraspRect(r.x, r.y, r.theta, r.w, r.h)


def vertices_from_rect(r: GraspRect) -> np.ndarray:
    """Corners in edge order; the first edge runs along ``theta`` with length ``w``."""
    u = np.array([math.cos(r.theta), math.sin(r.theta)])
    v = np.array([-u[1], u[0]])
    c = np.array([r.x, r.y])
    hw, hh = r.w / 2, r.h / 2
    return np.array([c - hw * u - hh * v, c + hw * u - hh * v, c + hw * u + hh * v, c - hw * u + hh * v])


def rect_from_vertices(v: Sequence[Sequence[float]], tol: float = PARALLELOGRAM_TOL) -> GraspRect:
    p = np.asarray(v, dtype=np.float64)
    if p.shape != (4, 2):
        raise GeometryError(f"expected 4 two-dimensional vertices, got shape {p.shape}")
    closure = np.linalg.norm(p[3] - (p[0] + p[2] - p[1]))
    if closure > tol:
        raise GeometryError(f"vertices are not a parallelogram (closure error {closure:.3f} px)")
    e1 = p[1] - p[0]
    e2 = p[2] - p[1]
    if abs(e1[0] * e2[1] - e1[1] * e2[0]) < 1e-9:
        raise GeometryError("degenerate rectangle (zero area)")
    w = 0.5 * (np.linalg.norm(e1) + np.linalg.norm(p[2] - p[3]))
    h = 0.5 * (np.linalg.norm(e2) + np.linalg.norm(p[3] - p[0]))
    cx, cy = p.mean(axis=0)
    return GraspRect(float(cx), float(cy), math.atan2(e1[1], e1[0]), float(w), float(h))


def angle_diff(a: float, b: float) -> float:
    """Smallest |a - b + k*pi| over integers k; lies in [0, pi/2]."""
    d = math.fmod(abs(a - b), math.pi)
    return min(d, math.pi - d)


# ---------------------------------------------------------------- polygon clipping


def _clip(subject: list[np.ndarray], a: np.ndarray, b: np.ndarray) -> list[np.ndarray]:
    """Keep the part of ``subject`` left of the directed edge a->b."""
    out: list[np.ndarray] = []
    if not subject:
        return out
    ex, ey = b - a

    def side(p):
        return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

    prev = subject[-1]
    sp = side(prev)
    for cur in subject:
        sc = side(cur)
        if sc >= 0:
            if sp < 0:
                out.append(prev + (cur - prev) * (sp / (sp - sc)))
            out.append(cur)
        elif sp >= 0:
            out.append(prev + (cur - prev) * (sp / (sp - sc)))
        prev, sp = cur, sc
    return out


def polygon_area(poly: Iterable[Sequence[float]]) -> float:
    p = np.asarray(list(poly), dtype=np.float64)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _ccw(p: np.ndarray) -> np.ndarray:
    x, y = p[:, 0], p[:, 1]
    signed = np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))
    return p if signed > 0 else p[::-1]


def intersection_area(a: GraspRect, b: GraspRect) -> float:
    pa, pb = _ccw(vertices_from_rect(a)), _ccw(vertices_from_rect(b))
    poly = list(pa)
    for i in range(4):
        poly = _clip(poly, pb[i], pb[(i + 1) % 4])
        if not poly:
            return 0.0
    return polygon_area(poly)


def rotated_iou(a: GraspRect, b: GraspRect) -> float:
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    return float(min(max(inter / union, 0.0), 1.0))


def is_success(pred: GraspRect, truths: Sequence[GraspRect]) -> bool:
    """Angle within 30 degrees and rotated IoU strictly above 0.25 for some truth."""
    if not truths:
        raise ValueError("is_success needs at least one ground-truth rectangle")
    for t in truths:
        if angle_diff(pred.theta, t.theta) <= SUCCESS_ANGLE and rotated_iou(pred, t) > SUCCESS_IOU:
            return True
    return False


# ---------------------------------------------------------------- heatmaps


@dataclass
class Heatmap:
    grid: np.ndarray
    stride: int

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


def cell_centers(h: int, w: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Input-image coordinates of every cell center as (xs, ys) grids."""
    ys = (np.arange(h) + 0.5) * stride
    xs = (np.arange(w) + 0.5) * stride
    return np.meshgrid(xs, ys)


def heatmap_target(annotations: Sequence[GraspRect], h: int, w: int, stride: int, r: float) -> Heatmap:
    if r <= 0:
        raise ValueError(f"ball radius must be positive, got {r}")
    grid = np.zeros((h, w), dtype=np.float32)
    xs, ys = cell_centers(h, w, stride)
    for a in annotations:
        grid[(xs - a.x) ** 2 + (ys - a.y) ** 2 <= r * r] = 1.0
    return Heatmap(grid, stride)


def nms_peaks(m: Heatmap, threshold: float, window: int = 3, max_peaks: int = 10) -> list[tuple[float, float, float]]:
    """Strict local maxima above ``threshold`` as (x, y, score) in image space."""
    if window % 2 == 0 or window < 1:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    grid = np.asarray(m.grid, dtype=np.float64)
    footprint = np.ones((window, window), dtype=bool)
    footprint[window // 2, window // 2] = False
    neigh = ndimage.maximum_filter(grid, footprint=footprint, mode="constant", cval=-np.inf)
    ys, xs = np.nonzero((grid > neigh) & (grid >= threshold))
    scores = grid[ys, xs]
    order = np.lexsort((xs, ys, -scores))[:max_peaks]
    return [((xs[i] + 0.5) * m.stride, (ys[i] + 0.5) * m.stride, float(scores[i])) for i in order]


# ---------------------------------------------------------------- text format


def parse_rect_lines(lines: Sequence[str], source: str = "<rects>") -> list[np.ndarray]:
    """Group whitespace-separated "x y" lines into 4x2 vertex arrays."""
    pts: list[tuple[float, float]] = []
    for lineno, line in enumerate(lines, 1):
        s = line.strip()
        if not s:
            continue
        fields = s.split()
        if len(fields) != 2:
            raise GeometryError(f"{source}:{lineno}: expected 'x y', got {s!r}")
        try:
            pts.append((float(fields[0]), float(fields[1])))
        except ValueError:
            raise GeometryError(f"{source}:{lineno}: non-numeric vertex {s!r}") from None
    if len(pts) % 4:
        raise GeometryError(f"{source}:{len(lines)}: {len(pts)} vertex lines is not a multiple of 4")
    return [np.array(pts[i : i + 4]) for i in range(0, len(pts), 4)]


def format_rect_lines(rects: Sequence[GraspRect]) -> str:
    rows = []
    for r in rects:
        for x, y in vertices_from_rect(r):
            rows.append(f"{x:.6f} {y:.6f}")
    return "\n".join(rows) + ("\n" if rows else "")
