"""Oriented 3D box geometry.

Boxes are yaw-only (rotation about the +z up axis).  A box is stored either as
a :class:`Box3D` or, for vectorised code, as a 7-vector
``[x, y, z, l, h, w, heading]`` where ``l`` runs along the canonical x axis,
``w`` along canonical y and ``h`` along z.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLIP_EPS = 1e-9
MIN_POLY_AREA = 1e-12

# order of the six face offsets in a geometric feature
FACES = ("+x", "-x", "+y", "-y", "+z", "-z")


def wrap_angle(theta):
    """Wrap angle(s) into [-pi, pi); in-range values are returned bit-exact."""
    theta = np.asarray(theta, dtype=float)
    wrapped = (theta + np.pi) % (2 * np.pi) - np.pi
    wrapped = np.where(wrapped >= np.pi, wrapped - 2 * np.pi, wrapped)  # rounding at the seam
    return np.where((theta >= -np.pi) & (theta < np.pi), theta, wrapped)


def fold_heading(theta):
    """Equivalent heading in [-pi/2, pi/2); a box is unchanged by a half turn."""
    theta = np.asarray(theta, dtype=float)
    folded = (theta + np.pi / 2) % np.pi - np.pi / 2
    folded = np.where(folded >= np.pi / 2, folded - np.pi, folded)
    return np.where((theta >= -np.pi / 2) & (theta < np.pi / 2), theta, folded)


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # (l, h, w)
    heading: float = 0.0

    def __post_init__(self):
        center = tuple(float(c) for c in self.center)
        size = tuple(float(s) for s in self.size)
        if len(center) != 3 or len(size) != 3:
            raise ValueError("center and size need three components")
        if not all(np.isfinite(center)) or not np.isfinite(self.heading):
            raise ValueError("box parameters must be finite")
        if min(size) <= 0:
            raise ValueError(f"box extents must be positive, got {size}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "heading", float(wrap_angle(self.heading)))

    @classmethod
    def from_array(cls, arr) -> "Box3D":
        arr = np.asarray(arr, dtype=float)
        return cls(tuple(arr[:3]), tuple(arr[3:6]), float(arr[6]))

    def to_array(self) -> np.ndarray:
        return np.array([*self.center, *self.size, self.heading])

    @property
    def volume(self) -> float:
        l, h, w = self.size
        return l * h * w


@dataclass
class Proposal:
    box: Box3D
    class_probs: np.ndarray
    objectness: float
    pred_iou: float | None = None

    def __post_init__(self):
        self.class_probs = np.asarray(self.class_probs, dtype=float)
        if abs(self.class_probs.sum() - 1.0) > 1e-6 or (self.class_probs < 0).any():
            raise ValueError("class_probs must lie on the probability simplex")
        if not 0.0 <= self.objectness <= 1.0:
            raise ValueError("objectness must be in [0, 1]")


@dataclass
class ProposalSet:
    """Array-backed batch of proposals (the form the pipeline passes around)."""

    boxes: np.ndarray  # (P, 7)
    class_probs: np.ndarray  # (P, C)
    objectness: np.ndarray  # (P,)
    pred_iou: np.ndarray | None = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=float).reshape(-1, 7)
        probs = np.asarray(self.class_probs, dtype=float)
        self.class_probs = probs.reshape(len(self.boxes), probs.shape[-1] if probs.ndim else -1)
        self.objectness = np.asarray(self.objectness, dtype=float).reshape(-1)

    def __len__(self) -> int:
        return len(self.boxes)

    def __getitem__(self, i) -> Proposal:
        iou = None if self.pred_iou is None else float(self.pred_iou[i])
        return Proposal(Box3D.from_array(self.boxes[i]), self.class_probs[i], float(self.objectness[i]), iou)

    @classmethod
    def from_list(cls, proposals, n_classes: int | None = None) -> "ProposalSet":
        proposals = list(proposals)
        if not proposals:
            return cls(np.zeros((0, 7)), np.zeros((0, n_classes or 1)), np.zeros(0))
        ious = [p.pred_iou for p in proposals]
        return cls(
            np.stack([p.box.to_array() for p in proposals]),
            np.stack([p.class_probs for p in proposals]),
            np.array([p.objectness for p in proposals]),
            None if any(i is None for i in ious) else np.array(ious, dtype=float),
        )


def as_box_array(box) -> np.ndarray:
    if isinstance(box, Box3D):
        return box.to_array()
    return np.asarray(box, dtype=float)


def yaw_matrix(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def to_canonical(points, box) -> np.ndarray:
    """Express point(s) in the box frame: ``R(-heading) @ (p - center)``."""
    b = as_box_array(box)
    d = np.asarray(points, dtype=float) - b[:3]
    c, s = np.cos(b[6]), np.sin(b[6])
    out = np.empty_like(d)
    out[..., 0] = c * d[..., 0] + s * d[..., 1]
    out[..., 1] = -s * d[..., 0] + c * d[..., 1]
    out[..., 2] = d[..., 2]
    return out


def from_canonical(points, box) -> np.ndarray:
    b = as_box_array(box)
    q = np.asarray(points, dtype=float)
    c, s = np.cos(b[6]), np.sin(b[6])
    out = np.empty_like(q)
    out[..., 0] = c * q[..., 0] - s * q[..., 1] + b[0]
    out[..., 1] = s * q[..., 0] + c * q[..., 1] + b[1]
    out[..., 2] = q[..., 2] + b[2]
    return out


def geometric_features(points, box) -> np.ndarray:
    """Canonical coordinates plus signed distances to the six faces.

    Returns an array of shape ``(..., 9)`` ordered
    ``[cx, cy, cz, +x, -x, +y, -y, +z, -z]``.  Offsets are negative on the
    far side of a face, so points outside the box still get usable values.
    """
    b = as_box_array(box)
    q = to_canonical(points, b)
    half_l, half_h, half_w = b[3] / 2, b[4] / 2, b[5] / 2
    feats = np.empty(q.shape[:-1] + (9,))
    feats[..., :3] = q
    feats[..., 3] = half_l - q[..., 0]
    feats[..., 4] = half_l + q[..., 0]
    feats[..., 5] = half_w - q[..., 1]
    feats[..., 6] = half_w + q[..., 1]
    feats[..., 7] = half_h - q[..., 2]
    feats[..., 8] = half_h + q[..., 2]
    return feats


def geometric_features_backward(points, box, grad) -> np.ndarray:
    """Gradient of ``sum(grad * geometric_features(points, box))`` w.r.t. the
    7 box parameters (points held fixed)."""
    b = as_box_array(box)
    q = to_canonical(points, b).reshape(-1, 3)
    g = np.asarray(grad, dtype=float).reshape(-1, 9)
    dq = g[:, :3].copy()
    dq[:, 0] += g[:, 4] - g[:, 3]
    dq[:, 1] += g[:, 6] - g[:, 5]
    dq[:, 2] += g[:, 8] - g[:, 7]
    c, s = np.cos(b[6]), np.sin(b[6])
    out = np.zeros(7)
    # q = R(-t)(p - c)  =>  dq/dc = -R(-t)
    out[0] = -(c * dq[:, 0] - s * dq[:, 1]).sum()
    out[1] = -(s * dq[:, 0] + c * dq[:, 1]).sum()
    out[2] = -dq[:, 2].sum()
    out[3] = 0.5 * (g[:, 3] + g[:, 4]).sum()
    out[4] = 0.5 * (g[:, 7] + g[:, 8]).sum()
    out[5] = 0.5 * (g[:, 5] + g[:, 6]).sum()
    out[6] = (dq[:, 0] * q[:, 1] - dq[:, 1] * q[:, 0]).sum()
    return out


def contains(box, points) -> np.ndarray | bool:
    """Boundary-inclusive point-in-box test."""
    b = as_box_array(box)
    q = to_canonical(points, b)
    half = np.array([b[3], b[5], b[4]]) / 2  # canonical x, y, z extents
    inside = np.all(np.abs(q) <= half, axis=-1)
    return bool(inside) if np.ndim(inside) == 0 else inside


def enlarge(box, factor: float = 1.2):
    if factor < 1:
        raise ValueError(f"enlargement factor must be >= 1, got {factor}")
    if isinstance(box, Box3D):
        return Box3D(box.center, tuple(s * factor for s in box.size), box.heading)
    b = np.array(box, dtype=float)
    b[..., 3:6] *= factor
    return b


def bev_corners(box) -> np.ndarray:
    """Counter-clockwise BEV footprint corners, shape (4, 2)."""
    b = as_box_array(box)
    hl, hw = b[3] / 2, b[5] / 2
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    c, s = np.cos(b[6]), np.sin(b[6])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + b[:2]


def polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject, clip) -> list:
    """Sutherland-Hodgman clipping of ``subject`` by a convex CCW ``clip``."""
    output = [tuple(p) for p in subject]
    clip = [tuple(p) for p in clip]
    for i in range(len(clip)):
        if not output:
            break
        ax, ay = clip[i - 1]
        bx, by = clip[i]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        candidates, output = output, []
        prev = candidates[-1]
        s_prev = side(prev)
        for cur in candidates:
            s_cur = side(cur)
            if s_cur >= -CLIP_EPS:
                if s_prev < -CLIP_EPS:
                    output.append(_cross_point(prev, cur, s_prev, s_cur))
                output.append(cur)
            elif s_prev >= -CLIP_EPS:
                output.append(_cross_point(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
    return output


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection_area(a, b) -> float:
    a, b = as_box_array(a), as_box_array(b)
    # cheap reject on circumscribed circles
    ra = 0.5 * np.hypot(a[3], a[5])
    rb = 0.5 * np.hypot(b[3], b[5])
    if np.hypot(a[0] - b[0], a[1] - b[1]) > ra + rb:
        return 0.0
    area = polygon_area(clip_polygon(bev_corners(a), bev_corners(b)))
    return area if area >= MIN_POLY_AREA else 0.0


def iou3d(a, b) -> float:
    """Rotated 3D IoU: BEV polygon overlap times vertical overlap."""
    a, b = as_box_array(a), as_box_array(b)
    z_overlap = min(a[2] + a[4] / 2, b[2] + b[4] / 2) - max(a[2] - a[4] / 2, b[2] - b[4] / 2)
    if z_overlap <= 0:
        return 0.0
    inter = bev_intersection_area(a, b) * z_overlap
    if inter <= 0:
        return 0.0
    union = a[3] * a[4] * a[5] + b[3] * b[4] * b[5] - inter
    return float(min(1.0, max(0.0, inter / union)))


def bev_iou(a, b) -> float:
    a, b = as_box_array(a), as_box_array(b)
    inter = bev_intersection_area(a, b)
    union = a[3] * a[5] + b[3] * b[5] - inter
    return float(inter / union) if inter > 0 else 0.0


def iou3d_matrix(boxes_a, boxes_b) -> np.ndarray:
    boxes_a = [as_box_array(b) for b in boxes_a]
    boxes_b = [as_box_array(b) for b in boxes_b]
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = iou3d(a, b)
    return out


def greedy_nms(scores, iou_thresh: float, overlap) -> list[int]:
    """Greedy suppression with ``overlap(i, j)`` supplying pairwise IoU."""
    scores = np.asarray(scores, dtype=float)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep: list[int] = []
    for i in order:
        if all(overlap(i, k) < iou_thresh for k in keep):
            keep.append(i)
    return keep


def nms3d(boxes, scores, iou_thresh: float) -> list[int]:
    """Greedy NMS; ties in score go to the lower index."""
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores differ in length")
    boxes = [as_box_array(b) for b in boxes]
    return greedy_nms(scores, iou_thresh, lambda i, k: iou3d(boxes[i], boxes[k]))
