"""Cross-modal feature construction.

* 3D -> 2D: per-point semantic + geometric features of proposals written
  into an image and stacked with RGB-D.
* 2D -> 3D: point painting, and the per-RoI point features of the refiner.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import PointCloud
from .geom3d import ProposalSet, contains, enlarge, geometric_features, geometric_features_backward


@dataclass
class FusionMap:
    channels: np.ndarray  # (H, W, C + 13): rgb, depth, semantic (C), geometric (9)
    valid: np.ndarray  # (H, W) bool
    rows: np.ndarray  # written pixels ...
    cols: np.ndarray
    proposal: np.ndarray  # ... which proposal wrote them ...
    point: np.ndarray  # ... from which cloud point

    @property
    def n_classes(self) -> int:
        return self.channels.shape[-1] - 13

    @property
    def semantic(self) -> np.ndarray:
        return self.channels[..., 4:4 + self.n_classes]

    @property
    def geometric(self) -> np.ndarray:
        return self.channels[..., 4 + self.n_classes:]


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def containment_matrix(boxes, xyz) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 7)
    if len(boxes) == 0:
        return np.zeros((0, len(xyz)), dtype=bool)
    xyz = np.asarray(xyz, dtype=float)
    d = xyz[None, :, :] - boxes[:, None, :3]
    c, s = np.cos(boxes[:, 6:7]), np.sin(boxes[:, 6:7])
    inside = np.abs(c * d[..., 0] + s * d[..., 1]) <= boxes[:, 3:4] / 2
    inside &= np.abs(c * d[..., 1] - s * d[..., 0]) <= boxes[:, 5:6] / 2
    inside &= np.abs(d[..., 2]) <= boxes[:, 4:5] / 2
    return inside


def build_3d_to_2d_map(proposals: ProposalSet, cloud: PointCloud, n_per_box: int, rgbd, seed=0,
                       n_classes: int | None = None) -> FusionMap:
    """Rasterise proposal semantics and point geometry into an image.

    Each point is owned by the most confident proposal containing it. Up to
    ``n_per_box`` owned points per proposal are sampled and written at their
    source pixel; when several land on one pixel the higher-objectness
    proposal wins, then the nearer point, then the lower point index.
    """
    rng = _rng(seed)
    rgbd = np.asarray(rgbd, dtype=float)
    h, w = rgbd.shape[:2]
    c = proposals.class_probs.shape[1] if len(proposals) else (n_classes or 1)
    channels = np.zeros((h, w, c + 13))
    channels[..., :3] = rgbd[..., :3]
    channels[..., 3] = np.nan_to_num(rgbd[..., 3])
    valid = np.zeros((h, w), dtype=bool)
    empty = np.zeros(0, dtype=np.int64)
    if len(proposals) == 0 or len(cloud) == 0:
        return FusionMap(channels, valid, empty, empty, empty, empty)

    inside = containment_matrix(proposals.boxes, cloud.xyz)
    has_pixel = cloud.pixel[:, 0] >= 0
    score = np.where(inside, proposals.objectness[:, None], -np.inf)
    owner = score.argmax(axis=0)
    owned = inside.any(axis=0) & has_pixel

    pts, props = [], []
    for j in range(len(proposals)):
        members = np.nonzero(owned & (owner == j))[0]
        if len(members) > n_per_box:
            members = np.sort(rng.choice(members, size=n_per_box, replace=False))
        pts.append(members)
        props.append(np.full(len(members), j))
    pts = np.concatenate(pts)
    props = np.concatenate(props)
    if len(pts) == 0:
        return FusionMap(channels, valid, empty, empty, empty, empty)

    depth = cloud.depth[pts] if cloud.depth is not None else np.zeros(len(pts))
    order = np.lexsort((pts, depth, -proposals.objectness[props]))
    pts, props = pts[order], props[order]
    flat = cloud.pixel[pts, 0] * w + cloud.pixel[pts, 1]
    _, first = np.unique(flat, return_index=True)
    pts, props = pts[first], props[first]
    rows, cols = cloud.pixel[pts, 0], cloud.pixel[pts, 1]

    geo = np.zeros((len(pts), 9))
    for j in np.unique(props):
        sel = props == j
        geo[sel] = geometric_features(cloud.xyz[pts[sel]], proposals.boxes[j])
    channels[rows, cols, 4:4 + c] = proposals.class_probs[props]
    channels[rows, cols, 4 + c:] = geo
    valid[rows, cols] = True
    return FusionMap(channels, valid, rows, cols, props, pts)


def fusion_map_backward(d_channels, fmap: FusionMap, proposals: ProposalSet, cloud: PointCloud):
    """Gradient of the 3D block w.r.t. proposal class probabilities and boxes."""
    c = fmap.n_classes
    d_probs = np.zeros_like(proposals.class_probs)
    d_boxes = np.zeros_like(proposals.boxes)
    if len(fmap.rows) == 0:
        return d_probs, d_boxes
    d_sem = d_channels[fmap.rows, fmap.cols, 4:4 + c]
    d_geo = d_channels[fmap.rows, fmap.cols, 4 + c:]
    np.add.at(d_probs, fmap.proposal, d_sem)
    for j in np.unique(fmap.proposal):
        sel = fmap.proposal == j
        d_boxes[j] = geometric_features_backward(cloud.xyz[fmap.point[sel]], proposals.boxes[j], d_geo[sel])
    return d_probs, d_boxes


@dataclass
class PaintedCloud:
    xyz: np.ndarray
    height: np.ndarray | None
    scores: np.ndarray  # (N, K) appended class distribution
    unmatched: np.ndarray  # (N,) True where no pixel was available

    @property
    def features(self) -> np.ndarray:
        base = [self.xyz] if self.height is None else [self.xyz, self.height[:, None]]
        return np.concatenate(base + [self.scores], axis=1)


def lookup_scores(pixel, segmap):
    """Per-point class distribution at its pixel; uniform where unmatched."""
    segmap = np.asarray(segmap, dtype=float)
    h, w, k = segmap.shape
    pixel = np.asarray(pixel)
    ok = (pixel[:, 0] >= 0) & (pixel[:, 0] < h) & (pixel[:, 1] >= 0) & (pixel[:, 1] < w)
    out = np.full((len(pixel), k), 1.0 / k)
    out[ok] = segmap[pixel[ok, 0], pixel[ok, 1]]
    return out, ~ok


def paint(cloud: PointCloud, segmap) -> PaintedCloud:
    pixel = cloud.pixel if cloud.pixel is not None else np.full((len(cloud), 2), -1)
    scores, unmatched = lookup_scores(pixel, segmap)
    return PaintedCloud(cloud.xyz.copy(), None if cloud.height is None else cloud.height.copy(), scores,
                        unmatched)


def assemble_refine_features(box, cloud: PointCloud, segmap, n: int, seed=0, n_scores: int | None = None):
    """Features of ``n`` points sampled inside an (already enlarged) box.

    Rows are ``geometric_features`` in the box frame followed by the 2D
    class distribution at each point's pixel (zeros when ``segmap`` is None).
    Returns ``(rows, point_indices, degenerate)``; an empty box gives a
    single all-zero row and ``degenerate=True``.
    """
    if n < 1:
        raise ValueError("need at least one point per RoI")
    k = np.asarray(segmap).shape[-1] if segmap is not None else int(n_scores or 0)
    members = np.nonzero(contains(box, cloud.xyz))[0]
    if len(members) == 0:
        return np.zeros((1, 9 + k)), np.zeros(0, dtype=np.int64), True
    rng = _rng(seed)
    idx = rng.choice(members, size=n, replace=len(members) < n)
    rows = np.zeros((n, 9 + k))
    rows[:, :9] = geometric_features(cloud.xyz[idx], box)
    if segmap is not None:
        rows[:, 9:] = lookup_scores(cloud.pixel[idx], segmap)[0]
    return rows, idx, False


def batch_refine_features(boxes, cloud: PointCloud, scores, n: int, rng, enlarge_factor: float = 1.2):
    """Vectorised :func:`assemble_refine_features` over proposals.

    ``boxes`` are the raw proposal boxes; they are enlarged here. ``scores``
    is the per-point (N, K) painted block (zeros for 3D-only). Degenerate
    RoIs get all-zero rows, which max-pool to the same single zero row.
    Returns ``(features (P, n, 9 + K), idx (P, n), degenerate (P,))``.
    """
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 7)
    big = enlarge(boxes, enlarge_factor)
    k = scores.shape[1]
    feats = np.zeros((len(boxes), n, 9 + k))
    idx = np.zeros((len(boxes), n), dtype=np.int64)
    degenerate = np.zeros(len(boxes), dtype=bool)
    inside = containment_matrix(big, cloud.xyz)
    for j in range(len(boxes)):
        members = np.nonzero(inside[j])[0]
        if len(members) == 0:
            degenerate[j] = True
            continue
        pick = rng.choice(members, size=n, replace=len(members) < n)
        idx[j] = pick
        feats[j, :, :9] = geometric_features(cloud.xyz[pick], big[j])
        feats[j, :, 9:] = scores[pick]
    return feats, idx, degenerate


def batch_refine_features_backward(d_feats, boxes, cloud: PointCloud, idx, degenerate,
                                   enlarge_factor: float = 1.2) -> np.ndarray:
    """Gradient w.r.t. the raw (un-enlarged) proposal boxes via the geometric block."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 7)
    big = enlarge(boxes, enlarge_factor)
    d_boxes = np.zeros_like(boxes)
    for j in range(len(boxes)):
        if degenerate[j]:
            continue
        g = geometric_features_backward(cloud.xyz[idx[j]], big[j], d_feats[j, :, :9])
        g[3:6] *= enlarge_factor
        d_boxes[j] = g
    return d_boxes


def fusion_dropout(blocks, p: float = 0.5, phase: str = "train", seed=0):
    """Zero the 2D block of whole samples with probability ``p`` (train only).

    ``blocks`` is a sequence of per-sample arrays. Returns ``(blocks, dropped)``.
    """
    blocks = list(blocks)
    if phase != "train" or p <= 0:
        return blocks, np.zeros(len(blocks), dtype=bool)
    rng = _rng(seed)
    dropped = rng.random(len(blocks)) < p
    return [np.zeros_like(b) if d else b for b, d in zip(blocks, dropped)], dropped
