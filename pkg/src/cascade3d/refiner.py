"""Second-stage per-proposal refinement (a PointNet over RoI point features)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom3d import fold_heading, iou3d_matrix, wrap_angle
from .nncore import (Dense, Dropout, Mlp, Module, bce_with_logits, cross_entropy, maxpool_set,
                     maxpool_set_backward, sigmoid, smooth_l1)

MIN_EXTENT = 0.01
N_RESIDUALS = 7


@dataclass
class RefinerConfig:
    n_classes: int = 3
    n_scores: int = 4  # width of the appended 2D block
    pre_pool: tuple = (128, 128, 1024)
    post_pool: tuple = (512, 512)
    dropout: float = 0.1
    fg_iou: float = 0.25

    @property
    def in_features(self) -> int:
        return 9 + self.n_scores


class RefinerNet(Module):
    def __init__(self, cfg: RefinerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.point_mlp = Mlp((cfg.in_features,) + tuple(cfg.pre_pool), rng, "refiner.point")
        self.shared = Mlp((cfg.pre_pool[-1],) + tuple(cfg.post_pool), rng, "refiner.shared")
        width = cfg.post_pool[-1]
        self.reg_head = Dense(width, N_RESIDUALS, rng, "refiner.reg", init="xavier")
        self.reg_head.W.value *= 0.01
        self.cls_head = Dense(width, cfg.n_classes + 1, rng, "refiner.cls", init="xavier")
        self.iou_head = Dense(width, 1, rng, "refiner.iou", init="xavier")
        self.drop = Dropout(cfg.dropout)

    def forward(self, feats, train: bool = False, rng=None):
        """``feats``: (P, n, 9 + K). Returns ``(outputs, cache)``."""
        feats = np.asarray(feats, dtype=float)
        if feats.ndim == 2:
            feats = feats[None]
        if feats.shape[-1] != self.cfg.in_features:
            raise ValueError(f"expected {self.cfg.in_features} features per point, got {feats.shape[-1]}")
        h, c_pt = self.point_mlp.forward(feats)
        pooled, arg = maxpool_set(h)
        s, c_sh = self.shared.forward(pooled)
        outs, caches = [], []
        for head in (self.reg_head, self.cls_head, self.iou_head):
            d, k = self.drop.forward(s, train, rng)
            o, c = head.forward(d)
            outs.append(o)
            caches.append((k, c))
        out = {"residuals": outs[0], "cls_logits": outs[1], "iou_logit": outs[2][:, 0]}
        out["iou_pred"] = sigmoid(out["iou_logit"])
        return out, (c_pt, arg, feats.shape[1], c_sh, caches)

    def backward(self, grads, cache):
        """Returns the gradient w.r.t. the input features."""
        c_pt, arg, n, c_sh, caches = cache
        ds = 0.0
        keys = ("residuals", "cls_logits", "iou_logit")
        for head, key, (k, c) in zip((self.reg_head, self.cls_head, self.iou_head), keys, caches):
            g = grads.get(key)
            if g is None:
                continue
            g = g[:, None] if key == "iou_logit" else g
            ds = ds + self.drop.backward(head.backward(g, c), k)
        dpooled = self.shared.backward(ds, c_sh)
        dh = maxpool_set_backward(dpooled, arg, n)
        return self.point_mlp.backward(dh, c_pt)


def refine_forward(net: RefinerNet, feats, train: bool = False, rng=None):
    out, _ = net.forward(feats, train, rng)
    return out


def apply_residuals(boxes, residuals) -> np.ndarray:
    """Shift centres in the proposal frame, add extents (floored), add heading."""
    boxes = np.asarray(boxes, dtype=float)
    res = np.asarray(residuals, dtype=float)
    single = boxes.ndim == 1
    boxes, res = boxes.reshape(-1, 7), res.reshape(-1, 7)
    c, s = np.cos(boxes[:, 6]), np.sin(boxes[:, 6])
    out = boxes.copy()
    out[:, 0] += c * res[:, 0] - s * res[:, 1]
    out[:, 1] += s * res[:, 0] + c * res[:, 1]
    out[:, 2] += res[:, 2]
    out[:, 3:6] = np.maximum(boxes[:, 3:6] + res[:, 3:6], MIN_EXTENT)
    out[:, 6] = wrap_angle(boxes[:, 6] + res[:, 6])
    return out[0] if single else out


def residual_targets(boxes, gt) -> np.ndarray:
    """Residuals that take ``boxes`` onto ``gt`` (inverse of apply_residuals)."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 7)
    gt = np.asarray(gt, dtype=float).reshape(-1, 7)
    c, s = np.cos(boxes[:, 6]), np.sin(boxes[:, 6])
    d = gt[:, :3] - boxes[:, :3]
    out = np.empty_like(boxes)
    out[:, 0] = c * d[:, 0] + s * d[:, 1]
    out[:, 1] = -s * d[:, 0] + c * d[:, 1]
    out[:, 2] = d[:, 2]
    out[:, 3:6] = gt[:, 3:6] - boxes[:, 3:6]
    out[:, 6] = fold_heading(gt[:, 6] - boxes[:, 6])  # half-turn equivalent boxes coincide
    return out


def iou_target(iou):
    """Normalised IoU target ``clip(2 * iou - 0.3, 0, 1)``."""
    return np.minimum(1.0, np.maximum(0.0, 2.0 * np.asarray(iou, dtype=float) - 0.3))


def fusion_score(cls_logits, iou_pred, n_classes: int):
    """Best foreground class and its score (class probability x predicted IoU)."""
    z = cls_logits - cls_logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    cls = p[:, :n_classes].argmax(axis=1)
    return cls, p[np.arange(len(cls)), cls] * iou_pred


def rcnn_loss(proposal_boxes, out, gt_boxes, gt_labels, cfg: RefinerConfig):
    """Box-residual smooth-L1 (foreground), class CE and IoU BCE, unweighted sum.

    Returns ``(total, parts, grads, info)``; ``info`` holds the matching.
    """
    proposal_boxes = np.asarray(proposal_boxes, dtype=float).reshape(-1, 7)
    gt_boxes = np.asarray(gt_boxes, dtype=float).reshape(-1, 7)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    n = len(proposal_boxes)
    background = cfg.n_classes
    if len(gt_boxes):
        ious = iou3d_matrix(proposal_boxes, gt_boxes)
        match = ious.argmax(axis=1)
        best = ious[np.arange(n), match]
    else:
        match = np.zeros(n, dtype=np.int64)
        best = np.zeros(n)
    fg = best >= cfg.fg_iou
    grads = {"residuals": np.zeros((n, N_RESIDUALS))}
    box_loss = 0.0
    if fg.any():
        targets = residual_targets(proposal_boxes[fg], gt_boxes[match[fg]])
        loss, g = smooth_l1(out["residuals"][fg], targets)
        box_loss = loss / fg.sum()
        grads["residuals"][fg] = g / fg.sum()
    labels = np.where(fg, gt_labels[match] if len(gt_labels) else background, background)
    cls_loss, grads["cls_logits"] = cross_entropy(out["cls_logits"], labels)
    iou_loss, grads["iou_logit"] = bce_with_logits(out["iou_logit"], iou_target(best))
    parts = {"box_refine": float(box_loss), "sem_cls": cls_loss, "iou": iou_loss}
    total = parts["box_refine"] + parts["sem_cls"] + parts["iou"]
    return total, parts, grads, {"match": match, "iou": best, "fg": fg}
