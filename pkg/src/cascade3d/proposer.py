"""First-stage proposal network: a small VoteNet.

Two set-abstraction rounds turn the (painted) cloud into seeds, each seed
casts one vote towards an object centre, votes are clustered by farthest
point sampling plus ball grouping and every cluster regresses a box.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geom3d import ProposalSet, contains, fold_heading, wrap_angle
from .nncore import (Dense, Mlp, Module, bce_with_logits, cross_entropy, maxpool_set,
                     maxpool_set_backward, scatter_rows, sigmoid, smooth_l1, softmax)

LOG_SIZE_RANGE = (-4.0, 2.0)


def fps(points, m: int, start_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; the lowest index wins ties."""
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if m > n:
        raise ValueError(f"cannot pick {m} of {n} points")
    if m <= 0:
        return np.zeros(0, dtype=np.int64)
    out = np.empty(m, dtype=np.int64)
    out[0] = start_index
    x, y, z = (np.ascontiguousarray(pts[:, i]) for i in range(3))
    best = np.full(n, np.inf)
    d, tmp = np.empty(n), np.empty(n)
    last = start_index
    for i in range(1, m):
        # in-place arithmetic: this loop dominates proposer runtime
        np.subtract(x, x[last], out=d)
        np.multiply(d, d, out=d)
        np.subtract(y, y[last], out=tmp)
        np.multiply(tmp, tmp, out=tmp)
        d += tmp
        np.subtract(z, z[last], out=tmp)
        np.multiply(tmp, tmp, out=tmp)
        d += tmp
        np.minimum(best, d, out=best)
        last = int(best.argmax())
        out[i] = last
    return out


def ball_group(points, centers, radius: float, k: int):
    """Up to ``k`` nearest neighbours within ``radius`` (inclusive) per centre.

    Short lists are padded by repeating the nearest neighbour. A centre with
    nothing in range falls back to its single nearest point. Returns
    ``(indices (M, k), counts (M,))``.
    """
    pts = np.asarray(points, dtype=float)
    ctr = np.asarray(centers, dtype=float).reshape(-1, 3)
    kk = min(k, len(pts))
    tree = cKDTree(pts)
    _, idx = tree.query(ctr, k=kk)
    idx = np.asarray(idx).reshape(len(ctr), kk)
    d2 = ((pts[idx] - ctr[:, None, :]) ** 2).sum(-1)
    # stable order: distance, then index
    order = np.lexsort((idx, d2), axis=-1)
    idx = np.take_along_axis(idx, order, axis=1)
    d2 = np.take_along_axis(d2, order, axis=1)
    within = d2 <= radius * radius
    counts = within.sum(axis=1)
    out = np.where(within, idx, idx[:, :1])
    if kk < k:
        out = np.concatenate([out, np.repeat(out[:, :1], k - kk, axis=1)], axis=1)
    return out, counts


@dataclass
class ProposerConfig:
    n_classes: int = 3
    in_features: int = 5  # height + painted scores (C + 1 for C=3)
    sa1_centers: int = 1024
    sa1_radius: float = 0.2
    sa1_k: int = 16
    sa1_mlp: tuple = (32, 32, 64)
    sa2_centers: int = 256
    sa2_radius: float = 0.4
    sa2_k: int = 16
    sa2_mlp: tuple = (64, 64, 128)
    vote_mlp: tuple = (128, 128)
    n_proposals: int = 48
    cluster_radius: float = 0.3
    cluster_k: int = 16
    cluster_mlp: tuple = (128, 128)
    head_mlp: tuple = (128, 128)
    near_threshold: float = 0.3
    far_threshold: float = 0.6
    lambda_obj: float = 0.5
    lambda_box: float = 1.0
    lambda_sem: float = 0.1


class Proposer(Module):
    def __init__(self, cfg: ProposerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.sa1 = Mlp((3 + cfg.in_features,) + tuple(cfg.sa1_mlp), rng, "proposer.sa1")
        self.sa2 = Mlp((3 + cfg.sa1_mlp[-1],) + tuple(cfg.sa2_mlp), rng, "proposer.sa2")
        d_seed = cfg.sa2_mlp[-1]
        self.vote_hidden = Mlp((d_seed,) + tuple(cfg.vote_mlp), rng, "proposer.vote")
        self.vote_out = Dense(cfg.vote_mlp[-1], 3 + d_seed, rng, "proposer.vote_out", init="zeros")
        self.cluster = Mlp((3 + d_seed,) + tuple(cfg.cluster_mlp), rng, "proposer.cluster")
        self.head_hidden = Mlp((cfg.cluster_mlp[-1],) + tuple(cfg.head_mlp), rng, "proposer.head")
        self.head_out = Dense(cfg.head_mlp[-1], 8 + cfg.n_classes, rng, "proposer.head_out", init="xavier")
        self.head_out.W.value *= 0.1

    @property
    def d_seed(self) -> int:
        return self.cfg.sa2_mlp[-1]

    # -- stages ---------------------------------------------------------------

    def encode_seeds(self, xyz, feats):
        """Two set-abstraction rounds. Returns ``(seed_xyz, seed_feat, cache)``."""
        cfg = self.cfg
        m1 = min(cfg.sa1_centers, len(xyz))
        c1 = fps(xyz, m1)
        pos1 = xyz[c1]
        nb1, _ = ball_group(xyz, pos1, cfg.sa1_radius, cfg.sa1_k)
        g1 = np.concatenate([(xyz[nb1] - pos1[:, None]) / cfg.sa1_radius, feats[nb1]], axis=-1)
        h1, cache1 = self.sa1.forward(g1)
        f1, arg1 = maxpool_set(h1)

        m2 = min(cfg.sa2_centers, m1)
        c2 = fps(pos1, m2)
        pos2 = pos1[c2]
        nb2, _ = ball_group(pos1, pos2, cfg.sa2_radius, cfg.sa2_k)
        g2 = np.concatenate([(pos1[nb2] - pos2[:, None]) / cfg.sa2_radius, f1[nb2]], axis=-1)
        h2, cache2 = self.sa2.forward(g2)
        f2, arg2 = maxpool_set(h2)
        cache = dict(cache1=cache1, arg1=arg1, k1=nb1.shape[1], m1=m1, nb2=nb2, cache2=cache2, arg2=arg2,
                     k2=nb2.shape[1])
        return pos2, f2, cache

    def encode_seeds_backward(self, d_feat, cache) -> None:
        cfg = self.cfg
        dh2 = maxpool_set_backward(d_feat, cache["arg2"], cache["k2"])
        dg2 = self.sa2.backward(dh2, cache["cache2"])
        df1 = scatter_rows(cache["nb2"], dg2[..., 3:], cache["m1"])
        dh1 = maxpool_set_backward(df1, cache["arg1"], cache["k1"])
        self.sa1.backward(dh1, cache["cache1"])

    def vote(self, seed_xyz, seed_feat):
        h, ch = self.vote_hidden.forward(seed_feat)
        out, co = self.vote_out.forward(h)
        vote_xyz = seed_xyz + out[:, :3]
        vote_feat = seed_feat + out[:, 3:]
        return vote_xyz, vote_feat, (ch, co)

    def vote_backward(self, d_xyz, d_feat, cache):
        ch, co = cache
        dout = np.concatenate([d_xyz, d_feat], axis=1)
        dh = self.vote_out.backward(dout, co)
        return d_feat + self.vote_hidden.backward(dh, ch)

    def cluster_and_propose(self, vote_xyz, vote_feat):
        cfg = self.cfg
        n_prop = min(cfg.n_proposals, len(vote_xyz))
        centers_idx = fps(vote_xyz, n_prop)
        cc = vote_xyz[centers_idx]
        nb, _ = ball_group(vote_xyz, cc, cfg.cluster_radius, cfg.cluster_k)
        g = np.concatenate([(vote_xyz[nb] - cc[:, None]) / cfg.cluster_radius, vote_feat[nb]], axis=-1)
        h, c_cl = self.cluster.forward(g)
        pooled, arg = maxpool_set(h)
        hh, c_hh = self.head_hidden.forward(pooled)
        out, c_out = self.head_out.forward(hh)
        log_size = out[:, 3:6]
        clipped = np.clip(log_size, *LOG_SIZE_RANGE)
        size = np.exp(clipped)
        result = dict(
            cluster_xyz=cc,
            center=cc + out[:, :3],
            size=size,
            heading=out[:, 6].copy(),
            obj_logit=out[:, 7].copy(),
            cls_logits=out[:, 8:].copy(),
        )
        cache = dict(centers_idx=centers_idx, nb=nb, c_cl=c_cl, arg=arg, k=nb.shape[1], c_hh=c_hh, c_out=c_out,
                     size=size, size_live=(log_size == clipped), n_votes=len(vote_xyz))
        return result, cache

    def cluster_backward(self, grads, cache):
        cfg = self.cfg
        dout = np.zeros((len(cache["centers_idx"]), 8 + cfg.n_classes))
        dcc = np.zeros((len(cache["centers_idx"]), 3))
        if "center" in grads:
            dout[:, :3] = grads["center"]
            dcc += grads["center"]
        if "size" in grads:
            dout[:, 3:6] = grads["size"] * cache["size"] * cache["size_live"]
        if "heading" in grads:
            dout[:, 6] = grads["heading"]
        if "obj_logit" in grads:
            dout[:, 7] = grads["obj_logit"]
        if "cls_logits" in grads:
            dout[:, 8:] = grads["cls_logits"]
        dhh = self.head_out.backward(dout, cache["c_out"])
        dpooled = self.head_hidden.backward(dhh, cache["c_hh"])
        dh = maxpool_set_backward(dpooled, cache["arg"], cache["k"])
        dg = self.cluster.backward(dh, cache["c_cl"])
        doff = dg[..., :3] / cfg.cluster_radius
        dcc -= doff.sum(axis=1)
        n = cache["n_votes"]
        d_vxyz = scatter_rows(cache["nb"], doff, n) + scatter_rows(cache["centers_idx"], dcc, n)
        d_vfeat = scatter_rows(cache["nb"], dg[..., 3:], n)
        return d_vxyz, d_vfeat

    # -- full pass ------------------------------------------------------------

    def forward(self, xyz, feats):
        if feats.shape[1] != self.cfg.in_features:
            raise ValueError(f"expected {self.cfg.in_features} point features, got {feats.shape[1]}")
        seed_xyz, seed_feat, c_seed = self.encode_seeds(xyz, feats)
        vote_xyz, vote_feat, c_vote = self.vote(seed_xyz, seed_feat)
        out, c_cluster = self.cluster_and_propose(vote_xyz, vote_feat)
        out.update(seed_xyz=seed_xyz, vote_xyz=vote_xyz)
        return out, (c_seed, c_vote, c_cluster)

    def backward(self, grads, cache) -> None:
        c_seed, c_vote, c_cluster = cache
        d_vxyz, d_vfeat = self.cluster_backward(grads, c_cluster)
        if "vote_xyz" in grads:
            d_vxyz = d_vxyz + grads["vote_xyz"]
        d_seed_feat = self.vote_backward(d_vxyz, d_vfeat, c_vote)
        self.encode_seeds_backward(d_seed_feat, c_seed)


def to_proposals(out) -> ProposalSet:
    boxes = np.concatenate([out["center"], out["size"], wrap_angle(out["heading"])[:, None]], axis=1)
    return ProposalSet(boxes, softmax(out["cls_logits"]), sigmoid(out["obj_logit"]))


def proposal_box_grads(d_boxes) -> dict:
    """Split a (P, 7) gradient on proposal boxes into proposer output grads."""
    return {"center": d_boxes[:, :3], "size": d_boxes[:, 3:6], "heading": d_boxes[:, 6]}


def rpn_loss(out, gt_boxes, gt_labels, cfg: ProposerConfig):
    """Voting, objectness, box and semantic losses of the first stage.

    Returns ``(total, parts, grads)`` where ``grads`` is keyed like the
    proposer outputs.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=float).reshape(-1, 7)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    seeds, votes = out["seed_xyz"], out["vote_xyz"]
    cc = out["cluster_xyz"]
    n_prop = len(cc)
    grads = {k: np.zeros_like(out[k]) for k in ("vote_xyz", "center", "size", "heading", "obj_logit",
                                                "cls_logits")}
    parts = {"vote": 0.0, "objectness": 0.0, "box": 0.0, "sem_cls": 0.0}

    if len(gt_boxes):
        inside = np.stack([contains(b, seeds) for b in gt_boxes], axis=1)  # (S, G)
        d_seed = ((seeds[:, None, :] - gt_boxes[None, :, :3]) ** 2).sum(-1)
        d_seed = np.where(inside, d_seed, np.inf)
        obj_seed = inside.any(axis=1)
        if obj_seed.any():
            tgt = gt_boxes[d_seed[obj_seed].argmin(axis=1), :3]
            diff = votes[obj_seed] - tgt
            n = obj_seed.sum()
            parts["vote"] = float(np.abs(diff).sum() / n)
            grads["vote_xyz"][obj_seed] = np.sign(diff) / n
        dist = np.sqrt(((cc[:, None, :] - gt_boxes[None, :, :3]) ** 2).sum(-1))
        match = dist.argmin(axis=1)
        nearest = dist[np.arange(n_prop), match]
        positive = nearest < cfg.near_threshold
        negative = nearest > cfg.far_threshold
    else:
        match = np.zeros(n_prop, dtype=np.int64)
        positive = np.zeros(n_prop, dtype=bool)
        negative = np.ones(n_prop, dtype=bool)

    weight = (positive | negative).astype(float)
    parts["objectness"], grads["obj_logit"] = bce_with_logits(out["obj_logit"], positive.astype(float), weight)

    if positive.any():
        n_pos = positive.sum()
        g = gt_boxes[match[positive]]
        lc, gc = smooth_l1(out["center"][positive], g[:, :3])
        ls, gs = smooth_l1(out["size"][positive], g[:, 3:6])
        dh = fold_heading(out["heading"][positive] - g[:, 6])
        lh, gh = smooth_l1(dh, 0.0)
        parts["box"] = float((lc + ls + lh) / n_pos)
        grads["center"][positive] = gc / n_pos
        grads["size"][positive] = gs / n_pos
        grads["heading"][positive] = gh / n_pos
        labels = np.full(n_prop, -1)
        labels[positive] = gt_labels[match[positive]]
        parts["sem_cls"], grads["cls_logits"] = cross_entropy(out["cls_logits"], labels, ignore_index=-1)

    total = (parts["vote"] + cfg.lambda_obj * parts["objectness"] + cfg.lambda_box * parts["box"]
             + cfg.lambda_sem * parts["sem_cls"])
    grads["obj_logit"] = grads["obj_logit"] * cfg.lambda_obj
    for k in ("center", "size", "heading"):
        grads[k] = grads[k] * cfg.lambda_box
    grads["cls_logits"] = grads["cls_logits"] * cfg.lambda_sem
    return total, parts, grads
