"""Cascade orchestration: (2D->)3D->2D->3D inference, recursion, joint training."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .camera import height_feature
from .data import IGNORE, Scene, augment, sample_points
from .fusion import (FusionMap, batch_refine_features, batch_refine_features_backward, build_3d_to_2d_map,
                     fusion_map_backward, lookup_scores)
from .geom3d import ProposalSet, iou3d, nms3d, wrap_angle
from .metrics import ConfusionMatrix, build_report
from .nncore import AdamW, clip_grad_norm, global_grad_norm, softmax, softmax_backward
from .proposer import Proposer, ProposerConfig, proposal_box_grads, rpn_loss, to_proposals
from .refiner import RefinerConfig, RefinerNet, apply_residuals, fusion_score, rcnn_loss
from .seg2d import AUX, MAIN, HeadPolicy, SegConfig, SegNet, select_fusion_output, seg_loss

log = logging.getLogger(__name__)

SEG2D_INITIAL = "SEG2D_INITIAL"
PROPOSE_3D = "PROPOSE_3D"
SEG2D_FUSED = "SEG2D_FUSED"
REFINE_3D = "REFINE_3D"
STAGE_TAGS = (SEG2D_INITIAL, PROPOSE_3D, SEG2D_FUSED, REFINE_3D)


class ConfigError(ValueError):
    pass


def stage_list(initial: bool = False, fused: bool = True, iters: int = 1) -> tuple[str, ...]:
    unit = (PROPOSE_3D, SEG2D_FUSED, REFINE_3D) if fused else (PROPOSE_3D, REFINE_3D)
    return ((SEG2D_INITIAL,) if initial else ()) + unit * iters


def parse_stages(stages, recursion_iters: int) -> tuple[bool, bool]:
    """Validate the stage grammar; returns ``(has_initial, has_fused)``.

    Accepted: optional leading SEG2D_INITIAL, then the unit
    (PROPOSE_3D, SEG2D_FUSED, REFINE_3D) repeated ``recursion_iters`` times.
    The unit may drop SEG2D_FUSED (3D->3D ablation) as long as every
    repetition does so.
    """
    stages = tuple(stages)
    unknown = [s for s in stages if s not in STAGE_TAGS]
    if unknown:
        raise ConfigError(f"unknown stage tags {unknown}")
    if recursion_iters < 1:
        raise ConfigError("recursion_iters must be >= 1")
    initial = bool(stages) and stages[0] == SEG2D_INITIAL
    body = stages[1:] if initial else stages
    for fused in (True, False):
        if body == stage_list(False, fused, recursion_iters):
            return initial, fused
    raise ConfigError(f"stage sequence {list(stages)} does not match the cascade grammar "
                      f"with R={recursion_iters}")


@dataclass
class OptimConfig:
    lr: float = 5e-4
    epochs: int = 12
    batch_size: int = 8
    weight_decay_3d: float = 0.01
    weight_decay_2d: float = 1e-4
    clip_norm: float = 10.0
    decay_at: tuple = (2 / 3, 7 / 8)
    decay_factor: float = 0.1

    def lr_at(self, epoch: int) -> float:
        steps = sum(epoch >= round(f * self.epochs) for f in self.decay_at)
        return self.lr * self.decay_factor ** steps


@dataclass
class CascadeConfig:
    n_classes: int = 3
    stages: tuple = stage_list()
    recursion_iters: int = 1
    n_points: int = 4096
    n_per_roi: int = 128
    n_per_roi_test: int | None = None
    n_per_box_fusion: int = 512
    enlarge_factor: float = 1.2
    fusion_dropout: float = 0.5
    head_policy: HeadPolicy = field(default_factory=HeadPolicy)
    proposer: dict = field(default_factory=dict)  # overrides for ProposerConfig
    refiner_pre_pool: tuple = (64, 64, 256)
    refiner_post_pool: tuple = (128, 128)
    head_dropout: float = 0.1
    seg_widths: tuple = (16, 32, 32, 64)
    optim: OptimConfig = field(default_factory=OptimConfig)
    ensemble_nms: float = 0.25
    final_nms: float = 0.25
    backprop_fusion_map: bool = True
    compute_dtype: str = "float32"  # network arithmetic; float64 for exact checks
    gt_rois: int = 2  # jittered copies of each GT box added to the training RoIs
    gt_roi_jitter: float = 0.15
    oracle_segmenter: bool = False
    seed: int = 0

    def __post_init__(self):
        self.stages = tuple(self.stages)
        self.proposer = {k: tuple(v) if isinstance(v, list) else v for k, v in self.proposer.items()}
        self.has_initial, self.has_fused = parse_stages(self.stages, self.recursion_iters)
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        if self.compute_dtype not in ("float32", "float64"):
            raise ConfigError("compute_dtype must be float32 or float64")
        if not 0 <= self.fusion_dropout <= 1:
            raise ConfigError("fusion_dropout must lie in [0, 1]")
        if self.enlarge_factor < 1:
            raise ConfigError("enlarge_factor must be >= 1")

    @property
    def n_scores(self) -> int:
        return self.n_classes + 1

    def proposer_config(self) -> ProposerConfig:
        try:
            return ProposerConfig(n_classes=self.n_classes, in_features=1 + self.n_scores, **self.proposer)
        except TypeError as exc:
            raise ConfigError(f"bad proposer option: {exc}") from None

    def refiner_config(self) -> RefinerConfig:
        return RefinerConfig(n_classes=self.n_classes, n_scores=self.n_scores, pre_pool=tuple(self.refiner_pre_pool),
                             post_pool=tuple(self.refiner_post_pool), dropout=self.head_dropout)

    def seg_config(self) -> SegConfig:
        return SegConfig(n_classes=self.n_classes, widths=tuple(self.seg_widths), dropout=self.head_dropout)

    def with_stages(self, initial=None, fused=None, iters=None) -> "CascadeConfig":
        initial = self.has_initial if initial is None else initial
        fused = self.has_fused if fused is None else fused
        iters = self.recursion_iters if iters is None else iters
        return dataclasses.replace(self, stages=stage_list(initial, fused, iters), recursion_iters=iters)

    # -- JSON -----------------------------------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stages"] = list(self.stages)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "CascadeConfig":
        raw = _expand_aliases(dict(raw))
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            if "head_policy" in raw:
                raw["head_policy"] = HeadPolicy(**raw["head_policy"])
            if "optim" in raw:
                optim = dict(raw["optim"])
                if "decay_at" in optim:
                    optim["decay_at"] = tuple(optim["decay_at"])
                raw["optim"] = OptimConfig(**optim)
            for key in ("refiner_pre_pool", "refiner_post_pool", "seg_widths", "stages"):
                if key in raw:
                    raw[key] = tuple(raw[key])
            cfg = cls(**raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        cfg.proposer_config()
        return cfg


def _expand_aliases(raw: dict) -> dict:
    """Map the short config-file keys onto dataclass fields."""
    if "R" in raw:
        raw["recursion_iters"] = raw.pop("R")
    if "optimizer" in raw:
        raw["optim"] = raw.pop("optimizer")
    proposer = dict(raw.get("proposer", {}))
    if "radii" in raw:
        radii = raw.pop("radii")
        if not isinstance(radii, (list, tuple)) or len(radii) != 3:
            raise ConfigError("radii must list [sa1, sa2, cluster] radii")
        proposer.update(sa1_radius=radii[0], sa2_radius=radii[1], cluster_radius=radii[2])
    if "lambda" in raw:
        weights = raw.pop("lambda")
        bad = set(weights) - {"obj", "box", "sem"}
        if bad:
            raise ConfigError(f"unknown lambda weights {sorted(bad)}")
        proposer.update({f"lambda_{k}": v for k, v in weights.items()})
    if proposer:
        raw["proposer"] = proposer
    if "dropout" in raw:
        drop = raw.pop("dropout")
        bad = set(drop) - {"fusion", "head"}
        if bad:
            raise ConfigError(f"unknown dropout keys {sorted(bad)}")
        if "fusion" in drop:
            raw["fusion_dropout"] = drop["fusion"]
        if "head" in drop:
            raw["head_dropout"] = drop["head"]
    return raw


@dataclass
class CascadeModels:
    proposer: Proposer
    refiner: RefinerNet
    seg: SegNet | None
    seg_initial: SegNet | None

    @classmethod
    def create(cls, cfg: CascadeConfig, seed: int | None = None) -> "CascadeModels":
        rng = np.random.default_rng([cfg.seed if seed is None else seed, 0])
        proposer = Proposer(cfg.proposer_config(), rng)
        refiner = RefinerNet(cfg.refiner_config(), rng)
        seg = SegNet(cfg.seg_config(), rng, "seg") if cfg.has_fused else None
        seg0 = SegNet(cfg.seg_config(), rng, "seg_initial") if cfg.has_initial else None
        models = cls(proposer, refiner, seg, seg0)
        for m in models.modules_3d() + models.modules_2d():
            m.astype(cfg.compute_dtype)
        return models

    def modules_3d(self):
        return [self.proposer, self.refiner]

    def modules_2d(self):
        return [m for m in (self.seg, self.seg_initial) if m is not None]

    def parameters(self):
        return [p for m in self.modules_3d() + self.modules_2d() for p in m.parameters()]

    def state_dict(self) -> dict:
        out = {}
        for m in self.modules_3d() + self.modules_2d():
            out.update(m.state_dict())
        return out

    def load_state_dict(self, state) -> None:
        for m in self.modules_3d() + self.modules_2d():
            m.load_state_dict(state)


@dataclass
class Detection:
    box: np.ndarray
    cls: int
    score: float

    def as_tuple(self):
        return self.box, self.cls, self.score


@dataclass
class CascadeResult:
    detections: list[Detection]
    proposals: list[ProposalSet]  # per iteration
    refined: list[np.ndarray]  # per iteration refined boxes
    pool: list[tuple[np.ndarray, int, float]]  # pre-NMS ensemble pool
    segmaps: dict[str, np.ndarray]  # stage name -> H x W x (C+1) probabilities

    @property
    def final_segmap(self):
        for key in sorted((k for k in self.segmaps if k.startswith("fused")), reverse=True):
            return self.segmaps[key]
        return self.segmaps.get("initial")


# ----------------------------------------------------------------------------
# helpers

def empty_fusion_map(rgbd, n_classes: int) -> FusionMap:
    return build_3d_to_2d_map(ProposalSet(np.zeros((0, 7)), np.zeros((0, n_classes)), np.zeros(0)), _NO_CLOUD,
                              1, rgbd, n_classes=n_classes)


class _EmptyCloud:
    xyz = np.zeros((0, 3))

    def __len__(self):
        return 0


_NO_CLOUD = _EmptyCloud()


def prepare_cloud(scene: Scene, n_points: int, rng):
    cloud = sample_points(scene.cloud, n_points, rng)
    cloud.height = height_feature(cloud)
    return cloud


def point_features(cloud, scores) -> np.ndarray:
    return np.concatenate([cloud.height[:, None], scores], axis=1)


def one_hot_labels(labels, n_scores: int) -> np.ndarray:
    """GT label map as per-pixel distributions (IGNORE -> uniform)."""
    out = np.full(labels.shape + (n_scores,), 1.0 / n_scores)
    ok = labels != IGNORE
    out[ok] = np.eye(n_scores)[labels[ok]]
    return out


def segmap_labels(probs) -> np.ndarray:
    """Argmax labels of a stored (float32) probability map."""
    return np.asarray(probs, dtype=np.float32).argmax(-1)


def jitter_boxes(boxes, copies: int, scale: float, rng) -> np.ndarray:
    """Noisy copies of ``boxes``: centre shifts and log-size noise relative to
    the extents, plus a heading perturbation."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 7)
    if copies <= 0 or len(boxes) == 0:
        return np.zeros((0, 7))
    out = np.repeat(boxes, copies, axis=0)
    n = len(out)
    ext = out[:, [3, 5, 4]]
    out[:, :3] += rng.normal(0.0, scale, (n, 3)) * ext
    out[:, 3:6] *= np.exp(rng.normal(0.0, scale, (n, 3)))
    out[:, 6] = wrap_angle(out[:, 6] + rng.normal(0.0, scale, n))
    return out


def _seg_probs(net: SegNet, channels, train, rng):
    main, aux, cache = net.forward(channels, train, rng)
    return main, aux, softmax(main), softmax(aux), cache


# ----------------------------------------------------------------------------
# inference

def run_cascade(scene: Scene, models: CascadeModels, cfg: CascadeConfig, seed: int = 0,
                iters: int | None = None) -> CascadeResult:
    """Run the configured stages on one scene (test phase, no augmentation)."""
    iters = cfg.recursion_iters if iters is None else iters
    n_roi = cfg.n_per_roi_test or cfg.n_per_roi
    cloud = prepare_cloud(scene, cfg.n_points, np.random.default_rng([seed, 0]))
    segmaps = {}
    scores = np.zeros((len(cloud), cfg.n_scores))
    if cfg.has_initial:
        fmap0 = empty_fusion_map(scene.rgbd, cfg.n_classes)
        _, _, pm, pa, _ = _seg_probs(models.seg_initial, fmap0.channels, False, None)
        segmaps["initial"] = select_fusion_output(pm, pa, cfg.head_policy, "test")
        scores = lookup_scores(cloud.pixel, segmaps["initial"])[0]

    proposals, refined, pool = [], [], []
    for k in range(iters):
        rng = np.random.default_rng([seed, 1 + k])
        out, _ = models.proposer.forward(cloud.xyz, point_features(cloud, scores))
        props = to_proposals(out)
        proposals.append(props)
        if cfg.has_fused:
            if cfg.oracle_segmenter:
                segmap = one_hot_labels(scene.seg_gt, cfg.n_scores)
            else:
                fmap = build_3d_to_2d_map(props, cloud, cfg.n_per_box_fusion, scene.rgbd, rng)
                _, _, pm, pa, _ = _seg_probs(models.seg, fmap.channels, False, None)
                segmap = select_fusion_output(pm, pa, cfg.head_policy, "test")
            segmaps[f"fused_{k}"] = segmap
            roi_scores = lookup_scores(cloud.pixel, segmap)[0]
        else:
            roi_scores = np.zeros_like(scores)
        feats, _, _ = batch_refine_features(props.boxes, cloud, roi_scores, n_roi, rng, cfg.enlarge_factor)
        ro, _ = models.refiner.forward(feats, False, None)
        boxes = apply_residuals(props.boxes, ro["residuals"])
        cls, score = fusion_score(ro["cls_logits"], ro["iou_pred"], cfg.n_classes)
        props.pred_iou = ro["iou_pred"]
        refined.append(boxes)
        pool.extend((b, int(c), float(s)) for b, c, s in zip(boxes, cls, score))
        if cfg.has_fused:
            scores = roi_scores  # next iteration paints with the fused 2D output

    keep = nms3d([p[0] for p in pool], [p[2] for p in pool], cfg.ensemble_nms)
    survivors = [pool[i] for i in keep]
    detections = []
    for c in range(cfg.n_classes):
        members = [d for d in survivors if d[1] == c]
        for i in nms3d([d[0] for d in members], [d[2] for d in members], cfg.final_nms):
            detections.append(Detection(*members[i]))
    detections.sort(key=lambda d: -d.score)
    return CascadeResult(detections, proposals, refined, pool, segmaps)


def evaluate(models: CascadeModels, scenes, cfg: CascadeConfig, iters: int | None = None, timing: bool = False):
    """Run the cascade over ``scenes`` and build the JSON-style report.

    Every scene uses ``cfg.seed`` so per-scene results do not depend on
    evaluation order (the CLI ``infer`` path relies on this).
    """
    t0 = time.perf_counter()
    dets, gts = {}, {}
    conf = ConfusionMatrix(cfg.n_scores)
    extra = {"mean_iou_proposals": [], "mean_iou_refined": []}
    for i, scene in enumerate(scenes):
        res = run_cascade(scene, models, cfg, seed=cfg.seed, iters=iters)
        dets[i] = [d.as_tuple() for d in res.detections]
        gts[i] = [(b, int(c)) for b, c in zip(scene.boxes, scene.labels)]
        seg = res.final_segmap
        if seg is not None:
            conf.update(segmap_labels(seg), scene.seg_gt)
        if len(scene.boxes):
            for key, boxes in (("mean_iou_proposals", res.proposals[0].boxes), ("mean_iou_refined", res.refined[0])):
                extra[key].extend(max(iou3d(b, g) for g in scene.boxes) for b in boxes)
    miou = conf.iou()[1] if conf.counts.sum() else None
    report = build_report(dets, gts, miou, time.perf_counter() - t0 if timing else None)
    return report, dets, extra


# ----------------------------------------------------------------------------
# training

@dataclass
class StepLosses:
    total: float
    rpn: float
    seg: float
    rcnn: float
    parts: dict


def train_step_sample(scene: Scene, models: CascadeModels, cfg: CascadeConfig, rng) -> StepLosses:
    """Forward + backward for one sample; gradients accumulate in the models."""
    aug = augment(scene, rng)
    cloud = prepare_cloud(aug, cfg.n_points, rng)
    n_scores = cfg.n_scores
    parts = {}
    seg_total = 0.0

    scores = np.zeros((len(cloud), n_scores))
    if cfg.has_initial:
        fmap0 = empty_fusion_map(aug.rgbd, cfg.n_classes)
        m0, a0, pm0, pa0, c0 = _seg_probs(models.seg_initial, fmap0.channels, True, rng)
        l0, p0, gm0, ga0 = seg_loss(m0, a0, aug.seg_gt)
        models.seg_initial.backward(gm0, ga0, c0)
        seg_total += l0
        parts["seg_initial"] = p0
        if rng.random() >= cfg.fusion_dropout:
            scores = lookup_scores(cloud.pixel, select_fusion_output(pm0, pa0, cfg.head_policy, "train"))[0]

    out, pcache = models.proposer.forward(cloud.xyz, point_features(cloud, scores))
    l_rpn, p_rpn, g_prop = rpn_loss(out, aug.boxes, aug.labels, models.proposer.cfg)
    parts["rpn"] = p_rpn
    props = to_proposals(out)
    d_boxes = np.zeros_like(props.boxes)
    d_probs = np.zeros_like(props.class_probs)

    roi_scores = np.zeros_like(scores)
    if cfg.has_fused:
        if cfg.oracle_segmenter:
            segmap = one_hot_labels(aug.seg_gt, n_scores)
        else:
            fmap = build_3d_to_2d_map(props, cloud, cfg.n_per_box_fusion, aug.rgbd, rng)
            m, a, pm, pa, c = _seg_probs(models.seg, fmap.channels, True, rng)
            l_seg, p_seg, gm, ga = seg_loss(m, a, aug.seg_gt)
            d_in = models.seg.backward(gm, ga, c)
            if cfg.backprop_fusion_map:
                dp, db = fusion_map_backward(d_in, fmap, props, cloud)
                d_probs += dp
                d_boxes += db
            seg_total += l_seg
            parts["seg"] = p_seg
            segmap = select_fusion_output(pm, pa, cfg.head_policy, "train")
        if rng.random() >= cfg.fusion_dropout:
            roi_scores = lookup_scores(cloud.pixel, segmap)[0]

    n_prop = len(props)
    rois = np.concatenate([props.boxes, jitter_boxes(aug.boxes, cfg.gt_rois, cfg.gt_roi_jitter, rng)])
    feats, idx, degenerate = batch_refine_features(rois, cloud, roi_scores, cfg.n_per_roi, rng, cfg.enlarge_factor)
    ro, rcache = models.refiner.forward(feats, True, rng)
    l_rcnn, p_rcnn, g_ref, _ = rcnn_loss(rois, ro, aug.boxes, aug.labels, models.refiner.cfg)
    parts["rcnn"] = p_rcnn
    d_feats = models.refiner.backward(g_ref, rcache)[:n_prop]
    d_boxes += batch_refine_features_backward(d_feats, props.boxes, cloud, idx[:n_prop], degenerate[:n_prop],
                                              cfg.enlarge_factor)

    for key, g in proposal_box_grads(d_boxes).items():
        g_prop[key] = g_prop[key] + g
    g_prop["cls_logits"] = g_prop["cls_logits"] + softmax_backward(d_probs, props.class_probs)
    models.proposer.backward(g_prop, pcache)
    total = l_rpn + seg_total + l_rcnn
    return StepLosses(total, l_rpn, seg_total, l_rcnn, parts)


@dataclass
class TrainResult:
    models: CascadeModels
    curve: list[dict]

    @property
    def initial_loss(self) -> float:
        return self.curve[0]["total"]

    def final_loss(self, last: int | None = None) -> float:
        """Mean batch loss over the last epoch (or the last ``last`` steps)."""
        if last is None:
            final_epoch = self.curve[-1]["epoch"]
            rows = [r for r in self.curve if r["epoch"] == final_epoch]
        else:
            rows = self.curve[-last:]
        return float(np.mean([r["total"] for r in rows]))


def train(scenes, cfg: CascadeConfig, progress=None, on_epoch=None) -> TrainResult:
    """Joint end-to-end training of every network in the cascade.

    One AdamW optimiser with separate weight decay for 3D and 2D parts, a
    step schedule at fixed fractions of the epoch budget, global-norm
    gradient clipping and all randomness drawn from ``cfg.seed``.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("no training scenes")
    models = CascadeModels.create(cfg)
    oc = cfg.optim
    p3d = [p for m in models.modules_3d() for p in m.parameters()]
    p2d = [p for m in models.modules_2d() for p in m.parameters()]
    opt = AdamW([(p3d, oc.weight_decay_3d), (p2d, oc.weight_decay_2d)], lr=oc.lr)
    params = p3d + p2d
    curve = []
    step = 0
    for epoch in range(oc.epochs):
        lr = oc.lr_at(epoch)
        order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(len(scenes))
        for start in range(0, len(order), oc.batch_size):
            batch = order[start:start + oc.batch_size]
            for p in params:
                p.zero_grad()
            losses = [train_step_sample(scenes[i], models, cfg, np.random.default_rng([cfg.seed, 2, epoch, int(i)]))
                      for i in batch]
            for p in params:
                p.grad /= len(batch)
            norm = global_grad_norm(params)
            clip_grad_norm(params, oc.clip_norm)
            opt.step(lr)
            row = {
                "step": step, "epoch": epoch, "lr": lr, "grad_norm": norm,
                "total": float(np.mean([l.total for l in losses])),
                "rpn": float(np.mean([l.rpn for l in losses])),
                "seg": float(np.mean([l.seg for l in losses])),
                "rcnn": float(np.mean([l.rcnn for l in losses])),
            }
            curve.append(row)
            if progress:
                progress(row)
            step += 1
        log.info("epoch %d lr %.2e loss %.4f", epoch, lr, np.mean([r["total"] for r in curve if r["epoch"] == epoch]))
        if on_epoch:
            on_epoch(epoch, models)
    return TrainResult(models, curve)


def train_seg_only(scenes, cfg: CascadeConfig, progress=None) -> SegNet:
    """2D-only baseline: the segmenter on RGB-D with an empty 3D block."""
    rng0 = np.random.default_rng([cfg.seed, 0])
    net = SegNet(cfg.seg_config(), rng0, "seg_2d_only").astype(cfg.compute_dtype)
    oc = cfg.optim
    params = net.parameters()
    opt = AdamW([(params, oc.weight_decay_2d)], lr=oc.lr)
    for epoch in range(oc.epochs):
        lr = oc.lr_at(epoch)
        order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(len(scenes))
        for start in range(0, len(order), oc.batch_size):
            batch = order[start:start + oc.batch_size]
            net.zero_grad()
            total = 0.0
            for i in batch:
                rng = np.random.default_rng([cfg.seed, 2, epoch, int(i)])
                aug = augment(scenes[i], rng)
                fmap = empty_fusion_map(aug.rgbd, cfg.n_classes)
                m, a, c = net.forward(fmap.channels, True, rng)
                loss, _, gm, ga = seg_loss(m, a, aug.seg_gt)
                net.backward(gm, ga, c)
                total += loss
            for p in params:
                p.grad /= len(batch)
            clip_grad_norm(params, oc.clip_norm)
            opt.step(lr)
            if progress:
                progress({"epoch": epoch, "total": total / len(batch)})
    return net


def seg_only_miou(net: SegNet, scenes, cfg: CascadeConfig, source: str = "ensemble") -> float:
    conf = ConfusionMatrix(cfg.n_scores)
    policy = HeadPolicy(AUX, source)
    for scene in scenes:
        fmap = empty_fusion_map(scene.rgbd, cfg.n_classes)
        _, _, pm, pa, _ = _seg_probs(net, fmap.channels, False, None)
        conf.update(select_fusion_output(pm, pa, policy, "test").argmax(-1), scene.seg_gt)
    return conf.iou()[1]


__all__ = ["AUX", "MAIN", "CascadeConfig", "CascadeModels", "ConfigError", "OptimConfig", "run_cascade",
           "train", "evaluate", "stage_list", "parse_stages", "train_seg_only", "seg_only_miou"]
