"""Synthetic RGB-D scenes, 2D label generation, point sampling, augmentation."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .camera import Intrinsics, PointCloud, Pose, depth_to_cloud
from .geom3d import Box3D, bev_iou, contains, fold_heading, to_canonical, wrap_angle

IGNORE = -1


def background_label(n_classes: int) -> int:
    return n_classes


# name, (l range), (w range), (h range), albedo
CLASS_TEMPLATES = [
    ("table", (1.0, 1.5), (0.6, 0.9), (0.70, 0.80), (0.60, 0.42, 0.28)),
    ("chair", (0.45, 0.65), (0.45, 0.60), (0.80, 1.00), (0.30, 0.45, 0.65)),
    ("sofa", (1.6, 2.1), (0.8, 1.0), (0.55, 0.75), (0.55, 0.30, 0.45)),
    ("bed", (1.9, 2.2), (1.4, 1.8), (0.40, 0.60), (0.70, 0.68, 0.55)),
    ("dresser", (0.8, 1.2), (0.40, 0.55), (0.90, 1.30), (0.45, 0.36, 0.30)),
    ("night_stand", (0.40, 0.55), (0.35, 0.50), (0.45, 0.60), (0.50, 0.60, 0.32)),
    ("bookshelf", (0.8, 1.2), (0.30, 0.40), (1.40, 1.90), (0.36, 0.26, 0.20)),
    ("desk", (1.1, 1.5), (0.6, 0.8), (0.70, 0.78), (0.32, 0.60, 0.55)),
    ("toilet", (0.60, 0.75), (0.40, 0.50), (0.70, 0.85), (0.85, 0.85, 0.90)),
    ("bathtub", (1.5, 1.8), (0.70, 0.85), (0.50, 0.60), (0.72, 0.80, 0.90)),
]
GROUND_ALBEDO = (0.50, 0.50, 0.48)
SKY_COLOR = (0.80, 0.88, 0.95)
LIGHT_DIR = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])


def class_template(c: int):
    if c < 0:
        raise ValueError(f"class id must be non-negative, got {c}")
    name, l, w, h, albedo = CLASS_TEMPLATES[c % len(CLASS_TEMPLATES)]
    if c >= len(CLASS_TEMPLATES):
        # wrap-around classes get a shifted colour so they stay distinguishable
        shift = 0.13 * (c // len(CLASS_TEMPLATES))
        albedo = tuple((a + shift) % 1.0 for a in albedo)
        name = f"{name}_{c // len(CLASS_TEMPLATES)}"
    return name, l, w, h, albedo


@dataclass
class SynthConfig:
    n_classes: int = 3
    min_boxes: int = 2
    max_boxes: int = 6
    image_height: int = 96
    image_width: int = 128
    focal: float = 100.0
    camera_height: float = 1.4
    camera_pitch_deg: float = 22.0
    depth_range: tuple[float, float] = (2.0, 6.0)
    lateral_fraction: float = 0.8  # of the half field of view
    yaw_range: tuple[float, float] = (-np.pi / 4, np.pi / 4)
    max_bev_overlap: float = 0.05
    max_retries: int = 50
    annotation_margin: float = 0.02
    rgb_noise: float = 0.05
    albedo_jitter: float = 0.12
    depth_dropout: float = 0.05
    max_range: float = 12.0

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.focal, self.focal, self.image_width / 2, self.image_height / 2,
                          self.image_width, self.image_height)

    def pose(self) -> Pose:
        return Pose.looking_forward(self.camera_height, np.deg2rad(self.camera_pitch_deg))


@dataclass
class Scene:
    rgbd: np.ndarray  # (H, W, 4) float32, depth NaN where absent
    K: Intrinsics
    T: Pose
    boxes: np.ndarray  # (k, 7)
    labels: np.ndarray  # (k,)
    n_classes: int
    cloud: PointCloud | None = None
    seg_gt: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=float).reshape(-1, 7)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.labels):
            raise ValueError("boxes and labels differ in length")
        if (self.boxes[:, 3:6] <= 0).any():
            raise ValueError("gt boxes need positive extents")
        if self.cloud is None:
            self.cloud = depth_to_cloud(self.depth, self.K, self.T)
        if self.seg_gt is None:
            self.seg_gt = gen_2d_gt(self)

    @property
    def depth(self) -> np.ndarray:
        return self.rgbd[..., 3]

    @property
    def rgb(self) -> np.ndarray:
        return self.rgbd[..., :3]

    @property
    def gt_boxes(self) -> list[tuple[Box3D, int]]:
        return [(Box3D.from_array(b), int(c)) for b, c in zip(self.boxes, self.labels)]


canonical_heading = fold_heading


def render(boxes, albedos, K: Intrinsics, T: Pose, ground_albedo=GROUND_ALBEDO, max_range=12.0):
    """Ray-cast boxes and the z=0 ground plane through every pixel centre.

    Returns ``(depth, rgb, hit)`` where depth is camera z (NaN on a miss),
    rgb is noise-free shaded albedo and ``hit`` is -2 for a miss, -1 for
    ground and the box index otherwise.
    """
    h, w = K.height, K.width
    rows, cols = np.mgrid[0:h, 0:w]
    dirs_cam = np.stack([(cols + 0.5 - K.cx) / K.fx, (rows + 0.5 - K.cy) / K.fy, np.ones((h, w))], -1)
    dirs = dirs_cam.reshape(-1, 3) @ T.rotation  # camera z component is 1, so t == depth
    origin = T.position
    n = len(dirs)
    best_t = np.full(n, np.inf)
    hit = np.full(n, -2)
    normals = np.zeros((n, 3))

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dirs[:, 2] < 0, -origin[2] / dirs[:, 2], np.inf)
    t_ground[t_ground > max_range] = np.inf
    sel = np.isfinite(t_ground)
    best_t[sel] = t_ground[sel]
    hit[sel] = -1
    normals[sel] = (0.0, 0.0, 1.0)

    for k, box in enumerate(np.asarray(boxes, dtype=float).reshape(-1, 7)):
        o = to_canonical(origin, box)
        c, s = np.cos(box[6]), np.sin(box[6])
        d = np.stack([c * dirs[:, 0] + s * dirs[:, 1], -s * dirs[:, 0] + c * dirs[:, 1], dirs[:, 2]], -1)
        half = np.array([box[3], box[5], box[4]]) / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - o) / d
            t2 = (half - o) / d
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        parallel = d == 0
        inside_slab = np.abs(o) <= half
        lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), lo)
        hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), hi)
        t_in = lo.max(axis=1)
        t_out = hi.min(axis=1)
        sel = (t_in <= t_out) & (t_in > 0) & (t_in < best_t)
        if not sel.any():
            continue
        axis = lo[sel].argmax(axis=1)
        local_n = np.zeros((sel.sum(), 3))
        local_n[np.arange(len(axis)), axis] = -np.sign(d[sel, axis])
        world_n = np.stack([c * local_n[:, 0] - s * local_n[:, 1], s * local_n[:, 0] + c * local_n[:, 1],
                            local_n[:, 2]], -1)
        best_t[sel] = t_in[sel]
        hit[sel] = k
        normals[sel] = world_n

    shade = 0.35 + 0.65 * np.clip(normals @ LIGHT_DIR, 0.0, None)
    palette = np.vstack([np.asarray(albedos, dtype=float).reshape(-1, 3), ground_albedo, SKY_COLOR])
    colour = palette[np.where(hit == -2, len(palette) - 1, np.where(hit == -1, len(palette) - 2, hit))]
    rgb = np.where((hit == -2)[:, None], colour, colour * shade[:, None])
    depth = np.where(np.isfinite(best_t), best_t, np.nan)
    return depth.reshape(h, w), rgb.reshape(h, w, 3), hit.reshape(h, w)


def _place_boxes(rng, cfg: SynthConfig):
    k = int(rng.integers(cfg.min_boxes, cfg.max_boxes + 1)) if cfg.max_boxes > 0 else 0
    tan_half = (cfg.image_width / 2) / cfg.focal
    boxes, labels = [], []
    for _ in range(k):
        for _attempt in range(cfg.max_retries):
            c = int(rng.integers(cfg.n_classes))
            _, lr, wr, hr, _ = class_template(c)
            l, w, h = rng.uniform(*lr), rng.uniform(*wr), rng.uniform(*hr)
            y = rng.uniform(*cfg.depth_range)
            x = rng.uniform(-1, 1) * cfg.lateral_fraction * tan_half * y
            yaw = rng.uniform(*cfg.yaw_range)
            m = cfg.annotation_margin
            # annotated box is slightly looser than the rendered solid
            gt = np.array([x, y, h / 2, l + m, h + m, w + m, yaw])
            if all(bev_iou(gt, b) < cfg.max_bev_overlap for b in boxes):
                boxes.append(gt)
                labels.append(c)
                break
    return np.array(boxes).reshape(-1, 7), np.array(labels, dtype=np.int64)


def scene_seed(master: int, index: int) -> int:
    """Seed of scene ``index`` in a dataset generated from ``master``."""
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


def synth_scene(seed: int, cfg: SynthConfig | None = None) -> Scene:
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(seed)
    K, T = cfg.intrinsics(), cfg.pose()
    boxes, labels = _place_boxes(rng, cfg)
    solids = boxes.copy()
    solids[:, 3:6] -= cfg.annotation_margin
    albedos = np.array([class_template(c)[4] for c in labels]).reshape(-1, 3)
    albedos = np.clip(albedos + rng.uniform(-cfg.albedo_jitter, cfg.albedo_jitter, albedos.shape), 0, 1)
    ground = np.clip(np.array(GROUND_ALBEDO) + rng.uniform(-0.05, 0.05, 3), 0, 1)
    depth, rgb, _ = render(solids, albedos, K, T, ground, cfg.max_range)
    rgb = np.clip(rgb + rng.normal(0.0, cfg.rgb_noise, rgb.shape), 0.0, 1.0)
    drop = rng.random(depth.shape) < cfg.depth_dropout
    depth = np.where(drop, np.nan, depth)
    rgbd = np.concatenate([rgb, depth[..., None]], axis=-1).astype(np.float32)
    return Scene(rgbd, K, T, boxes, labels, cfg.n_classes, meta={"seed": int(seed)})


def gen_2d_gt(scene: Scene) -> np.ndarray:
    """Per-pixel labels from 3D boxes.

    A pixel whose unprojected point lies in exactly one box takes that box's
    class; in no box it is background; in several boxes, or without depth,
    it is IGNORE.
    """
    h, w = scene.depth.shape
    labels = np.full((h, w), IGNORE, dtype=np.int64)
    cloud = depth_to_cloud(scene.depth, scene.K, scene.T)
    if len(cloud) == 0:
        return labels
    count = np.zeros(len(cloud), dtype=np.int64)
    owner = np.full(len(cloud), -1, dtype=np.int64)
    for b, c in zip(scene.boxes, scene.labels):
        inside = contains(b, cloud.xyz)
        count += inside
        owner[inside] = c
    values = np.where(count == 0, background_label(scene.n_classes), np.where(count == 1, owner, IGNORE))
    labels[cloud.pixel[:, 0], cloud.pixel[:, 1]] = values
    return labels


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_points(cloud: PointCloud, n: int, seed=0) -> PointCloud:
    """Uniform sample of ``n`` points; with replacement only when needed."""
    if len(cloud) == 0:
        raise ValueError("cannot sample from an empty cloud")
    rng = _rng(seed)
    if len(cloud) >= n:
        idx = rng.permutation(len(cloud))[:n]
    else:
        idx = rng.integers(0, len(cloud), size=n)
    return cloud.subset(idx)


@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    angle: float = 0.0  # radians about +z
    scale: float = 1.0
    brightness: float = 1.0
    contrast: float = 1.0

    @classmethod
    def draw(cls, rng, max_angle_deg=30.0, scale_range=(0.85, 1.15), jitter=0.1) -> "AugmentParams":
        return cls(
            flip=bool(rng.random() < 0.5),
            angle=float(np.deg2rad(rng.uniform(-max_angle_deg, max_angle_deg))),
            scale=float(rng.uniform(*scale_range)),
            brightness=float(rng.uniform(1 - jitter, 1 + jitter)),
            contrast=float(rng.uniform(1 - jitter, 1 + jitter)),
        )

    def transform_points(self, xyz) -> np.ndarray:
        xyz = np.array(xyz, dtype=float)
        if self.flip:
            xyz[..., 0] = -xyz[..., 0]
        c, s = np.cos(self.angle), np.sin(self.angle)
        x, y = xyz[..., 0].copy(), xyz[..., 1].copy()
        xyz[..., 0] = c * x - s * y
        xyz[..., 1] = s * x + c * y
        return xyz * self.scale

    def transform_boxes(self, boxes) -> np.ndarray:
        boxes = np.array(boxes, dtype=float).reshape(-1, 7)
        out = boxes.copy()
        out[:, :3] = self.transform_points(boxes[:, :3])
        out[:, 3:6] *= self.scale
        heading = np.pi - boxes[:, 6] if self.flip else boxes[:, 6]
        out[:, 6] = canonical_heading(wrap_angle(heading + self.angle))
        return out


def augment(scene: Scene, seed=0, params: AugmentParams | None = None) -> Scene:
    """3D flip/rotation/scale of cloud and boxes plus photometric jitter.

    The per-point pixel map is left untouched, so points still index the
    original (unwarped) image.
    """
    if params is None:
        params = AugmentParams.draw(_rng(seed))
    cloud = dataclasses.replace(scene.cloud, xyz=params.transform_points(scene.cloud.xyz), height=None)
    rgb = scene.rgbd[..., :3].astype(float)
    if params.brightness != 1.0 or params.contrast != 1.0:
        mean = rgb.mean()
        rgb = np.clip((rgb - mean) * params.contrast + mean * params.brightness, 0.0, 1.0)
    rgbd = scene.rgbd.copy()
    rgbd[..., :3] = rgb
    return dataclasses.replace(scene, rgbd=rgbd, boxes=params.transform_boxes(scene.boxes), cloud=cloud,
                               seg_gt=scene.seg_gt, meta={**scene.meta, "augment": params})
