"""Command line entry point: ``python -m cascade3d <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .camera import BehindCamera, project_points
from .data import SynthConfig, scene_seed, synth_scene
from .geom3d import bev_corners
from .pipeline import CascadeConfig, CascadeModels, ConfigError, evaluate, run_cascade, segmap_labels
from .metrics import ConfusionMatrix, build_report

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3
MANIFEST = "manifest.json"
CHECKPOINT = "model.ckpt"

log = logging.getLogger("cascade3d")


class IOFailure(Exception):
    pass


def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ----------------------------------------------------------------------------
# dataset directories

def gen_data(out, n_scenes: int, seed: int, n_classes: int, n_test: int | None = None) -> dict:
    if n_scenes < 1 or n_classes < 1:
        raise ConfigError("need at least one scene and one class")
    n_test = n_scenes // 6 if n_test is None else n_test
    if not 0 <= n_test <= n_scenes:
        raise ConfigError("test split larger than the dataset")
    out = Path(out)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    cfg = SynthConfig(n_classes=n_classes)
    names = []
    for i in range(n_scenes):
        name = f"scene_{i:05d}"
        fileio.save_scene(synth_scene(scene_seed(seed, i), cfg), out / "scenes" / f"{name}.c3d")
        names.append(name)
    manifest = {
        "format": "cascade3d.dataset", "version": 1, "seed": seed, "n_classes": n_classes,
        "train": names[:n_scenes - n_test], "test": names[n_scenes - n_test:],
    }
    _dump_json(manifest, out / MANIFEST)
    return manifest


def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / MANIFEST
    if not path.is_file():
        raise IOFailure(f"{path}: missing dataset manifest")
    return json.loads(path.read_text())


def load_split(data_dir, split: str):
    manifest = read_manifest(data_dir)
    return [(n, fileio.load_scene(Path(data_dir) / "scenes" / f"{n}.c3d")) for n in manifest[split]]


def load_config(path, n_classes: int | None = None) -> CascadeConfig:
    try:
        raw = json.loads(Path(path).read_text()) if path else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if n_classes is not None:
        if raw.get("n_classes", n_classes) != n_classes:
            raise ConfigError(f"config n_classes {raw['n_classes']} != dataset C {n_classes}")
        raw["n_classes"] = n_classes
    return CascadeConfig.from_dict(raw)


def save_models(out, models: CascadeModels, cfg: CascadeConfig) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.save_checkpoint(models.state_dict(), out / CHECKPOINT, meta={"config": cfg.to_dict()})
    _dump_json(cfg.to_dict(), out / "config.json")


def load_models(ckpt_dir) -> tuple[CascadeModels, CascadeConfig]:
    path = Path(ckpt_dir) / CHECKPOINT if Path(ckpt_dir).is_dir() else Path(ckpt_dir)
    state, meta = fileio.load_checkpoint(path)
    cfg = CascadeConfig.from_dict(meta["config"])
    models = CascadeModels.create(cfg)
    models.load_state_dict(state)
    return models, cfg


# ----------------------------------------------------------------------------
# commands

def cmd_gen_data(a) -> int:
    m = gen_data(a.out, a.scenes, a.seed, a.classes, a.test_scenes)
    print(json.dumps({"out": str(a.out), "train": len(m["train"]), "test": len(m["test"])}))
    return EXIT_OK


def cmd_train(a) -> int:
    from .pipeline import train
    manifest = read_manifest(a.data)
    cfg = load_config(a.config, manifest["n_classes"])
    if a.epochs is not None:
        cfg.optim.epochs = a.epochs
    scenes = [s for _, s in load_split(a.data, "train")]
    result = train(scenes, cfg)
    save_models(a.out, result.models, cfg)
    _dump_json(result.curve, Path(a.out) / "loss_curve.json")
    summary = {"initial_loss": result.initial_loss, "final_loss": result.final_loss(), "steps": len(result.curve)}
    _dump_json(summary, Path(a.out) / "train_summary.json")
    print(json.dumps(summary))
    return EXIT_OK


def _infer_one(scene, models, cfg, out: Path) -> None:
    res = run_cascade(scene, models, cfg, seed=cfg.seed)
    fileio.save_detections([d.as_tuple() for d in res.detections], out)
    if res.final_segmap is not None:
        fileio.save_segmap(res.final_segmap, out.with_suffix(".segmap"))


def cmd_infer(a) -> int:
    models, cfg = load_models(a.ckpt)
    src, out = Path(a.scene), Path(a.out)
    if src.is_dir():  # whole test split of a dataset directory
        out.mkdir(parents=True, exist_ok=True)
        for name, scene in load_split(src, a.split):
            _infer_one(scene, models, cfg, out / f"{name}.json")
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        _infer_one(fileio.load_scene(src), models, cfg, out)
    return EXIT_OK


def _gt_for(gt_dir: Path, stem: str):
    for cand in (gt_dir / "scenes" / f"{stem}.c3d", gt_dir / f"{stem}.c3d"):
        if cand.is_file():
            scene = fileio.load_scene(cand)
            return [(b, int(c)) for b, c in zip(scene.boxes, scene.labels)], scene
    cand = gt_dir / f"{stem}.json"
    if cand.is_file():
        return [(b, c) for b, c, _ in fileio.load_detections(cand)], None
    raise IOFailure(f"no ground truth for {stem} in {gt_dir}")


def cmd_eval(a) -> int:
    det_dir, gt_dir = Path(a.dets), Path(a.gt)
    files = sorted(det_dir.glob("*.json")) if det_dir.is_dir() else []
    if not files:
        raise IOFailure(f"{det_dir}: no detection files")
    dets, gts = {}, {}
    conf = None
    for f in files:
        dets[f.stem] = fileio.load_detections(f)
        gts[f.stem], scene = _gt_for(gt_dir, f.stem)
        seg = f.with_suffix(".segmap")
        if scene is not None and seg.is_file():
            conf = conf or ConfusionMatrix(scene.n_classes + 1)
            conf.update(segmap_labels(fileio.load_segmap(seg)), scene.seg_gt)
    miou = conf.iou()[1] if conf is not None and conf.counts.sum() else None
    report = build_report(dets, gts, miou, None)
    Path(a.report).parent.mkdir(parents=True, exist_ok=True)
    _dump_json(report, a.report)
    print(json.dumps({"map_range": report["map_range"], "ap": report["ap"], "miou": report["miou"]}))
    return EXIT_OK


def _draw_line(img, p, q, colour) -> None:
    n = int(np.ceil(np.abs(q - p).max())) + 1
    t = np.linspace(0.0, 1.0, n)[:, None]
    pts = np.floor(p + t * (q - p)).astype(int)
    h, w = img.shape[:2]
    ok = (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)
    img[pts[ok, 1], pts[ok, 0]] = colour


def box_corners(box) -> np.ndarray:
    """8 corners: bottom face (CCW) then top face."""
    bev = bev_corners(box)
    z0, z1 = box[2] - box[4] / 2, box[2] + box[4] / 2
    return np.concatenate([np.c_[bev, np.full(4, z0)], np.c_[bev, np.full(4, z1)]])


EDGES = [(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4), (0, 4), (1, 5), (2, 6), (3, 7)]


def draw_box(img, box, K, T, colour) -> None:
    uv, z, _ = project_points(K, T, box_corners(np.asarray(box, dtype=float)))
    if (z <= 1e-3).any():
        return  # partially behind the camera; skip rather than clip
    for i, j in EDGES:
        _draw_line(img, uv[i], uv[j], colour)


def render_panels(scene, dets, segmap=None, min_score: float = 0.0) -> np.ndarray:
    """RGB with GT (white) and detections | depth | 2D labels, side by side."""
    rgb = (np.clip(scene.rgb, 0, 1) * 255).astype(np.uint8)
    for b in scene.boxes:
        draw_box(rgb, b, scene.K, scene.T, (255, 255, 255))
    for box, c, s in dets:
        if s >= min_score:
            draw_box(rgb, box, scene.K, scene.T, fileio.label_colours(np.array([c]), scene.n_classes)[0])
    depth = np.nan_to_num(scene.depth, nan=0.0)
    depth = (255 * (1 - np.clip(depth / max(depth.max(), 1e-6), 0, 1)) * (depth > 0)).astype(np.uint8)
    labels = segmap_labels(segmap) if segmap is not None else scene.seg_gt
    return np.concatenate([rgb, np.repeat(depth[..., None], 3, axis=-1),
                           fileio.label_colours(labels, scene.n_classes)], axis=1)


def cmd_render(a) -> int:
    scene = fileio.load_scene(a.scene)
    dets = fileio.load_detections(a.dets) if a.dets else []
    seg_path = Path(a.dets).with_suffix(".segmap") if a.dets else None
    segmap = fileio.load_segmap(seg_path) if seg_path is not None and seg_path.is_file() else None
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    fileio.write_ppm(a.out, render_panels(scene, dets, segmap, a.min_score))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cascade3d", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic RGB-D dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--test-scenes", type=int, default=None, help="size of the test split (default N/6)")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="joint training of the cascade")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None, help="JSON config (defaults used when omitted)")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=None, help="override optimizer.epochs")
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="run a trained cascade on a scene (or a dataset split)")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--scene", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--split", default="test")
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="score detection files against ground truth")
    e.add_argument("--dets", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("render", help="write a PPM visualisation of a scene and detections")
    r.add_argument("--scene", required=True)
    r.add_argument("--dets", default=None)
    r.add_argument("--out", required=True)
    r.add_argument("--min-score", type=float, default=0.1)
    r.set_defaults(fn=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IOFailure, OSError, ValueError, KeyError, BehindCamera) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
