"""On-disk formats.

All binary files share one container layout::

    b"C3D1" | uint32 little-endian header length | UTF-8 JSON header | payload

The header lists each array as ``{name, dtype, shape, offset, nbytes}``
relative to the start of the payload. Arrays are stored little-endian.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .camera import Intrinsics, Pose
from .data import Scene

MAGIC = b"C3D1"
SCENE_VERSION = 1
CHECKPOINT_VERSION = 1

# label colours for PPM renders; background black, ignore white
_PALETTE = np.array([
    [230, 25, 75], [60, 180, 75], [0, 130, 200], [245, 130, 48], [145, 30, 180],
    [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212], [0, 128, 128],
], dtype=np.uint8)


def write_container(path, header: dict, arrays: dict[str, np.ndarray], dtype: str) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(np.shape(arr)), "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps({**header, "arrays": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(head)) + head)
        for raw in chunks:
            fh.write(raw)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a cascade3d container")
    (n,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + n].decode("utf-8"))
    payload = memoryview(blob)[8 + n:]
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header, arrays


def save_scene(scene: Scene, path) -> None:
    K = scene.K
    header = {
        "format": "cascade3d.scene",
        "version": SCENE_VERSION,
        "C": int(scene.n_classes),
        "intrinsics": {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy, "width": K.width, "height": K.height},
        "pose": {"rotation": scene.T.rotation.tolist(), "translation": scene.T.translation.tolist()},
        "boxes": [{"box": [float(v) for v in b], "class": int(c)} for b, c in zip(scene.boxes, scene.labels)],
    }
    write_container(path, header, {"rgbd": scene.rgbd}, "<f4")


def load_scene(path) -> Scene:
    header, arrays = read_container(path)
    if header.get("format") != "cascade3d.scene":
        raise ValueError(f"{path}: not a scene file")
    if header["version"] != SCENE_VERSION:
        raise ValueError(f"{path}: unsupported scene version {header['version']}")
    K = Intrinsics(**header["intrinsics"])
    T = Pose(np.array(header["pose"]["rotation"]), np.array(header["pose"]["translation"]))
    boxes = np.array([b["box"] for b in header["boxes"]], dtype=float).reshape(-1, 7)
    labels = np.array([b["class"] for b in header["boxes"]], dtype=np.int64)
    return Scene(arrays["rgbd"].astype(np.float32), K, T, boxes, labels, header["C"])


def save_detections(dets, path) -> None:
    """``dets``: iterable of (box7, class, score)."""
    rows = [{"box": [float(v) for v in box], "class": int(c), "score": float(s)} for box, c, s in dets]
    Path(path).write_text(json.dumps(rows, indent=1) + "\n")


def load_detections(path) -> list[tuple[np.ndarray, int, float]]:
    rows = json.loads(Path(path).read_text())
    try:
        out = [(np.array(r["box"], dtype=float), int(r["class"]), float(r["score"])) for r in rows]
    except (TypeError, KeyError) as exc:
        raise ValueError(f"{path}: not a detection list ({exc})") from None
    if any(b.shape != (7,) for b, _, _ in out):
        raise ValueError(f"{path}: boxes must have 7 entries")
    return out


def save_segmap(probs, path) -> None:
    write_container(path, {"format": "cascade3d.segmap", "version": 1}, {"probs": probs}, "<f4")


def load_segmap(path) -> np.ndarray:
    return read_container(path)[1]["probs"]


def save_checkpoint(params: dict[str, np.ndarray], path, meta: dict | None = None) -> None:
    header = {"format": "cascade3d.checkpoint", "version": CHECKPOINT_VERSION, "meta": meta or {}}
    write_container(path, header, params, "<f8")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    header, arrays = read_container(path)
    if header.get("format") != "cascade3d.checkpoint":
        raise ValueError(f"{path}: not a checkpoint")
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    return arrays, header.get("meta", {})


def write_ppm(path, rgb) -> None:
    img = np.asarray(rgb)
    if img.dtype != np.uint8:
        img = (np.clip(np.nan_to_num(img), 0.0, 1.0) * 255 + 0.5).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[..., :3]).tobytes())


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(blob) and not blob[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise ValueError(f"{path}: truncated PPM header")
        fields.append(blob[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError("only 8-bit PPM supported")
    data = blob[pos + 1:pos + 1 + w * h * 3]  # one whitespace byte ends the header
    if len(data) != w * h * 3:
        raise ValueError(f"{path}: truncated PPM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)


def label_colours(labels, n_classes: int) -> np.ndarray:
    """RGB render of a label map (background black, IGNORE white)."""
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (3,), dtype=np.uint8)
    for c in range(n_classes):
        out[labels == c] = _PALETTE[c % len(_PALETTE)]
    out[labels < 0] = 255
    return out
