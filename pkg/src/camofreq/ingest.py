"""COCO-style annotation and prediction files.

Masks are carried either as polygon lists (even-odd fill sampled at pixel
centres) or as uncompressed RLE: column-major run lengths starting with a
background run. Compressed RLE strings are not supported.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError, InputError, ValidationError
from .evalstat import InstanceMask


@dataclass
class ImageInfo:
    id: int
    file_name: str
    width: int
    height: int


@dataclass
class Annotation:
    image_id: int
    segmentation: object
    score: float | None = None
    iscrowd: bool = False
    id: int | None = None


@dataclass
class AnnotationSet:
    images: list = field(default_factory=list)
    annotations: list = field(default_factory=list)

    def image(self, image_id: int) -> ImageInfo:
        for info in self.images:
            if info.id == image_id:
                return info
        raise KeyError(image_id)

    def masks_by_image(self) -> dict[int, list[InstanceMask]]:
        """Decoded instances keyed by image id (every image present, maybe empty)."""
        dims = {i.id: (i.height, i.width) for i in self.images}
        out: dict[int, list[InstanceMask]] = {i.id: [] for i in self.images}
        for ann in self.annotations:
            h, w = dims[ann.image_id]
            out[ann.image_id].append(InstanceMask(decode_mask(ann.segmentation, h, w), ann.score,
                                                  ann.image_id, ann.iscrowd))
        return out


# --------------------------------------------------------------------- RLE
def encode_rle(mask) -> dict:
    """Uncompressed COCO RLE of a binary ``H x W`` mask."""
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise FormatError(f"RLE needs a 2-D mask, got shape {m.shape}")
    flat = m.ravel(order="F").astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        counts = [0] + counts
    return {"counts": [int(c) for c in counts], "size": [int(m.shape[0]), int(m.shape[1])]}


def decode_rle(rle: dict, height: int | None = None, width: int | None = None) -> np.ndarray:
    try:
        counts = rle["counts"]
        h, w = (int(v) for v in rle["size"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed RLE object: {exc}") from exc
    if isinstance(counts, str):
        raise FormatError("compressed RLE strings are not supported; use uncompressed counts")
    if height is not None and (h, w) != (int(height), int(width)):
        raise FormatError(f"RLE size {h}x{w} does not match image {height}x{width}")
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 1 or np.any(counts < 0):
        raise FormatError("RLE counts must be a flat list of non-negative integers")
    if counts.sum() != h * w:
        raise FormatError(f"RLE counts sum to {int(counts.sum())}, expected {h * w}")
    values = np.arange(counts.size) % 2 == 1
    flat = np.repeat(values, counts)
    return flat.reshape((h, w), order="F")


# ------------------------------------------------------------------ polygons
def rasterize_polygon(coords, height: int, width: int) -> np.ndarray:
    """Even-odd fill of one ``[x1, y1, x2, y2, ...]`` ring, sampled at pixel centres."""
    pts = np.asarray(coords, dtype=np.float64)
    if pts.ndim != 1 or pts.size % 2:
        raise FormatError(f"polygon needs an even number of coordinates, got {pts.size}")
    if pts.size < 6:
        return np.zeros((height, width), dtype=bool)
    xs, ys = pts[0::2], pts[1::2]
    cy = np.arange(height) + 0.5
    cx = np.arange(width) + 0.5
    inside = np.zeros((height, width), dtype=bool)
    x0, y0 = xs, ys
    x1, y1 = np.roll(xs, -1), np.roll(ys, -1)
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        if ay == by:
            continue
        rows = (cy >= min(ay, by)) & (cy < max(ay, by))
        if not rows.any():
            continue
        xcross = ax + (cy[rows] - ay) * (bx - ax) / (by - ay)
        inside[rows] ^= cx[None, :] < xcross[:, None]
    return inside


def decode_mask(segmentation, height: int, width: int) -> np.ndarray:
    """Polygon list or uncompressed RLE to a boolean ``height x width`` mask."""
    if isinstance(segmentation, dict):
        return decode_rle(segmentation, height, width)
    if not isinstance(segmentation, (list, tuple)):
        raise FormatError(f"unsupported segmentation type {type(segmentation).__name__}")
    out = np.zeros((height, width), dtype=bool)
    if segmentation and all(isinstance(v, (int, float)) for v in segmentation):
        segmentation = [segmentation]
    for ring in segmentation:
        out |= rasterize_polygon(ring, height, width)
    return out


# --------------------------------------------------------------------- files
def _read_json(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}", path=path) from exc
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise InputError(f"{path}: not UTF-8 at byte {exc.start}", path=path, offset=exc.start) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode("utf-8"))
        raise InputError(f"{path}: JSON parse error at byte {offset}: {exc.msg}",
                         path=path, offset=offset) from exc


def parse_coco(doc, source: str = "<document>") -> AnnotationSet:
    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list) \
            or not isinstance(doc.get("annotations"), list):
        raise ValidationError(f"{source}: expected an object with 'images' and 'annotations' arrays")
    out = AnnotationSet()
    try:
        for img in doc["images"]:
            out.images.append(ImageInfo(int(img["id"]), str(img.get("file_name", "")),
                                        int(img["width"]), int(img["height"])))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{source}: malformed image entry ({exc})") from exc
    known = {i.id for i in out.images}
    missing = []
    for n, ann in enumerate(doc["annotations"]):
        try:
            image_id = int(ann["image_id"])
            seg = ann["segmentation"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{source}: malformed annotation #{n} ({exc})") from exc
        if image_id not in known:
            missing.append(image_id)
            continue
        score = ann.get("score")
        out.annotations.append(Annotation(image_id, seg, None if score is None else float(score),
                                          bool(ann.get("iscrowd", 0)), ann.get("id")))
    if missing:
        ids = sorted(set(missing))
        raise ValidationError(f"{source}: annotations reference unknown image ids {ids}", ids)
    return out


def load_coco(path) -> AnnotationSet:
    """Read a COCO-style JSON file; unknown top-level keys are ignored."""
    return parse_coco(_read_json(path), str(path))


def _check_scores(instances_by_image) -> None:
    for image_id, insts in instances_by_image.items():
        for inst in insts:
            if inst.score is None or not 0.0 <= float(inst.score) <= 1.0:
                raise ContractError(f"image {image_id}: score {inst.score!r} outside [0, 1]")


def write_predictions(instances_by_image: dict, path) -> None:
    """Write a COCO results array ``[{image_id, segmentation, score}, ...]``."""
    _check_scores(instances_by_image)
    rows = []
    for image_id in sorted(instances_by_image):
        for inst in instances_by_image[image_id]:
            rows.append({"image_id": int(image_id), "segmentation": encode_rle(inst.mask),
                         "score": float(inst.score)})
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise InputError(f"{path}: cannot write predictions ({exc.strerror})", path=path) from exc


def load_predictions(path) -> dict[int, list[InstanceMask]]:
    doc = _read_json(path)
    if not isinstance(doc, list):
        raise ValidationError(f"{path}: prediction file must be a JSON array")
    out: dict[int, list[InstanceMask]] = {}
    for n, row in enumerate(doc):
        try:
            image_id = int(row["image_id"])
            mask = decode_rle(row["segmentation"])
            score = float(row["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{path}: malformed prediction #{n} ({exc})") from exc
        out.setdefault(image_id, []).append(InstanceMask(mask, score, image_id))
    return out


def write_coco(images: list, instances_by_image: dict, path) -> None:
    """Ground-truth style document with RLE segmentations."""
    doc = {"images": [], "annotations": []}
    ann_id = 1
    for info in images:
        doc["images"].append({"id": info.id, "file_name": info.file_name,
                              "width": info.width, "height": info.height})
        for inst in instances_by_image.get(info.id, []):
            doc["annotations"].append({"id": ann_id, "image_id": info.id, "iscrowd": 0,
                                       "segmentation": encode_rle(inst.mask),
                                       "area": int(inst.mask.sum())})
            ann_id += 1
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")
