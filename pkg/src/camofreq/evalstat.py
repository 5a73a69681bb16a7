"""Class-agnostic mask AP and camouflage statistics for annotated image sets."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ContractError

IOU_THRESHOLDS = np.round(0.5 + 0.05 * np.arange(10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
BC_FLOOR = 1e-12
N_BINS = 256
INSTANCE_BUCKETS = ("1", "2-4", "5-8", ">8")
SIZE_BUCKETS = ("small(<0.1)", "medium(0.1-0.3)", "large(>=0.3)")


@dataclass
class InstanceMask:
    """Binary ``H x W`` mask; ``score`` is set for predictions, ``None`` for ground truth."""

    mask: np.ndarray
    score: float | None = None
    image_id: int | None = None
    iscrowd: bool = False

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def area(self) -> int:
        return int(self.mask.sum())


def iou(a, b) -> float:
    """Intersection over union; two empty masks give 0.0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ContractError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def iou_matrix(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> np.ndarray:
    out = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            out[i, j] = iou(p, g)
    return out


@dataclass
class APReport:
    ap: float
    ap50: float
    ap75: float
    per_threshold: dict = field(default_factory=dict)   # threshold -> AP
    curves: dict = field(default_factory=dict)          # threshold -> {"recall": [...], "precision": [...]}
    n_gt: int = 0
    n_pred: int = 0

    def to_dict(self, with_curves: bool = False) -> dict:
        out = {"ap": self.ap, "ap50": self.ap50, "ap75": self.ap75,
               "per_threshold": {f"{t:.2f}": v for t, v in self.per_threshold.items()},
               "n_gt": self.n_gt, "n_pred": self.n_pred}
        if with_curves:
            out["curves"] = {f"{t:.2f}": c for t, c in self.curves.items()}
        return out


def _interpolated_ap(tp: np.ndarray, n_gt: int) -> tuple[float, np.ndarray, np.ndarray]:
    if n_gt == 0 or tp.size == 0:
        return 0.0, np.zeros(0), np.zeros(0)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < recall.size, envelope[np.minimum(idx, recall.size - 1)], 0.0)
    return float(sampled.mean()), recall, precision


def mask_ap(preds: Sequence[Sequence[InstanceMask]], gts: Sequence[Sequence[InstanceMask]]) -> APReport:
    """COCO-style mask AP over IoU 0.50:0.05:0.95, single category.

    ``preds[i]`` and ``gts[i]`` hold the instances of image ``i``. Predictions are
    ranked globally by score (stable in image/list order); each one takes the
    unmatched ground truth of highest IoU at or above the threshold. AP is the
    101-point interpolated area under precision-recall. With no ground truth at
    all, every AP is reported as 0.
    """
    if len(preds) != len(gts):
        raise ContractError(f"{len(preds)} prediction lists for {len(gts)} images")
    entries = []
    ious = []
    for img, (ps, gs) in enumerate(zip(preds, gts)):
        shapes = {m.mask.shape for m in list(ps) + list(gs)}
        if len(shapes) > 1:
            raise ContractError(f"image {img}: mask dimensions disagree {sorted(shapes)}")
        ious.append(iou_matrix([p.mask for p in ps], [g.mask for g in gs]))
        for k, p in enumerate(ps):
            if p.score is None:
                raise ContractError(f"image {img}: prediction {k} has no score")
            entries.append((-float(p.score), img, k))
    entries.sort()
    n_gt = sum(len(g) for g in gts)
    per, curves = {}, {}
    for t in IOU_THRESHOLDS:
        matched = [np.zeros(len(g), dtype=bool) for g in gts]
        tp = np.zeros(len(entries), dtype=bool)
        for r, (_, img, k) in enumerate(entries):
            row = ious[img][k] if ious[img].size else np.zeros(0)
            cand = np.where(~matched[img] & (row >= t), row, -1.0)
            if cand.size and cand.max() >= 0:
                j = int(np.argmax(cand))
                matched[img][j] = True
                tp[r] = True
        ap_t, rec, prec = _interpolated_ap(tp, n_gt)
        per[float(t)] = ap_t
        curves[float(t)] = {"recall": rec.tolist(), "precision": prec.tolist()}
    values = list(per.values())
    return APReport(ap=float(np.mean(values)), ap50=per[0.5], ap75=per[0.75], per_threshold=per,
                    curves=curves, n_gt=n_gt, n_pred=len(entries))


# ---------------------------------------------------------------- histograms
def to_levels(image) -> np.ndarray:
    """Integer levels 0..255 per channel; float images are read as [0, 1]."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[..., None]
    if np.issubdtype(img.dtype, np.integer):
        return np.clip(img, 0, 255).astype(np.int64)
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.int64)


def histogram(pixels: np.ndarray) -> np.ndarray:
    """Normalised 256-bin histogram per channel of an ``n x C`` level array."""
    pixels = np.asarray(pixels)
    if pixels.ndim == 1:
        pixels = pixels[:, None]
    out = np.zeros((pixels.shape[1], N_BINS))
    for c in range(pixels.shape[1]):
        out[c] = np.bincount(pixels[:, c], minlength=N_BINS)[:N_BINS]
    totals = out.sum(axis=1, keepdims=True)
    if np.any(totals == 0):
        raise ContractError("cannot normalise an empty histogram")
    return out / totals


def bhattacharyya(p, q) -> float:
    """``-ln(max(sum sqrt(p*q), 1e-12))`` per channel, averaged over channels."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    if p.shape != q.shape:
        raise ContractError(f"histogram shapes differ: {p.shape} vs {q.shape}")
    for h in (p, q):
        if np.any(h < 0) or not np.allclose(h.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise ContractError("histograms must be non-negative and sum to 1 per channel")
    bc = np.sqrt(p * q).sum(axis=1)
    return float(np.mean(-np.log(np.maximum(bc, BC_FLOOR))))


def global_contrast(image, mask) -> float:
    """Bhattacharyya distance between object and background colour histograms."""
    levels = to_levels(image)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != levels.shape[:2]:
        raise ContractError(f"mask {mask.shape} does not match image {levels.shape[:2]}")
    if not mask.any() or mask.all():
        raise ContractError("global contrast needs both object and background pixels")
    return bhattacharyya(histogram(levels[mask]), histogram(levels[~mask]))


def inner_boundary(mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=np.ones((3, 3), dtype=bool), border_value=1)
    return mask & ~eroded


def local_contrast(image, mask, patch: int = 5) -> float:
    """Mean ``|fg mean - bg mean|`` over ``patch x patch`` windows centred on the boundary.

    Windows are clipped at the image border and skipped when they lack either
    side. The result is divided by the channel value range (255 for integer
    images, 1 for float images).
    """
    img = np.asarray(image)
    value_range = 255.0 if np.issubdtype(img.dtype, np.integer) else 1.0
    img = img.astype(np.float64)
    if img.ndim == 2:
        img = img[..., None]
    mask = np.asarray(mask, dtype=bool)
    boundary = inner_boundary(mask)
    if not boundary.any():
        raise ContractError("mask has an empty boundary")
    ones = np.ones((patch, patch))
    fg = mask.astype(np.float64)
    n_fg = ndimage.correlate(fg, ones, mode="constant")
    n_bg = ndimage.correlate(1.0 - fg, ones, mode="constant")
    diffs = []
    for c in range(img.shape[-1]):
        s_fg = ndimage.correlate(img[..., c] * fg, ones, mode="constant")
        s_bg = ndimage.correlate(img[..., c] * (1.0 - fg), ones, mode="constant")
        with np.errstate(invalid="ignore", divide="ignore"):
            diffs.append(np.abs(s_fg / n_fg - s_bg / n_bg))
    per_pixel = np.mean(diffs, axis=0)
    valid = boundary & (n_fg > 0.5) & (n_bg > 0.5)
    if not valid.any():
        return 0.0
    return float(per_pixel[valid].mean() / value_range)


# ------------------------------------------------------------ dataset stats
def instance_bucket(count: int) -> str | None:
    if count <= 0:
        return None
    if count == 1:
        return "1"
    if count <= 4:
        return "2-4"
    if count <= 8:
        return "5-8"
    return ">8"


def size_bucket(ratio: float) -> str:
    if ratio < 0.1:
        return SIZE_BUCKETS[0]
    if ratio < 0.3:
        return SIZE_BUCKETS[1]
    return SIZE_BUCKETS[2]


@dataclass
class StatsReport:
    resolutions: list = field(default_factory=list)       # (image_id, width, height)
    instances_per_image: dict = field(default_factory=lambda: {b: 0 for b in INSTANCE_BUCKETS})
    size_ratios: list = field(default_factory=list)       # (image_id, ratio)
    size_buckets: dict = field(default_factory=lambda: {b: 0 for b in SIZE_BUCKETS})
    global_contrast: list = field(default_factory=list)   # (image_id, value)
    local_contrast: list = field(default_factory=list)    # (image_id, value)
    n_images: int = 0
    n_instances: int = 0

    def summary(self) -> dict:
        ratios = [r for _, r in self.size_ratios]

        def _mean(rows):
            vals = [v for _, v in rows]
            return float(np.mean(vals)) if vals else 0.0

        return {
            "n_images": self.n_images,
            "n_instances": self.n_instances,
            "instances_per_image": dict(self.instances_per_image),
            "size_buckets": dict(self.size_buckets),
            "size_ratio_min": float(min(ratios)) if ratios else 0.0,
            "size_ratio_max": float(max(ratios)) if ratios else 0.0,
            "global_contrast_mean": _mean(self.global_contrast),
            "local_contrast_mean": _mean(self.local_contrast),
        }

    def write(self, out_dir) -> None:
        """``summary.json`` plus one CSV per distribution."""
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        tables = {
            "resolution.csv": (("image_id", "width", "height"), self.resolutions),
            "instances_per_image.csv": (("bucket", "count"), list(self.instances_per_image.items())),
            "mask_size.csv": (("image_id", "size_ratio"), self.size_ratios),
            "global_contrast.csv": (("image_id", "global_contrast"), self.global_contrast),
            "local_contrast.csv": (("image_id", "local_contrast"), self.local_contrast),
        }
        for name, (header, rows) in tables.items():
            with open(os.path.join(out_dir, name), "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                w.writerows(rows)


def dataset_stats(annotations, images: dict | None = None) -> StatsReport:
    """Distributions over an AnnotationSet.

    ``images`` optionally maps image id to pixel arrays; contrast statistics are
    computed only for images supplied there (one value per instance).
    """
    from .ingest import decode_mask  # local: ingest imports InstanceMask from here

    report = StatsReport()
    if annotations is None:
        return report
    by_image: dict[int, list] = {}
    for ann in annotations.annotations:
        by_image.setdefault(ann.image_id, []).append(ann)
    for info in annotations.images:
        report.n_images += 1
        report.resolutions.append((info.id, info.width, info.height))
        anns = by_image.get(info.id, [])
        bucket = instance_bucket(len(anns))
        if bucket:
            report.instances_per_image[bucket] += 1
        pixels = None if images is None else images.get(info.id)
        for ann in anns:
            m = decode_mask(ann.segmentation, info.height, info.width)
            report.n_instances += 1
            ratio = float(m.sum()) / float(info.height * info.width)
            report.size_ratios.append((info.id, ratio))
            report.size_buckets[size_bucket(ratio)] += 1
            if pixels is not None and m.any() and not m.all():
                report.global_contrast.append((info.id, global_contrast(pixels, m)))
                if inner_boundary(m).any():
                    report.local_contrast.append((info.id, local_contrast(pixels, m)))
    return report
