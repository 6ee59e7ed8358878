"""Box, Mask and Boundary AP for single-category instance segmentation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Mapping, Sequence

import numpy as np

from .dataset_io import rle_decode
from .imaging import squared_distance_to_complement
from .structures import BoundingBox, iou as box_iou

THRESHOLDS = (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100
BOUNDARY_RATIO = 0.02
PROTOCOL_NOTE = (
    "COCO-style protocol: single category, IoU thresholds 0.50:0.05:0.95, "
    "greedy score-ordered matching, at most 100 detections per image, "
    "101-point interpolated precision; AP is 0 when there is no ground truth."
)


# ---------------------------------------------------------------- pixel metrics


def boundary_distance(height: int, width: int, ratio: float = BOUNDARY_RATIO) -> int:
    """Band width in pixels: ratio of the image diagonal, rounded half up, at least 1."""
    return max(1, int(math.floor(ratio * math.sqrt(height * height + width * width) + 0.5)))


def boundary_band(mask: np.ndarray, d: int) -> np.ndarray:
    """Mask pixels within Euclidean distance ``d`` of a pixel outside the mask.

    Pixels beyond the raster edge count as outside, so an object touching the
    border gets a band along the edge.
    """
    if d < 1:
        raise ValueError("band width must be >= 1")
    mask = np.asarray(mask, dtype=bool)
    d2 = squared_distance_to_complement(mask, border_is_exterior=True)
    return mask & (d2 <= d * d)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")


def mask_iou(g: np.ndarray, p: np.ndarray) -> float:
    g = np.asarray(g, dtype=bool)
    p = np.asarray(p, dtype=bool)
    _check_same_shape(g, p)
    union = int(np.count_nonzero(g | p))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(g & p)) / union


def boundary_iou(g: np.ndarray, p: np.ndarray, d: int | None = None) -> float:
    """IoU of the two boundary bands; 1 if both bands are empty, 0 if exactly one is."""
    g = np.asarray(g, dtype=bool)
    p = np.asarray(p, dtype=bool)
    _check_same_shape(g, p)
    if d is None:
        d = boundary_distance(*g.shape)
    return mask_iou(boundary_band(g, d), boundary_band(p, d))


# ---------------------------------------------------------------- records


@dataclass
class GroundTruth:
    image_id: Hashable
    box: BoundingBox
    mask: np.ndarray | None = None
    ann_id: Any = None


@dataclass
class Detection:
    image_id: Hashable
    score: float
    box: BoundingBox
    mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.score):
            raise ValueError("detection score must be finite")


IouMatrixFn = Callable[[Sequence[Detection], Sequence[GroundTruth]], np.ndarray]


def box_iou_matrix(dets: Sequence[Detection], gts: Sequence[GroundTruth]) -> np.ndarray:
    return np.array([[box_iou(d.box, g.box) for g in gts] for d in dets], dtype=np.float64).reshape(len(dets), len(gts))


def _count_matrix(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    fa = np.stack([m.ravel() for m in a]).astype(np.float64)
    fb = np.stack([m.ravel() for m in b]).astype(np.float64)
    inter = fa @ fb.T
    union = fa.sum(axis=1)[:, None] + fb.sum(axis=1)[None, :] - inter
    return inter, union


def _ratio(inter: np.ndarray, union: np.ndarray) -> np.ndarray:
    out = np.ones_like(inter)
    nz = union > 0
    out[nz] = inter[nz] / union[nz]
    return out


def mask_iou_matrix(dets: Sequence[Detection], gts: Sequence[GroundTruth]) -> np.ndarray:
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    return _ratio(*_count_matrix([d.mask for d in dets], [g.mask for g in gts]))


def boundary_iou_matrix(dets: Sequence[Detection], gts: Sequence[GroundTruth]) -> np.ndarray:
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    d = boundary_distance(*gts[0].mask.shape)
    return _ratio(*_count_matrix([boundary_band(x.mask, d) for x in dets], [boundary_band(g.mask, d) for g in gts]))


def pairwise(fn: Callable[[Any, Any], float]) -> IouMatrixFn:
    """Lift a scalar (det, gt) -> IoU function to the matrix form used by ``average_precision``."""

    def matrix(dets, gts):
        return np.array([[fn(d, g) for g in gts] for d in dets], dtype=np.float64).reshape(len(dets), len(gts))

    return matrix


# ---------------------------------------------------------------- AP


@dataclass
class APResult:
    per_threshold: list[float]
    mean: float
    thresholds: tuple[float, ...] = THRESHOLDS
    matches: dict = field(default_factory=dict)  # image_id -> {threshold: [(det index, gt index)]}


def _interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0 or tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def greedy_match(ious: np.ndarray, threshold: float) -> list[int]:
    """Match detections (rows, score order) to the free GT of highest IoU >= threshold.

    Returns the matched GT index per detection, or -1. Ties go to the lower GT index.
    """
    free = np.ones(ious.shape[1], dtype=bool)
    out = []
    for row in ious:
        cand = np.where(free & (row >= threshold), row, -1.0)
        j = int(np.argmax(cand)) if cand.size else -1
        if j >= 0 and cand[j] >= 0:
            free[j] = False
            out.append(j)
        else:
            out.append(-1)
    return out


def average_precision(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_fn: IouMatrixFn = box_iou_matrix,
    thresholds: Sequence[float] = THRESHOLDS,
    max_dets: int = MAX_DETS,
) -> APResult:
    """COCO-style AP per threshold and its mean.

    Per image, detections are ordered by descending score (stable) and cut at
    ``max_dets``; matches accumulate over all images before the
    precision-recall curve is built.
    """
    image_order: dict[Hashable, int] = {}
    for r in list(gts) + list(dets):
        image_order.setdefault(r.image_id, len(image_order))
    gts_by: dict[Hashable, list[GroundTruth]] = {}
    for g in gts:
        gts_by.setdefault(g.image_id, []).append(g)
    dets_by: dict[Hashable, list[tuple[int, Detection]]] = {}
    for i, d in enumerate(dets):
        dets_by.setdefault(d.image_id, []).append((i, d))

    n_gt = len(gts)
    keys: list[tuple[float, int, int]] = []
    tps: list[list[bool]] = [[] for _ in thresholds]
    matches: dict = {}
    for image_id, entries in dets_by.items():
        entries = sorted(entries, key=lambda e: -e[1].score)[:max_dets]
        img_dets = [d for _, d in entries]
        img_gts = gts_by.get(image_id, [])
        ious = iou_fn(img_dets, img_gts) if img_gts else np.zeros((len(img_dets), 0))
        per_t = {}
        for ti, t in enumerate(thresholds):
            m = greedy_match(ious, t)
            tps[ti].extend(j >= 0 for j in m)
            per_t[t] = [(entries[k][0], j) for k, j in enumerate(m) if j >= 0]
        matches[image_id] = per_t
        order = image_order[image_id]
        keys.extend((-d.score, order, rank) for rank, d in enumerate(img_dets))

    perm = sorted(range(len(keys)), key=keys.__getitem__)
    per_threshold = []
    for ti in range(len(thresholds)):
        tp = np.array(tps[ti], dtype=bool)[perm] if perm else np.zeros(0, dtype=bool)
        per_threshold.append(_interpolated_ap(tp, n_gt))
    mean = float(np.mean(per_threshold)) if per_threshold else 0.0
    return APResult(per_threshold, mean, tuple(thresholds), matches)


# ---------------------------------------------------------------- COCO documents


def _box(ann: Mapping) -> BoundingBox:
    x, y, w, h = (float(v) for v in ann["bbox"])
    return BoundingBox(x, y, x + w, y + h)


def records_from_coco(gt_doc: Mapping, pred: Mapping | Sequence) -> tuple[list[GroundTruth], list[Detection]]:
    """Turn a ground-truth COCO document and predictions into records.

    ``pred`` is either a COCO document (annotations carry ``score``, default
    1.0) or a bare results list. Raises ValueError listing every image id the
    two sides disagree on.
    """
    gt_ids = [img["id"] for img in gt_doc["images"]]
    gt_set = set(gt_ids)
    if isinstance(pred, Mapping):
        pred_anns = pred.get("annotations", [])
        if "images" in pred:
            pred_set = {img["id"] for img in pred["images"]}
            missing = sorted(gt_set - pred_set, key=str)
            extra = sorted(pred_set - gt_set, key=str)
            if missing or extra:
                raise ValueError(f"image id mismatch: missing from predictions {missing}; unknown in predictions {extra}")
    else:
        pred_anns = list(pred)
    unknown = sorted({a["image_id"] for a in pred_anns} - gt_set, key=str)
    if unknown:
        raise ValueError(f"predictions reference unknown image ids {unknown}")

    gts = []
    for ann in gt_doc["annotations"]:
        mask = rle_decode(ann["segmentation"]) if "segmentation" in ann else None
        gts.append(GroundTruth(ann["image_id"], _box(ann), mask, ann.get("id")))
    dets = []
    for ann in pred_anns:
        mask = rle_decode(ann["segmentation"]) if "segmentation" in ann else None
        dets.append(Detection(ann["image_id"], float(ann.get("score", 1.0)), _box(ann), mask))
    return gts, dets


def evaluate(gts: Sequence[GroundTruth], dets: Sequence[Detection], with_masks: bool = True) -> dict:
    """EvalReport as a JSON-ready dict keyed by the usual table column names."""
    metrics: dict[str, IouMatrixFn] = {"Box AP": box_iou_matrix}
    if with_masks:
        metrics["Mask AP"] = mask_iou_matrix
        metrics["Boundary AP"] = boundary_iou_matrix
    report: dict[str, Any] = {}
    per_threshold: dict[str, Any] = {"thresholds": list(THRESHOLDS)}
    per_image: dict[str, Any] = {}
    for name, fn in metrics.items():
        res = average_precision(dets, gts, fn)
        report[name] = res.mean
        per_threshold[name] = res.per_threshold
        gts_by: dict = {}
        for g in gts:
            gts_by.setdefault(g.image_id, []).append(g)
        for image_id, per_t in res.matches.items():
            pairs = [[int(di), gts_by[image_id][gi].ann_id] for di, gi in per_t[THRESHOLDS[0]]]
            per_image.setdefault(str(image_id), {})[name] = pairs
    report["per_threshold"] = per_threshold
    report["matched_pairs_at_0.50"] = per_image
    report["num_ground_truth"] = len(gts)
    report["num_detections"] = len(dets)
    report["protocol"] = PROTOCOL_NOTE
    return report


def evaluate_coco(gt_doc: Mapping, pred: Mapping | Sequence) -> dict:
    gts, dets = records_from_coco(gt_doc, pred)
    with_masks = all(g.mask is not None for g in gts) and all(d.mask is not None for d in dets)
    return evaluate(gts, dets, with_masks)
