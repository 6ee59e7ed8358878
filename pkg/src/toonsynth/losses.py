"""Reference loss kernels with analytic gradients with respect to the predictions.

Every loss accepts ``return_grad=True`` and then returns ``(value, grad)``
where ``grad`` has the shape of the prediction argument. Computation is in
float64 throughout. Boxes are (x_min, y_min, x_max, y_max) rows.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .config import LossConfig
from .imaging import resize_matrix

DEFAULTS = LossConfig()


# ---------------------------------------------------------------- GIoU


def _as_boxes(b, name: str) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if b.ndim == 1:
        b = b[None, :]
    if b.ndim != 2 or b.shape[1] != 4:
        raise ValueError(f"{name} must have shape (N, 4)")
    if np.any(b[:, 2] <= b[:, 0]) or np.any(b[:, 3] <= b[:, 1]):
        raise ValueError(f"{name} contains a degenerate (zero-area) box")
    return b


def giou_terms(pred: np.ndarray, gt: np.ndarray) -> dict[str, np.ndarray]:
    """Per-pair intersection, union, enclosing area, IoU and GIoU."""
    p = _as_boxes(pred, "pred")
    g = _as_boxes(gt, "gt")
    if p.shape != g.shape:
        raise ValueError("pred and gt must be paired")
    iw = np.clip(np.minimum(p[:, 2], g[:, 2]) - np.maximum(p[:, 0], g[:, 0]), 0, None)
    ih = np.clip(np.minimum(p[:, 3], g[:, 3]) - np.maximum(p[:, 1], g[:, 1]), 0, None)
    inter = iw * ih
    ap = (p[:, 2] - p[:, 0]) * (p[:, 3] - p[:, 1])
    ag = (g[:, 2] - g[:, 0]) * (g[:, 3] - g[:, 1])
    union = ap + ag - inter
    cw = np.maximum(p[:, 2], g[:, 2]) - np.minimum(p[:, 0], g[:, 0])
    ch = np.maximum(p[:, 3], g[:, 3]) - np.minimum(p[:, 1], g[:, 1])
    enclose = cw * ch
    iou = inter / union
    giou = iou - (enclose - union) / enclose
    return {"inter": inter, "union": union, "enclose": enclose, "iou": iou, "giou": giou,
            "iw": iw, "ih": ih, "cw": cw, "ch": ch}


def giou_loss(pred, gt, mode: str = "standard", return_grad: bool = False):
    """Mean over pairs of 1 - GIoU (``standard``) or of GIoU itself (``paper_literal``).

    ``paper_literal`` reproduces the formula as printed, which is not a
    minimization target; it exists for audits only.
    """
    if mode not in ("standard", "paper_literal"):
        raise ValueError(f"unknown mode {mode!r}")
    p = _as_boxes(pred, "pred")
    g = _as_boxes(gt, "gt")
    t = giou_terms(p, g)
    n = len(p)
    sign = -1.0 if mode == "standard" else 1.0
    value = float(np.mean(1.0 - t["giou"])) if mode == "standard" else float(np.mean(t["giou"]))
    if not return_grad:
        return value

    inter, union, enclose = t["inter"], t["union"], t["enclose"]
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    # d(area_p)/d(x1, y1, x2, y2)
    d_ap = np.stack([-ph, -pw, ph, pw], axis=1)
    # intersection extents move with pred only where pred is the binding edge
    z = np.zeros(n)
    d_iw = np.stack([-1.0 * (p[:, 0] >= g[:, 0]), z, 1.0 * (p[:, 2] <= g[:, 2]), z], axis=1)
    d_ih = np.stack([z, -1.0 * (p[:, 1] >= g[:, 1]), z, 1.0 * (p[:, 3] <= g[:, 3])], axis=1)
    d_iw *= (t["iw"] > 0)[:, None]
    d_ih *= (t["ih"] > 0)[:, None]
    d_inter = d_iw * t["ih"][:, None] + d_ih * t["iw"][:, None]
    d_cw = np.stack([-1.0 * (p[:, 0] <= g[:, 0]), z, 1.0 * (p[:, 2] >= g[:, 2]), z], axis=1)
    d_ch = np.stack([z, -1.0 * (p[:, 1] <= g[:, 1]), z, 1.0 * (p[:, 3] >= g[:, 3])], axis=1)
    d_enclose = d_cw * t["ch"][:, None] + d_ch * t["cw"][:, None]
    d_union = d_ap - d_inter
    # GIoU = I/U - 1 + U/C
    u, c = union[:, None], enclose[:, None]
    d_giou = d_inter / u - inter[:, None] * d_union / u**2 + d_union / c - u * d_enclose / c**2
    grad = sign * d_giou / n
    return value, grad


# ---------------------------------------------------------------- quality focal loss


def _clip(x: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    inside = (x >= eps) & (x <= 1.0 - eps)
    return np.clip(x, eps, 1.0 - eps), inside


def quality_focal_loss(y, sigma, beta: float = DEFAULTS.qfl_beta, eps: float = DEFAULTS.clip_eps, return_grad: bool = False):
    """Sum over candidates of -|y - s|^beta * [(1 - y) log(1 - s) + y log s], s = clip(sigma).

    The gradient is zero where sigma was clipped.
    """
    if beta < 0:
        raise ValueError("beta must be >= 0")
    y = np.asarray(y, dtype=np.float64)
    sig = np.asarray(sigma, dtype=np.float64)
    if y.shape != sig.shape:
        raise ValueError("y and sigma must have the same shape")
    s, inside = _clip(sig, eps)
    diff = s - y
    mod = np.abs(diff) ** beta
    ce = (1.0 - y) * np.log(1.0 - s) + y * np.log(s)
    value = float(-(mod * ce).sum())
    if not return_grad:
        return value
    if beta == 0:
        d_mod = np.zeros_like(s)
    else:
        nz = diff != 0
        d_mod = np.zeros_like(s)
        d_mod[nz] = beta * np.abs(diff[nz]) ** (beta - 1.0) * np.sign(diff[nz])
    d_ce = -(1.0 - y) / (1.0 - s) + y / s
    grad = -(d_mod * ce + mod * d_ce) * inside
    return value, grad


# ---------------------------------------------------------------- resampling helpers


def _resample_stack(x: np.ndarray, size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bilinear resample (N, H, W) to (N, h, w) as R_h @ X @ R_w^T; returns the matrices too."""
    h, w = size
    rh = resize_matrix(x.shape[1], h)
    rw = resize_matrix(x.shape[2], w)
    return rh @ x @ rw.T, rh, rw


def _resample_back(g: np.ndarray, rh: np.ndarray, rw: np.ndarray) -> np.ndarray:
    return rh.T @ g @ rw


# ---------------------------------------------------------------- dice


def dice_loss(pred, gt, eps: float = DEFAULTS.dice_eps, size: int = DEFAULTS.dice_size, return_grad: bool = False):
    """Mean over instances of 1 - 2<G, P> / (<G, G> + <P, P> + eps) after resampling both to size x size."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.ndim == 2:
        p, g = p[None], g[None]
    if len(p) == 0:
        raise ValueError("dice loss needs at least one instance")
    if len(p) != len(g):
        raise ValueError("pred and gt stacks differ in length")
    pr, rh, rw = _resample_stack(p, (size, size))
    gr, _, _ = _resample_stack(g, (size, size))
    n = len(p)
    a = (gr * pr).sum(axis=(1, 2))
    d = (gr * gr).sum(axis=(1, 2)) + (pr * pr).sum(axis=(1, 2)) + eps
    value = float(np.mean(1.0 - 2.0 * a / d))
    if not return_grad:
        return value
    gp = -(2.0 * gr / d[:, None, None] - 4.0 * a[:, None, None] * pr / d[:, None, None] ** 2) / n
    grad = _resample_back(gp, rh, rw)
    return value, grad.reshape(np.shape(pred))


# ---------------------------------------------------------------- stage 1


@dataclass(frozen=True)
class Stage1Weights:
    box: float = DEFAULTS.box_weight
    conf: float = DEFAULTS.conf_weight
    mask: float = DEFAULTS.mask_weight

    def __post_init__(self) -> None:
        if min(self.box, self.conf, self.mask) <= 0:
            raise ValueError("stage-1 weights must be positive")


def stage1_loss(box_l: float, conf_l: float, mask_l: float, w: Stage1Weights = Stage1Weights()) -> float:
    return w.box * box_l + w.conf * conf_l + w.mask * mask_l


# ---------------------------------------------------------------- stage 2


def feature_mse_loss(pred: Sequence, gt: Sequence, reduction: str = "sum", return_grad: bool = False):
    """Sum over pyramid levels of squared differences (``sum``) or of per-level means (``mean``)."""
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    if len(pred) != len(gt):
        raise ValueError("pyramids have different level counts")
    value = 0.0
    grads = []
    for lp, lg in zip(pred, gt):
        lp = np.asarray(lp, dtype=np.float64)
        lg = np.asarray(lg, dtype=np.float64)
        if lp.shape != lg.shape:
            raise ValueError(f"level shape mismatch {lp.shape} vs {lg.shape}")
        diff = lp - lg
        scale = 1.0 if reduction == "sum" else 1.0 / max(diff.size, 1)
        value += float((diff * diff).sum()) * scale
        grads.append(2.0 * diff * scale)
    return (value, grads) if return_grad else value


def ppa_weight_map(gt: np.ndarray, pool: int = DEFAULTS.ppa_pool_size, gain: float = DEFAULTS.ppa_boundary_gain) -> np.ndarray:
    """W = 1 + gain * |meanpool(gt) - gt|; the pool is pool x pool, stride 1, zero padded
    by pool // 2 on every side and always divides by pool**2."""
    g = np.asarray(gt, dtype=np.float64)
    avg = ndimage.uniform_filter(g, size=pool, mode="constant", cval=0.0)
    return 1.0 + gain * np.abs(avg - g)


def _ppa_level(s: np.ndarray, g: np.ndarray, w: np.ndarray, eps: float):
    p, inside = _clip(s, eps)
    bce = -(g * np.log(p) + (1.0 - g) * np.log(1.0 - p))
    sw = w.sum()
    wbce = (w * bce).sum() / sw
    inter = (w * p * g).sum()
    union = (w * (p + g - p * g)).sum()
    value = wbce + 1.0 - inter / union
    d_bce = -g / p + (1.0 - g) / (1.0 - p)
    d_iou = (w * g) / union - inter * w * (1.0 - g) / union**2
    grad = (w * d_bce / sw - d_iou) * inside
    return float(value), grad


def ppa_loss(
    side_masks: Sequence,
    gt,
    level_weights: Sequence[float] = DEFAULTS.ppa_level_weights,
    eps: float = DEFAULTS.clip_eps,
    pool: int = DEFAULTS.ppa_pool_size,
    gain: float = DEFAULTS.ppa_boundary_gain,
    return_grad: bool = False,
):
    """Sum over levels of weight * (weighted BCE + 1 - weighted IoU).

    Each side mask is bilinearly upsampled to the ground-truth resolution and
    clipped to [eps, 1 - eps] before scoring.
    """
    g = np.asarray(gt, dtype=np.float64)
    if len(side_masks) != len(level_weights):
        raise ValueError(f"{len(side_masks)} side masks but {len(level_weights)} level weights")
    w = ppa_weight_map(g, pool, gain)
    value = 0.0
    grads = []
    for lam, side in zip(level_weights, side_masks):
        s = np.asarray(side, dtype=np.float64)
        up, rh, rw = _resample_stack(s[None], g.shape)
        up = up[0]
        if up.shape != g.shape:
            raise ValueError("side mask does not match the ground truth after upsampling")
        v, dg = _ppa_level(up, g, w, eps)
        value += lam * v
        grads.append(lam * _resample_back(dg[None], rh, rw)[0])
    return (value, grads) if return_grad else value


def stage2_loss(is_l: float, ppa_l: float) -> float:
    return is_l + ppa_l


# ---------------------------------------------------------------- candidates and assignment


class AnchorGrid:
    """Cell centers of the detection grids, level by level, row-major within a level."""

    def __init__(self, input_size: int = DEFAULTS.input_size, grid_sizes: Sequence[int] = DEFAULTS.grid_sizes):
        self.input_size = input_size
        self.grid_sizes = tuple(grid_sizes)
        self.strides = tuple(input_size / g for g in self.grid_sizes)
        centers, levels = [], []
        for lvl, (g, s) in enumerate(zip(self.grid_sizes, self.strides)):
            c = (np.arange(g) + 0.5) * s
            yy, xx = np.meshgrid(c, c, indexing="ij")
            centers.append(np.stack([xx.ravel(), yy.ravel()], axis=1))
            levels.append(np.full(g * g, lvl))
        self.centers = np.concatenate(centers)
        self.levels = np.concatenate(levels)

    def __len__(self) -> int:
        return len(self.centers)

    def decode(self, offsets) -> np.ndarray:
        """(top, left, bottom, right) distances from each cell center to boxes."""
        o = np.asarray(offsets, dtype=np.float64)
        cx, cy = self.centers[:, 0], self.centers[:, 1]
        return np.stack([cx - o[:, 1], cy - o[:, 0], cx + o[:, 3], cy + o[:, 2]], axis=1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def assignment_cost(grid: AnchorGrid, decoded: np.ndarray, gt_boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(cost, iou) tables of shape (candidates, gts).

    cost = -IoU + 0.5 * distance(cell center, gt center) / input size.
    """
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    ious = iou_matrix(decoded, gt)
    gc = np.stack([(gt[:, 0] + gt[:, 2]) / 2, (gt[:, 1] + gt[:, 3]) / 2], axis=1)
    dist = np.sqrt(((grid.centers[:, None, :] - gc[None, :, :]) ** 2).sum(axis=2))
    return -ious + 0.5 * dist / grid.input_size, ious


def assign_labels(grid: AnchorGrid, decoded_boxes, confidences, gt_boxes) -> list[tuple[int, int, float]]:
    """SIMPLIFIED greedy stand-in for dynamic soft label assignment.

    Ground truths, taken by descending area (stable), each claim their
    cheapest unclaimed candidate (ties: lowest index). Confidences do not
    enter this simplified cost. Returns (candidate, gt, IoU) triples in gt
    processing order; the IoU is the quality target y for the box and
    confidence losses.
    """
    decoded = np.asarray(decoded_boxes, dtype=np.float64)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(decoded) != len(grid):
        raise ValueError(f"expected {len(grid)} decoded boxes, got {len(decoded)}")
    if len(gt) > len(grid):
        raise ValueError("more ground truths than candidates")
    if len(gt) == 0:
        return []
    cost, ious = assignment_cost(grid, decoded, gt)
    areas = (gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1])
    order = sorted(range(len(gt)), key=lambda j: -areas[j])
    taken = np.zeros(len(grid), dtype=bool)
    pairs = []
    for j in order:
        c = np.where(taken, np.inf, cost[:, j])
        i = int(np.argmin(c))
        taken[i] = True
        pairs.append((i, j, float(ious[i, j])))
    return pairs
