"""Self-check suite: loss gradients against finite differences, metric oracles, determinism."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import losses, metrics
from .config import LossConfig, RunConfig

FD_STEP = 1e-4
GRAD_TOL = 1e-4
PERFECT_TOL = 1e-5


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    g = np.zeros_like(x, dtype=np.float64)
    for i in np.ndindex(x.shape):
        up = x.copy()
        up[i] += h
        down = x.copy()
        down[i] -= h
        g[i] = (f(up) - f(down)) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


# ---------------------------------------------------------------- random inputs away from kinks


def random_box_pairs(rng: np.random.Generator, n: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Boxes whose edges differ by more than the step so no max/min switches inside the stencil."""
    while True:
        xy = rng.uniform(0, 10, (2, n, 2))
        wh = rng.uniform(1, 6, (2, n, 2))
        p = np.concatenate([xy[0], xy[0] + wh[0]], axis=1)
        g = np.concatenate([xy[1], xy[1] + wh[1]], axis=1)
        edges_p = p[:, [0, 2, 0, 2, 1, 3, 1, 3]]
        edges_g = g[:, [0, 2, 2, 0, 1, 3, 3, 1]]
        if np.abs(edges_p - edges_g).min() > 10 * FD_STEP:
            return p, g


def _grad_check(name: str, points: int, seed: int, make, value, grad) -> CheckResult:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(points):
        x, ctx = make(rng)
        analytic = grad(x, ctx)
        numeric = central_difference(lambda v: value(v, ctx), x)
        worst = max(worst, relative_error(analytic, numeric))
    ok = worst < GRAD_TOL
    return CheckResult(name, ok, f"max relative error {worst:.2e} over {points} points", time.perf_counter() - t0)


def gradient_checks(kernels: Mapping[str, Callable], points: int = 100, seed: int = 0) -> list[CheckResult]:
    giou = kernels["giou_loss"]
    qfl = kernels["quality_focal_loss"]
    dice = kernels["dice_loss"]
    mse = kernels["feature_mse_loss"]
    ppa = kernels["ppa_loss"]
    out = []

    out.append(_grad_check(
        "gradient: giou (standard)", points, seed,
        lambda r: random_box_pairs(r),
        lambda x, g: giou(x, g),
        lambda x, g: giou(x, g, return_grad=True)[1],
    ))
    out.append(_grad_check(
        "gradient: quality focal (beta=2)", points, seed + 1,
        lambda r: (r.uniform(0.02, 0.98, 8), r.random(8)),
        lambda x, y: qfl(y, x, beta=2.0),
        lambda x, y: qfl(y, x, beta=2.0, return_grad=True)[1],
    ))
    out.append(_grad_check(
        "gradient: dice (eps=1e-6)", points, seed + 2,
        lambda r: (r.random((2, 4, 5)), r.random((2, 4, 5))),
        lambda x, g: dice(x, g, eps=1e-6),
        lambda x, g: dice(x, g, eps=1e-6, return_grad=True)[1],
    ))

    def mse_make(r):
        shapes = [(3, 4), (2, 2), (5,), (2, 3), (1, 4), (3,)]
        return np.concatenate([r.normal(size=s).ravel() for s in shapes]), [r.normal(size=s) for s in shapes]

    def mse_split(x, gt):
        parts, k = [], 0
        for g in gt:
            parts.append(x[k:k + g.size].reshape(g.shape))
            k += g.size
        return parts

    out.append(_grad_check(
        "gradient: feature MSE", points, seed + 3, mse_make,
        lambda x, gt: mse(mse_split(x, gt), gt),
        lambda x, gt: np.concatenate([g.ravel() for g in mse(mse_split(x, gt), gt, return_grad=True)[1]]),
    ))

    sizes = (8, 4, 4, 2, 8, 4)

    def ppa_make(r):
        gt = (r.random((8, 8)) > 0.5).astype(float)
        sides = [r.uniform(0.05, 0.95, (s, s)) for s in sizes]
        return np.concatenate([s.ravel() for s in sides]), gt

    def ppa_split(x):
        parts, k = [], 0
        for s in sizes:
            parts.append(x[k:k + s * s].reshape(s, s))
            k += s * s
        return parts

    out.append(_grad_check(
        "gradient: ppa", points, seed + 4, ppa_make,
        lambda x, gt: ppa(ppa_split(x), gt),
        lambda x, gt: np.concatenate([g.ravel() for g in ppa(ppa_split(x), gt, return_grad=True)[1]]),
    ))
    return out


def perfect_prediction_checks(kernels: Mapping[str, Callable], seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    boxes = random_box_pairs(rng)[0]
    y = rng.random(16)
    m = (rng.random((3, 24, 24)) > 0.5).astype(float)
    feats = [rng.normal(size=(4, 4)) for _ in range(6)]
    gt = np.zeros((32, 32))
    gt[8:24, 6:20] = 1.0
    values = {
        "giou": kernels["giou_loss"](boxes, boxes),
        "quality focal": kernels["quality_focal_loss"](y, y),
        "dice": kernels["dice_loss"](m, m),
        "feature MSE": kernels["feature_mse_loss"](feats, feats),
        "ppa": kernels["ppa_loss"]([gt] * 6, gt),
    }
    return [CheckResult(f"perfect prediction: {k}", 0 <= v < PERFECT_TOL, f"value {v:.3e}") for k, v in values.items()]


# ---------------------------------------------------------------- metric oracles


def brute_force_band(mask: np.ndarray, d: int) -> np.ndarray:
    """Pixels of ``mask`` within distance d of a false or out-of-bounds pixel, by exhaustive scan."""
    h, w = mask.shape
    padded = np.zeros((h + 2, w + 2), dtype=bool)
    padded[1:-1, 1:-1] = mask
    ys, xs = np.nonzero(~padded)
    out = np.zeros_like(mask)
    for y, x in zip(*np.nonzero(mask)):
        d2 = (ys - (y + 1)) ** 2 + (xs - (x + 1)) ** 2
        out[y, x] = d2.min() <= d * d
    return out


def brute_force_boundary_iou(g: np.ndarray, p: np.ndarray, d: int) -> float:
    bg, bp = brute_force_band(g, d), brute_force_band(p, d)
    inter = int((bg & bp).sum())
    union = int((bg | bp).sum())
    if union == 0:
        return 1.0
    return inter / union


def random_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    kind = rng.integers(3)
    if kind == 0:
        return rng.random((h, w)) < rng.uniform(0.1, 0.9)
    m = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        y0, x0 = rng.integers(0, h), rng.integers(0, w)
        m[y0:y0 + rng.integers(1, h), x0:x0 + rng.integers(1, w)] = True
    if kind == 2:
        m ^= rng.random((h, w)) < 0.05
    return m


def metric_checks(pairs: int = 200, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    bad = 0
    for _ in range(pairs):
        g, p = random_mask(rng, 32, 32), random_mask(rng, 32, 32)
        d = int(rng.integers(1, 4))
        if metrics.boundary_iou(g, p, d) != brute_force_boundary_iou(g, p, d):
            bad += 1
    out = [CheckResult("oracle: boundary IoU vs brute force", bad == 0, f"{bad} mismatches in {pairs} pairs",
                       time.perf_counter() - t0)]

    gt = [metrics.GroundTruth(0, metrics.BoundingBox(0, 0, 10, 10))]
    dets = [metrics.Detection(0, 0.9, metrics.BoundingBox(0, 0, 6, 10)),
            metrics.Detection(0, 0.8, metrics.BoundingBox(8, 0, 18, 10))]
    ap = metrics.average_precision(dets, gt).mean
    out.append(CheckResult("oracle: AP two-detection fixture = 0.3", ap == 0.3, f"mean AP {ap!r}"))
    perfect = metrics.average_precision([metrics.Detection(0, 1.0, gt[0].box)], gt).mean
    empty = metrics.average_precision([], gt).mean
    out.append(CheckResult("oracle: AP perfect = 1, empty = 0", perfect == 1.0 and empty == 0.0,
                           f"perfect {perfect}, empty {empty}"))
    return out


# ---------------------------------------------------------------- constants and determinism


def constant_checks() -> list[CheckResult]:
    cfg = LossConfig()
    run = RunConfig()
    facts = {
        "stage-1 weights (2, 1, 2)": (cfg.box_weight, cfg.conf_weight, cfg.mask_weight) == (2.0, 1.0, 2.0),
        "quality focal beta 2": cfg.qfl_beta == 2.0,
        "ppa level weights (1,1,1,1,1,5)": tuple(cfg.ppa_level_weights) == (1, 1, 1, 1, 1, 5),
        "dice resample 320": cfg.dice_size == 320,
        "8400 candidates on 80/40/20 grids": cfg.grid_sizes == (80, 40, 20) and len(losses.AnchorGrid()) == 8400,
        "canvas 720, lambda 2.5, IoU window (0.15, 0.8)": (run.canvas, run.poisson_lambda, run.iou_window) == (720, 2.5, (0.15, 0.8)),
    }
    return [CheckResult(f"constant: {k}", v, "ok" if v else "mismatch") for k, v in facts.items()]


def determinism_checks(seed: int = 0) -> list[CheckResult]:
    from .compositor import Pools, generate_sample, render_layout
    from .dataset_io import load_guide_boxes
    from .demo import demo_assets, demo_backgrounds

    t0 = time.perf_counter()

    def fresh_pools() -> Pools:
        rng = np.random.default_rng(seed)
        return Pools(demo_assets(rng, 6, 40, 120), demo_backgrounds(rng, 2))

    pools, other = fresh_pools(), fresh_pools()
    guides = load_guide_boxes()
    cfg = RunConfig(master_seed=seed)
    ok = True
    for idx in (0, 1, 2):
        a = generate_sample(idx, cfg, pools, guides)
        b = generate_sample(idx, cfg, other, guides)
        r = render_layout(a.layout, pools)
        ok &= np.array_equal(a.image, b.image) and np.array_equal(a.image, r.image)
    return [CheckResult("determinism: regenerate and replay 3 samples", bool(ok), "bit-identical" if ok else "differs",
                        time.perf_counter() - t0)]


def default_kernels() -> dict[str, Callable]:
    return {
        "giou_loss": losses.giou_loss,
        "quality_focal_loss": losses.quality_focal_loss,
        "dice_loss": losses.dice_loss,
        "feature_mse_loss": losses.feature_mse_loss,
        "ppa_loss": losses.ppa_loss,
    }


def run_checks(overrides: Mapping[str, Callable] | None = None, points: int = 100, seed: int = 0) -> list[CheckResult]:
    """Run every check. ``overrides`` replaces loss kernels by name (used for fault injection)."""
    kernels = default_kernels()
    kernels.update(overrides or {})
    results = gradient_checks(kernels, points, seed)
    results += perfect_prediction_checks(kernels, seed)
    results += metric_checks(seed=seed)
    results += constant_checks()
    results += determinism_checks(seed)
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(width)}  status  detail"]
    for r in results:
        lines.append(f"{r.name.ljust(width)}  {'PASS' if r.ok else 'FAIL':6}  {r.detail}")
    return "\n".join(lines)
