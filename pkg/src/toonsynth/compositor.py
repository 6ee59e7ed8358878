"""Scene synthesis: subject count, augmentation, placement, background crop and rasterization.

A sample is first planned as a JSON-serializable layout (which assets, how
they are warped, where they go, how the background is cropped and which
harmonization runs) and then rendered. Rendering a stored layout reproduces
the sample bit-exactly, so every emitted image can be audited or regenerated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import harmonize, rng as rngmod
from .config import AugmentConfig, RunConfig
from .dataset_io import GuideBundle, GuidePhoto, PoolManifest, list_backgrounds
from .errors import InsufficientGuides, MissingAsset, NoFeasiblePosition
from .imaging import (
    apply_grid_distortion,
    flip_horizontal,
    grid_steps,
    load_png,
    long_side_size,
    resize,
    resize_window,
    to_float,
    to_uint8,
    warp_rotate,
)
from .structures import AnnotatedSample, BoundingBox, Instance, InstanceAsset, tight_box

LAYOUT_VERSION = 1
STRATEGIES = ("photo_guided", "side_by_side")


# ---------------------------------------------------------------- subject count


def sample_subject_count(rng, lam: float = 2.5, cap: int = 12) -> int:
    """Poisson(lam) conditioned on 1 <= N <= cap, by redrawing rejected values."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    while True:
        n = int(rng.poisson(lam))
        if 1 <= n <= cap:
            return n


def sample_subject_counts(rng: np.random.Generator, size: int, lam: float = 2.5, cap: int = 12) -> np.ndarray:
    """Vectorized ``sample_subject_count`` for Monte Carlo use."""
    out = rng.poisson(lam, size=size)
    bad = (out < 1) | (out > cap)
    while bad.any():
        out[bad] = rng.poisson(lam, size=int(bad.sum()))
        bad = (out < 1) | (out > cap)
    return out


def truncated_poisson_mean(lam: float) -> float:
    return lam / (1.0 - math.exp(-lam))


# ---------------------------------------------------------------- choices


def weighted_choice(rng: np.random.Generator, weights: Mapping[str, float], order: Sequence[str]) -> str:
    """Pick a key of ``weights`` with one uniform draw; keys are scanned in ``order``."""
    keys = [k for k in order if weights.get(k, 0.0) > 0]
    if not keys:
        raise ValueError(f"no positive weight in {dict(weights)}")
    cum = np.cumsum([weights[k] for k in keys])
    i = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    return keys[min(i, len(keys) - 1)]


# ---------------------------------------------------------------- augmentation


@dataclass
class AugmentParams:
    """One asset's augmentation draw: flip, at most one warp, and the resized long side."""

    flip: bool
    warp: dict | None
    long_side: int

    def to_dict(self) -> dict:
        return {"flip": self.flip, "warp": self.warp, "long_side": self.long_side}

    @classmethod
    def from_dict(cls, d: Mapping) -> "AugmentParams":
        return cls(bool(d["flip"]), d.get("warp"), int(d["long_side"]))


def long_side_bounds(cfg: AugmentConfig, canvas: int) -> tuple[int, int]:
    lo = math.ceil(cfg.long_side_range[0] * canvas - 1e-9)
    hi = math.floor(cfg.long_side_range[1] * canvas + 1e-9)
    return max(1, lo), max(1, hi)


def sample_augmentation(rng: np.random.Generator, cfg: AugmentConfig | None = None, canvas: int = 720) -> AugmentParams:
    """Draw flip, warp kind and parameters, then the long side, always in that order."""
    cfg = cfg or AugmentConfig()
    flip = bool(rng.random() < cfg.flip_prob)
    warp = None
    if rng.random() < cfg.warp_prob:
        if rng.random() < 0.5:
            xs, ys = grid_steps(rng, cfg.grid_cells, cfg.grid_limit)
            warp = {"kind": "grid", "x_steps": [float(v) for v in xs], "y_steps": [float(v) for v in ys]}
        else:
            deg = float(rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg))
            warp = {"kind": "rotate", "degrees": deg}
    lo, hi = long_side_bounds(cfg, canvas)
    long_side = int(rng.integers(lo, hi + 1))
    return AugmentParams(flip, warp, long_side)


def warp_asset(rgba: np.ndarray, flip: bool, warp: dict | None) -> np.ndarray:
    """Flip, then warp, then crop to the tight box of alpha > 0.5."""
    out = to_float(rgba)
    if flip:
        out = flip_horizontal(out)
    if warp is not None:
        kind = warp["kind"]
        if kind == "grid":
            out = apply_grid_distortion(out, warp["x_steps"], warp["y_steps"])
        elif kind == "rotate":
            out = warp_rotate(out, warp["degrees"])
        else:
            raise ValueError(f"unknown warp kind {kind!r}")
    box = tight_box(out[..., 3] > 0.5)
    if box is not None:
        x0, y0, x1, y1 = box.as_tuple()
        out = out[y0:y1, x0:x1]
    return np.ascontiguousarray(out)


def augmented_size(prepared: np.ndarray, long_side: int) -> tuple[int, int]:
    h, w = prepared.shape[:2]
    return long_side_size(w, h, long_side)


def augment(asset: InstanceAsset, rng: np.random.Generator, cfg: AugmentConfig | None = None, canvas: int = 720) -> InstanceAsset:
    """Random flip, optional grid distortion or rotation, then long-side resize."""
    params = sample_augmentation(rng, cfg, canvas)
    prepared = warp_asset(asset.rgba, params.flip, params.warp)
    rgba = resize(prepared, augmented_size(prepared, params.long_side))
    provenance = dict(asset.provenance, augment=params.to_dict())
    return InstanceAsset(rgba, rgba[..., 3] > 0.5, provenance)


# ---------------------------------------------------------------- placement


def _aspect_cost(asset_aspect: float, box: BoundingBox) -> float:
    return abs(math.log(asset_aspect) - math.log(box.aspect))


def greedy_aspect_assignment(aspects: Sequence[float], boxes: Sequence[BoundingBox]) -> list[int]:
    """Assets in input order each take the free box closest in log aspect ratio (ties: lowest index)."""
    if len(boxes) < len(aspects):
        raise InsufficientGuides(f"{len(aspects)} assets but only {len(boxes)} guide boxes")
    free = list(range(len(boxes)))
    chosen = []
    for a in aspects:
        best = min(free, key=lambda j: (_aspect_cost(a, boxes[j]), j))
        chosen.append(best)
        free.remove(best)
    return chosen


def fit_in_box(w: int, h: int, box: BoundingBox, cap: int, canvas: int) -> BoundingBox:
    """Aspect-preserving size that fits inside ``box`` (long side capped), centered on it."""
    fit = min(box.width / w, box.height / h)
    long_target = max(1, min(int(math.floor(fit * max(w, h) + 1e-9)), cap))
    nw, nh = long_side_size(w, h, long_target)
    nw, nh = min(nw, canvas), min(nh, canvas)
    cx, cy = box.center
    x0 = min(max(int(math.floor(cx - nw / 2 + 0.5)), 0), canvas - nw)
    y0 = min(max(int(math.floor(cy - nh / 2 + 0.5)), 0), canvas - nh)
    return BoundingBox(x0, y0, x0 + nw, y0 + nh)


def photo_guided_placement(
    sizes: Sequence[tuple[int, int]],
    guide_boxes: Sequence[BoundingBox],
    canvas: int = 720,
    cap: int = 540,
) -> list[tuple[int, BoundingBox]]:
    """Assign each asset (given as (w, h)) a guide box; returns (box index, target box) pairs."""
    chosen = greedy_aspect_assignment([w / h for w, h in sizes], guide_boxes)
    return [(j, fit_in_box(w, h, guide_boxes[j], cap, canvas)) for (w, h), j in zip(sizes, chosen)]


def _overlap_1d(length: int, other_lo: int, other_hi: int, positions: np.ndarray) -> np.ndarray:
    return np.clip(np.minimum(positions + length, other_hi) - np.maximum(positions, other_lo), 0, None)


def feasible_positions(
    w: int,
    h: int,
    against: Sequence[BoundingBox],
    canvas: int = 720,
    iou_window: tuple[float, float] = (0.15, 0.8),
) -> np.ndarray:
    """Boolean (y, x) grid of top-left corners whose box lies inside the canvas
    and has IoU within the window with every box in ``against``."""
    if w > canvas or h > canvas:
        return np.zeros((0, 0), dtype=bool)
    xs = np.arange(canvas - w + 1, dtype=np.int64)
    ys = np.arange(canvas - h + 1, dtype=np.int64)
    ok = np.ones((len(ys), len(xs)), dtype=bool)
    area = float(w * h)
    lo, hi = iou_window
    for b in against:
        ix = _overlap_1d(w, int(b.x_min), int(b.x_max), xs).astype(np.float64)
        iy = _overlap_1d(h, int(b.y_min), int(b.y_max), ys).astype(np.float64)
        inter = iy[:, None] * ix[None, :]
        union = area + float(b.area) - inter
        iou = inter / union
        ok &= (iou >= lo) & (iou <= hi)
    return ok


def side_by_side_placement(
    sizes: Sequence[tuple[int, int]],
    rng: np.random.Generator,
    canvas: int = 720,
    iou_window: tuple[float, float] = (0.15, 0.8),
    against_all: bool = False,
) -> list[BoundingBox]:
    """Place assets one after another, each overlapping the previous box within the IoU window.

    Every box lies fully inside the canvas. The first position is uniform;
    later ones are uniform over the exhaustive integer grid of feasible
    top-left corners (against every earlier box when ``against_all``).

    Raises:
        NoFeasiblePosition: some asset has no admissible position.
    """
    boxes: list[BoundingBox] = []
    for i, (w, h) in enumerate(sizes):
        against = [] if i == 0 else (boxes if against_all else [boxes[-1]])
        ok = feasible_positions(w, h, against, canvas, iou_window)
        flat = np.flatnonzero(ok)
        if flat.size == 0:
            raise NoFeasiblePosition(f"no feasible position for asset {i} of size {w}x{h}")
        k = flat[int(rng.integers(flat.size))]
        y, x = divmod(int(k), ok.shape[1])
        boxes.append(BoundingBox(x, y, x + w, y + h))
    return boxes


# ---------------------------------------------------------------- background


def cover_size(w: int, h: int, canvas: int = 720) -> tuple[int, int]:
    """Smallest aspect-preserving size covering canvas x canvas."""
    s = max(canvas / w, canvas / h)
    return max(canvas, int(math.floor(w * s + 0.5))), max(canvas, int(math.floor(h * s + 0.5)))


def plan_background_crop(w: int, h: int, rng: np.random.Generator, canvas: int = 720) -> dict:
    rw, rh = cover_size(w, h, canvas)
    x = int(rng.integers(rw - canvas + 1))
    y = int(rng.integers(rh - canvas + 1))
    return {"source_size": [w, h], "resized_size": [rw, rh], "crop": [x, y, x + canvas, y + canvas]}


def apply_background_crop(bg: np.ndarray, plan: Mapping) -> np.ndarray:
    img = to_float(bg)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    img = img[..., :3]
    return resize_window(img, tuple(plan["resized_size"]), tuple(plan["crop"]))


def crop_background(bg: np.ndarray, rng: np.random.Generator, canvas: int = 720) -> np.ndarray:
    """Cover-resize to at least canvas x canvas, then take a uniformly random canvas-sized crop."""
    h, w = bg.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("empty background")
    return apply_background_crop(bg, plan_background_crop(w, h, rng, canvas))


# ---------------------------------------------------------------- pools


class Pools:
    """Foreground assets and backgrounds, loaded lazily and cached.

    ``foregrounds`` is a PoolManifest or a mapping of id to InstanceAsset;
    ``backgrounds`` is a list of PNG paths (id = file stem) or a mapping of
    id to image array.
    """

    def __init__(self, foregrounds, backgrounds):
        self._manifest = foregrounds if isinstance(foregrounds, PoolManifest) else None
        self._fg = {} if self._manifest is not None else dict(foregrounds)
        if isinstance(backgrounds, Mapping):
            self._bg = dict(backgrounds)
            self._bg_paths = {}
        else:
            self._bg = {}
            self._bg_paths = {Path(p).stem: Path(p) for p in backgrounds}
        self.fg_ids = self._manifest.ids() if self._manifest is not None else list(self._fg)
        self.bg_ids = sorted(self._bg_paths) if self._bg_paths else list(self._bg)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "Pools":
        if not cfg.foreground_manifest or not cfg.background_dir:
            raise ValueError("config needs foreground_manifest and background_dir")
        return cls(PoolManifest.load(cfg.foreground_manifest), list_backgrounds(cfg.background_dir))

    def asset(self, asset_id: str) -> InstanceAsset:
        if asset_id not in self._fg:
            if self._manifest is None or asset_id not in self._manifest:
                raise MissingAsset(f"unknown foreground asset {asset_id!r}")
            self._fg[asset_id] = self._manifest.load_asset(asset_id)
        return self._fg[asset_id]

    def background(self, bg_id: str) -> np.ndarray:
        if bg_id not in self._bg:
            if bg_id not in self._bg_paths:
                raise MissingAsset(f"unknown background {bg_id!r}")
            self._bg[bg_id] = load_png(self._bg_paths[bg_id])
        return self._bg[bg_id]


# ---------------------------------------------------------------- rasterization


def render_placement(asset: InstanceAsset, transform: Mapping, size: Sequence[int]) -> np.ndarray:
    prepared = warp_asset(asset.rgba, bool(transform["flip"]), transform.get("warp"))
    return resize(prepared, (int(size[0]), int(size[1])))


def rasterize(layout: Mapping, pools: Pools, prepared: Mapping[int, np.ndarray] | None = None) -> AnnotatedSample:
    """Alpha-over every placement in ascending z onto the cropped background.

    amodal = placed alpha > 0.5; modal = amodal minus every amodal mask above
    it. Fully occluded instances are dropped. ``prepared`` may hold already
    warped and cropped rasters keyed by z to skip recomputation.
    """
    canvas = int(layout["canvas"])
    bg = layout["background"]
    image = apply_background_crop(pools.background(bg["bg_id"]), bg)
    placements = sorted(layout["placements"], key=lambda p: p["z"])
    amodals = []
    for p in placements:
        x0, y0, x1, y1 = (int(v) for v in p["target_box"])
        if prepared is not None and p["z"] in prepared:
            rgba = resize(prepared[p["z"]], (x1 - x0, y1 - y0))
        else:
            rgba = render_placement(pools.asset(p["asset_id"]), p["transform"], (x1 - x0, y1 - y0))
        cx0, cy0, cx1, cy1 = max(x0, 0), max(y0, 0), min(x1, canvas), min(y1, canvas)
        amodal = np.zeros((canvas, canvas), dtype=bool)
        if cx0 < cx1 and cy0 < cy1:
            patch = rgba[cy0 - y0:cy1 - y0, cx0 - x0:cx1 - x0]
            a = patch[..., 3:4]
            region = image[cy0:cy1, cx0:cx1]
            image[cy0:cy1, cx0:cx1] = patch[..., :3] * a + region * (1.0 - a)
            amodal[cy0:cy1, cx0:cx1] = patch[..., 3] > 0.5
        amodals.append(amodal)
    above = np.zeros((canvas, canvas), dtype=bool)
    instances: list[Instance] = []
    for p, amodal in zip(reversed(placements), reversed(amodals)):
        modal = amodal & ~above
        above |= amodal
        box = tight_box(modal)
        if box is not None:
            instances.append(Instance(modal, amodal, box, p["asset_id"]))
    instances.reverse()
    return AnnotatedSample(to_uint8(image), instances, dict(layout))


def render_layout(layout: Mapping, pools: Pools, prepared: Mapping[int, np.ndarray] | None = None) -> AnnotatedSample:
    """Rasterize a layout and apply its recorded harmonization (the replay path)."""
    sample = rasterize(layout, pools, prepared)
    record = layout.get("harmonization") or {"mode": "none"}
    opts = layout.get("kmeans", {})
    krng = rngmod.stream(int(layout["master_seed"]), int(layout["sample_index"]), "kmeans")
    out = harmonize.apply_harmonization(
        sample, record, krng, int(opts.get("max_iter", 50)), float(opts.get("tol", 1e-4))
    )
    out.layout = dict(layout)
    return out


# ---------------------------------------------------------------- sample generation


def _choose_assets(rng: np.random.Generator, ids: Sequence[str], n: int) -> list[str]:
    if not ids:
        raise MissingAsset("foreground pool is empty")
    replace = len(ids) < n
    picks = rng.choice(len(ids), size=n, replace=replace)
    return [ids[int(i)] for i in picks]


def plan_layout(
    index: int,
    cfg: RunConfig,
    pools: Pools,
    guides: GuideBundle | None,
) -> tuple[dict, dict[int, np.ndarray]]:
    """Decide everything about sample ``index`` except pixels.

    Returns the layout and the warped asset rasters computed on the way.
    """
    ms = cfg.master_seed
    n = sample_subject_count(rngmod.stream(ms, index, "count"), cfg.poisson_lambda, cfg.max_subjects)
    asset_ids = _choose_assets(rngmod.stream(ms, index, "assets"), pools.fg_ids, n)

    bg_rng = rngmod.stream(ms, index, "background")
    if not pools.bg_ids:
        raise MissingAsset("background pool is empty")
    bg_id = pools.bg_ids[int(bg_rng.integers(len(pools.bg_ids)))]
    bg = pools.background(bg_id)
    bg_plan = plan_background_crop(bg.shape[1], bg.shape[0], bg_rng, cfg.canvas)

    strat_rng = rngmod.stream(ms, index, "strategy")
    strategy = weighted_choice(strat_rng, cfg.strategy_weights, STRATEGIES)
    eligible: list[GuidePhoto] = guides.eligible(n) if guides is not None else []

    aug_rng = rngmod.stream(ms, index, "augment")
    place_rng = rngmod.stream(ms, index, "placement")
    cap = int(math.floor(cfg.guide_long_side_cap * cfg.canvas + 1e-9))

    def draw_assets():
        params = [sample_augmentation(aug_rng, cfg.augment, cfg.canvas) for _ in asset_ids]
        rasters = [warp_asset(pools.asset(a).rgba, p.flip, p.warp) for a, p in zip(asset_ids, params)]
        return params, rasters

    params, rasters = draw_assets()
    fallback = None
    attempts = 1
    guide_photo = None
    boxes: list[BoundingBox] | None = None

    if strategy == "photo_guided" and not eligible:
        strategy, fallback = "side_by_side", "no_eligible_guides"
    if strategy == "side_by_side":
        for attempt in range(cfg.placement_retries + 1):
            if attempt:
                params, rasters = draw_assets()
                attempts += 1
            sizes = [augmented_size(r, p.long_side) for r, p in zip(rasters, params)]
            try:
                boxes = side_by_side_placement(
                    sizes, place_rng, cfg.canvas, cfg.iou_window, cfg.side_by_side_against_all
                )
                break
            except NoFeasiblePosition:
                boxes = None
        if boxes is None:
            if not eligible:
                raise NoFeasiblePosition(
                    f"sample {index}: side-by-side failed {attempts} times and no guide photo has {n} boxes"
                )
            strategy, fallback = "photo_guided", "side_by_side_infeasible"
    if strategy == "photo_guided":
        photo = eligible[int(place_rng.integers(len(eligible)))]
        guide_photo = photo.photo_id
        shapes = [(r.shape[1], r.shape[0]) for r in rasters]
        pairs = photo_guided_placement(shapes, photo.boxes, cfg.canvas, cap)
        boxes = [b for _, b in pairs]
        guide_indices = [j for j, _ in pairs]

    placements = []
    for z, (aid, p, b) in enumerate(zip(asset_ids, params, boxes)):
        entry = {
            "asset_id": aid,
            "z": z,
            "transform": p.to_dict(),
            "target_box": [int(v) for v in b.as_tuple()],
        }
        if strategy == "photo_guided":
            entry["guide_box_index"] = guide_indices[z]
        placements.append(entry)

    layout = {
        "version": LAYOUT_VERSION,
        "sample_index": int(index),
        "master_seed": int(ms),
        "seed": int(rngmod.sample_seed(ms, index)),
        "canvas": int(cfg.canvas),
        "background": {"bg_id": bg_id, **bg_plan},
        "strategy": strategy,
        "guide_photo": guide_photo,
        "placements": placements,
        "attempts": attempts,
        "fallback": fallback,
        "kmeans": {"max_iter": cfg.kmeans_max_iter, "tol": cfg.kmeans_tol},
    }
    return layout, dict(enumerate(rasters))


def generate_sample(
    index: int,
    cfg: RunConfig,
    pools: Pools,
    guides: GuideBundle | None = None,
) -> AnnotatedSample:
    """Plan, rasterize and harmonize sample ``index``; a pure function of its inputs."""
    layout, prepared = plan_layout(index, cfg, pools, guides)
    sample = rasterize(layout, pools, prepared)
    h_rng = rngmod.stream(cfg.master_seed, index, "harmonize")
    mode = weighted_choice(h_rng, cfg.harmonization_weights, harmonize.MODES)
    if mode == "histogram_match" and not sample.instances:
        mode = "none"
    record = harmonize.plan_harmonization(h_rng, mode, len(sample.instances), cfg.quantize_k_choices)
    layout["harmonization"] = record
    krng = rngmod.stream(cfg.master_seed, index, "kmeans")
    out = harmonize.apply_harmonization(sample, record, krng, cfg.kmeans_max_iter, cfg.kmeans_tol)
    out.layout = layout
    return out
