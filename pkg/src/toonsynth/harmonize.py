"""Post-placement color harmonization: K-means color quantization and histogram matching."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.cluster.vq import vq

from .structures import AnnotatedSample

MODES = ("none", "quantize", "histogram_match")


@dataclass
class Palette:
    centers: np.ndarray
    objective: float
    history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.centers)


def _pick_weighted(rng: np.random.Generator, weights: np.ndarray) -> int:
    cum = np.cumsum(weights)
    return int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))


def kmeans_plus_plus(points: np.ndarray, weights: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Weighted k-means++ seeding. Returns fewer than k centers if the data has fewer distinct points."""
    idx = [min(_pick_weighted(rng, weights), len(points) - 1)]
    d2 = ((points - points[idx[0]]) ** 2).sum(axis=1)
    while len(idx) < k:
        score = weights * d2
        if score.sum() <= 0:
            break
        j = min(_pick_weighted(rng, score), len(points) - 1)
        idx.append(j)
        d2 = np.minimum(d2, ((points - points[j]) ** 2).sum(axis=1))
    return points[idx].copy()


def kmeans(
    points: np.ndarray,
    weights: np.ndarray,
    k: int,
    rng: np.random.Generator,
    max_iter: int = 50,
    tol: float = 1e-4,
) -> tuple[Palette, np.ndarray]:
    """Weighted Lloyd iterations from k-means++ seeds.

    Stops after ``max_iter`` assignment steps or once no center moves by
    ``tol`` or more. ``Palette.history`` holds the weighted SSE measured at
    each assignment step.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    points = np.asarray(points, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    centers = kmeans_plus_plus(points, weights, k, rng)
    history: list[float] = []
    labels = np.zeros(len(points), dtype=np.intp)
    for _ in range(max_iter):
        labels, dist = vq(points, centers, check_finite=False)
        history.append(float((weights * dist**2).sum()))
        mass = np.bincount(labels, weights=weights, minlength=len(centers))
        new = centers.copy()
        filled = mass > 0
        for c in range(points.shape[1]):
            sums = np.bincount(labels, weights=weights * points[:, c], minlength=len(centers))
            new[filled, c] = sums[filled] / mass[filled]
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < tol:
            break
    labels, dist = vq(points, centers, check_finite=False)
    return Palette(centers, float((weights * dist**2).sum()), history), labels


def _unique_colors(img: np.ndarray):
    pixels = img.reshape(-1, img.shape[-1])
    if img.dtype == np.uint8 and img.shape[-1] == 3:
        packed = (pixels[:, 0].astype(np.int32) << 16) | (pixels[:, 1].astype(np.int32) << 8) | pixels[:, 2]
        keys, inverse, counts = np.unique(packed, return_inverse=True, return_counts=True)
        colors = np.stack([(keys >> 16) & 255, (keys >> 8) & 255, keys & 255], axis=1) / 255.0
        return colors, inverse, counts
    colors, inverse, counts = np.unique(pixels.astype(np.float64), axis=0, return_inverse=True, return_counts=True)
    return colors, inverse.ravel(), counts


CORESET_LIMIT = 4096
CORESET_CELLS = 16


def color_coreset(colors: np.ndarray, counts: np.ndarray, cells: int = CORESET_CELLS) -> tuple[np.ndarray, np.ndarray]:
    """Group colors into cells^3 RGB cells; each cell becomes its exact mean color weighted by pixel count."""
    idx = np.minimum((colors * cells).astype(np.int64), cells - 1)
    key = (idx[:, 0] * cells + idx[:, 1]) * cells + idx[:, 2]
    _, group = np.unique(key, return_inverse=True)
    group = group.ravel()
    weights = np.bincount(group, weights=counts).astype(np.float64)
    means = np.stack(
        [np.bincount(group, weights=counts * colors[:, c]) for c in range(colors.shape[1])], axis=1
    ) / weights[:, None]
    return means, weights


def quantize_colors(
    img: np.ndarray,
    k: int,
    rng: np.random.Generator,
    max_iter: int = 50,
    tol: float = 1e-4,
    return_palette: bool = False,
):
    """Replace every pixel by its nearest K-means (RGB) cluster center; at most ``k`` colors remain.

    Clustering runs over distinct colors weighted by their pixel counts, which
    is the same objective as clustering every pixel. Images with more than
    ``CORESET_LIMIT`` distinct colors are clustered on a color coreset (see
    :func:`color_coreset`) and every pixel then takes its nearest center.
    uint8 input gives uint8 output (centers rounded); float input keeps exact
    float centers.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    img = np.asarray(img)
    if img.size == 0:
        raise ValueError("cannot quantize an empty image")
    colors, inverse, counts = _unique_colors(img)
    if len(colors) > CORESET_LIMIT:
        points, weights = color_coreset(colors, counts)
        palette, _ = kmeans(points, weights, k, rng, max_iter, tol)
        labels, _ = vq(colors, palette.centers, check_finite=False)
    else:
        palette, labels = kmeans(colors, counts, k, rng, max_iter, tol)
    centers = palette.centers
    if img.dtype == np.uint8:
        table = np.floor(np.clip(centers, 0, 1) * 255.0 + 0.5).astype(np.uint8)
    else:
        table = centers.astype(img.dtype)
    out = table[labels][inverse].reshape(img.shape)
    return (out, palette) if return_palette else out


# ---------------------------------------------------------------- histogram matching


def _levels(values: np.ndarray) -> np.ndarray:
    if values.dtype == np.uint8:
        return values
    return np.floor(np.clip(values, 0, 1) * 255.0 + 0.5).astype(np.uint8)


def matching_lut(src_levels: np.ndarray, ref_levels: np.ndarray) -> np.ndarray:
    """256-entry monotone map v -> min{u : F_ref(u) >= F_src(v)} on one channel.

    CDFs are compared as exact integer cross-products.
    """
    hs = np.bincount(src_levels.ravel(), minlength=256).astype(np.int64)
    hr = np.bincount(ref_levels.ravel(), minlength=256).astype(np.int64)
    ns, nr = int(hs.sum()), int(hr.sum())
    if ns == 0 or nr == 0:
        return np.arange(256, dtype=np.uint8)
    cs = np.cumsum(hs) * nr
    cr = np.cumsum(hr) * ns
    lut = np.searchsorted(cr, cs, side="left")
    return np.minimum(lut, 255).astype(np.uint8)


def match_pixels(src: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Match (N, C) uint8 pixels channel-by-channel to the distribution of (M, C) pixels."""
    out = np.empty_like(src)
    for c in range(src.shape[1]):
        out[:, c] = matching_lut(src[:, c], ref[:, c])[src[:, c]]
    return out


def histogram_match(src: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Per-channel CDF matching on 256-level histograms. Output dtype follows ``src``."""
    src = np.asarray(src)
    ref = np.asarray(ref)
    if src.ndim != 3 or ref.ndim != 3 or src.shape[2] != 3 or ref.shape[2] != 3:
        raise ValueError("histogram_match expects two HxWx3 images")
    s = _levels(src)
    r = _levels(ref)
    out = match_pixels(s.reshape(-1, 3), r.reshape(-1, 3)).reshape(s.shape)
    if src.dtype == np.uint8:
        return out
    return out.astype(np.float32) / np.float32(255.0)


# ---------------------------------------------------------------- per-sample


def plan_harmonization(
    rng: np.random.Generator,
    mode: str,
    n_instances: int,
    k_choices=(12, 16, 32),
) -> dict:
    if mode not in MODES:
        raise ValueError(f"unknown harmonization mode {mode!r}")
    if mode == "quantize":
        return {"mode": mode, "k": int(k_choices[int(rng.integers(len(k_choices)))])}
    if mode == "histogram_match":
        if n_instances == 0:
            raise ValueError("histogram matching needs at least one instance")
        return {"mode": mode, "ref_index": int(rng.integers(n_instances))}
    return {"mode": "none"}


def apply_harmonization(
    sample: AnnotatedSample,
    record: dict,
    rng: np.random.Generator | None = None,
    max_iter: int = 50,
    tol: float = 1e-4,
) -> AnnotatedSample:
    mode = record.get("mode", "none")
    if mode == "none":
        return replace(sample, image=sample.image.copy())
    if mode == "quantize":
        if rng is None:
            raise ValueError("quantization needs a generator")
        img = quantize_colors(sample.image, int(record["k"]), rng, max_iter, tol)
        return replace(sample, image=img)
    if mode == "histogram_match":
        if not sample.instances:
            raise ValueError("histogram matching needs at least one instance")
        ref_index = int(record["ref_index"])
        img = _levels(sample.image).copy()
        ref_mask = sample.instances[ref_index].modal_mask
        ref_pixels = img[ref_mask]
        regions = [inst.modal_mask for i, inst in enumerate(sample.instances) if i != ref_index]
        covered = np.zeros(img.shape[:2], dtype=bool)
        for inst in sample.instances:
            covered |= inst.modal_mask
        regions.append(~covered)
        for region in regions:
            if region.any():
                img[region] = match_pixels(img[region], ref_pixels)
        if sample.image.dtype != np.uint8:
            img = img.astype(np.float32) / np.float32(255.0)
        return replace(sample, image=img)
    raise ValueError(f"unknown harmonization mode {mode!r}")


def harmonize_sample(
    sample: AnnotatedSample,
    mode: str,
    rng: np.random.Generator,
    k_choices=(12, 16, 32),
) -> AnnotatedSample:
    """Apply one harmonization mode. Masks and boxes are never touched.

    ``quantize`` draws k from ``k_choices``; ``histogram_match`` draws the
    reference instance and matches every other instance and the background to it.
    """
    record = plan_harmonization(rng, mode, len(sample.instances), k_choices)
    out = apply_harmonization(sample, record, rng)
    if out.layout is not None:
        out.layout = dict(out.layout, harmonization=record)
    return out
