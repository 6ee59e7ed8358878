"""Keying-color estimation and background-free instance extraction for chroma-key frames."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import cv2
import numpy as np
from scipy import ndimage

from .errors import EmptyForeground, ZeroSupport
from .imaging import rgb_to_hsv, to_float
from .structures import InstanceAsset, tight_box

EIGHT_CONN = np.ones((3, 3), dtype=bool)
FOUR_CONN = ndimage.generate_binary_structure(2, 1)


def sample_frames(frame_paths: Sequence, source_fps: float, target_fps: float = 3.0) -> list:
    """Keep frames at indices floor(k * source_fps / target_fps), k = 0, 1, ..."""
    if len(frame_paths) == 0:
        raise ValueError("no frames to sample")
    if source_fps <= 0 or target_fps <= 0:
        raise ValueError("frame rates must be positive")
    stride = source_fps / target_fps
    picked: list[int] = []
    k = 0
    while True:
        idx = int(math.floor(k * stride))
        if idx >= len(frame_paths):
            break
        if not picked or picked[-1] != idx:
            picked.append(idx)
        k += 1
    return [frame_paths[i] for i in picked]


@dataclass
class HueHistogram:
    """Counts of gated pixels (S >= gate, V >= gate) in equal hue bins over [0, 1)."""

    counts: np.ndarray
    total_pixels: int

    @property
    def bins(self) -> int:
        return len(self.counts)

    @property
    def bin_width(self) -> float:
        return 1.0 / self.bins

    def centers(self) -> np.ndarray:
        return (np.arange(self.bins) + 0.5) / self.bins

    def window_counts(self, half_bins: int) -> np.ndarray:
        """Circular sums over bins j-half_bins .. j+half_bins for every j."""
        c = self.counts
        n = len(c)
        ext = np.concatenate([c[n - half_bins:], c, c[:half_bins]]) if half_bins else c
        cs = np.concatenate([[0], np.cumsum(ext)])
        width = 2 * half_bins + 1
        return cs[width:width + n] - cs[:n]

    def recenter(self, j: int, half_bins: int) -> int:
        """Shift window ``j`` onto the count-weighted mean bin offset inside it."""
        offsets = np.arange(-half_bins, half_bins + 1)
        c = self.counts[(j + offsets) % self.bins]
        total = c.sum()
        if total == 0:
            return j
        shift = int(np.floor((offsets * c).sum() / total + 0.5))
        return (j + shift) % self.bins


@dataclass
class KeyingEstimate:
    hue_star: float
    support: int
    coverage: float


def hue_histogram(frame: np.ndarray, bins: int = 200, gate: float = 0.95) -> HueHistogram:
    frame = np.asarray(frame)[..., :3]
    if frame.dtype == np.uint8:
        rgb = frame.astype(np.float32) * np.float32(1.0 / 255.0)
    else:
        rgb = np.ascontiguousarray(frame, dtype=np.float32)
    # hue stays in degrees here; binning over [0, 360) equals binning over [0, 1)
    hsv = cv2.cvtColor(rgb, cv2.COLOR_RGB2HSV)
    # S and V never exceed 1, so the gate is min(S, V) >= gate; a bool array is a valid 0/1 mask
    sel = (np.minimum(hsv[..., 1], hsv[..., 2]) >= np.float32(gate)).view(np.uint8)
    counts = cv2.calcHist([hsv], [0], sel, [bins], [0.0, 360.0]).ravel().astype(np.int64)
    return HueHistogram(counts, hsv.shape[0] * hsv.shape[1])


def estimate_keying_hue(
    frame: np.ndarray, bins: int = 200, gate: float = 0.95, half_window: float = 0.025
) -> KeyingEstimate:
    """Find the hue whose circular window holds the most saturated, bright pixels.

    Candidates are bin centers and a candidate's window counts every bin whose
    center lies within ``half_window`` of it (5 bins either side at the
    defaults). Every window touching the dominant hue scores alike, so the
    winning window (smallest hue on ties) is re-centered on the mean bin of
    the pixels it holds. ``support`` is the count of the final window.

    Raises:
        ZeroSupport: no pixel passes the saturation/value gate.
    """
    hist = hue_histogram(frame, bins, gate)
    if hist.counts.sum() == 0:
        raise ZeroSupport("no pixel with saturation and value above the keying gate")
    half_bins = int(round(half_window * bins))
    win = hist.window_counts(half_bins)
    j = hist.recenter(int(np.argmax(win)), half_bins)
    support = int(win[j])
    return KeyingEstimate(
        hue_star=(j + 0.5) / bins,
        support=support,
        coverage=support / hist.total_pixels,
    )


def majority_key(estimates: Sequence[KeyingEstimate]) -> float:
    """Most frequent hue_star across frames of one video (ties: smallest hue)."""
    if not estimates:
        raise ValueError("no estimates")
    votes = Counter(e.hue_star for e in estimates)
    top = max(votes.values())
    return min(h for h, n in votes.items() if n == top)


def background_predicate(
    frame: np.ndarray, hue_star: float, gate: float = 0.90, half_window: float = 0.025
) -> np.ndarray:
    hsv = rgb_to_hsv(np.asarray(frame)[..., :3]).astype(np.float64)
    d = np.abs(hsv[..., 0] - hue_star)
    d = np.minimum(d, 1.0 - d)
    return (d <= half_window + 1e-9) & (hsv[..., 1] >= gate) & (hsv[..., 2] >= gate)


def extract_instance(
    frame: np.ndarray,
    key: KeyingEstimate | float,
    *,
    color: np.ndarray | None = None,
    gate: float = 0.90,
    half_window: float = 0.025,
    min_area: int = 0,
) -> InstanceAsset:
    """Cut the subject out of a chroma-key frame.

    ``frame`` drives the keying decision; ``color`` (defaults to ``frame``)
    supplies the asset pixels, so a prefiltered frame can key an unfiltered one.
    The result is cropped to the tight box of the foreground mask.
    """
    hue_star = key.hue_star if isinstance(key, KeyingEstimate) else float(key)
    background = background_predicate(frame, hue_star, gate, half_window)
    mask = ~background
    if min_area > 0:
        mask = despeckle(mask, min_area)
    box = tight_box(mask)
    if box is None:
        raise EmptyForeground("keying removed every pixel")
    src = to_float(frame if color is None else color)
    x0, y0, x1, y1 = box.as_tuple()
    crop_mask = mask[y0:y1, x0:x1]
    alpha = crop_mask.astype(np.float32)
    if src.shape[2] == 4:
        alpha = alpha * src[y0:y1, x0:x1, 3]
    rgba = np.concatenate([src[y0:y1, x0:x1, :3], alpha[..., None]], axis=2)
    provenance = {
        "source": "chroma_key",
        "hue_star": hue_star,
        "crop": [x0, y0, x1, y1],
        "frame_size": [int(frame.shape[1]), int(frame.shape[0])],
    }
    if isinstance(key, KeyingEstimate):
        provenance["coverage"] = key.coverage
    return InstanceAsset(np.ascontiguousarray(rgba, dtype=np.float32), crop_mask.copy(), provenance)


def despeckle(mask: np.ndarray, min_area: int) -> np.ndarray:
    """Drop 8-connected specks smaller than ``min_area`` and fill holes smaller than it."""
    if min_area < 0:
        raise ValueError("min_area must be >= 0")
    mask = np.asarray(mask, dtype=bool)
    if min_area == 0:
        return mask.copy()
    labels, n = ndimage.label(mask, structure=EIGHT_CONN)
    if n:
        sizes = np.bincount(labels.ravel())
        keep = sizes >= min_area
        keep[0] = False
        mask = keep[labels]
    # holes: 4-connected background pieces that do not reach the border
    labels, n = ndimage.label(~mask, structure=FOUR_CONN)
    if n:
        sizes = np.bincount(labels.ravel())
        border = np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))
        fill = sizes < min_area
        fill[0] = False
        fill[border] = False
        mask = mask | fill[labels]
    return mask
