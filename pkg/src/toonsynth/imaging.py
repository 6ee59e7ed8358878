"""Raster helpers: color conversion, bilinear resampling, warps, filtering, distance transforms.

Images are numpy arrays of shape (H, W, C), row-major and channel-interleaved.
Working images are float32 in [0, 1]; storage images are uint8. Masks are
2-D bool arrays. RGBA arrays carry straight (non-premultiplied) alpha;
warps resample in premultiplied space so transparent pixels never bleed color.
"""
from __future__ import annotations

import math
from pathlib import Path

import cv2
import numpy as np
from PIL import Image
from scipy import ndimage

__all__ = [
    "to_float",
    "to_uint8",
    "load_png",
    "save_png",
    "rgb_to_hsv",
    "hsv_to_rgb",
    "bilateral_filter",
    "resize",
    "resize_long_side",
    "resize_matrix",
    "flip_horizontal",
    "warp_rotate",
    "grid_steps",
    "apply_grid_distortion",
    "warp_grid_distort",
    "distance_to_complement",
    "squared_distance_to_complement",
]


def to_float(img: np.ndarray) -> np.ndarray:
    """uint8 -> float32 in [0, 1]; float input is cast to float32 and clipped."""
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img.astype(np.float32) * np.float32(1.0 / 255.0)
    return np.clip(img.astype(np.float32, copy=False), 0.0, 1.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def load_png(path: str | Path) -> np.ndarray:
    """Read an 8-bit PNG as float32. Grayscale becomes HxW, palette images become RGB(A)."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB", "RGBA"):
                im = im.convert("RGBA" if "A" in im.getbands() or "transparency" in im.info else "RGB")
            arr = np.asarray(im)
    except OSError as exc:
        raise OSError(f"cannot read image: {path}: {exc}") from exc
    return to_float(arr)


def save_png(path: str | Path, img: np.ndarray) -> None:
    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    try:
        Image.fromarray(arr).save(path, format="PNG", optimize=False, compress_level=6)
    except OSError as exc:
        raise OSError(f"cannot write image: {path}: {exc}") from exc


# ---------------------------------------------------------------- color


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    """Hexcone HSV with all three channels in [0, 1]; hue of gray pixels is 0."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"rgb_to_hsv expects an HxWx3 image, got shape {img.shape}")
    hsv = cv2.cvtColor(np.ascontiguousarray(to_float(img)), cv2.COLOR_RGB2HSV)
    h = hsv[..., 0]
    h *= np.float32(1.0 / 360.0)
    h[h >= 1.0] -= 1.0
    return hsv


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    hsv = np.asarray(hsv, dtype=np.float32)
    if hsv.ndim != 3 or hsv.shape[2] != 3:
        raise ValueError(f"hsv_to_rgb expects an HxWx3 image, got shape {hsv.shape}")
    scaled = hsv.copy()
    scaled[..., 0] = np.mod(scaled[..., 0], 1.0) * 360.0
    return np.clip(cv2.cvtColor(scaled, cv2.COLOR_HSV2RGB), 0.0, 1.0)


# ---------------------------------------------------------------- filtering


def bilateral_filter(img: np.ndarray, diameter: int = 17, sigma: float = 80.0) -> np.ndarray:
    """Edge-preserving smoothing with a circular window of ``diameter`` pixels.

    ``sigma`` serves as both the spatial sigma (pixels) and the range sigma
    (measured on the 0-255 scale). Range distance between colors is the sum
    of absolute channel differences; borders reflect without repeating the
    edge pixel. An alpha channel, if present, passes through untouched.
    """
    if diameter < 3 or diameter % 2 == 0:
        raise ValueError(f"diameter must be odd and >= 3, got {diameter}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    img = to_float(img)
    color = img[..., :3] if img.ndim == 3 and img.shape[2] == 4 else img
    out = cv2.bilateralFilter(np.ascontiguousarray(color), diameter, sigma / 255.0, sigma)
    out = np.clip(out, 0.0, 1.0)
    if color is not img:
        out = np.concatenate([out, img[..., 3:]], axis=2)
    return out


# ---------------------------------------------------------------- resampling


def _axis_taps(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centers, edges clamped
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) matrix of the 1-D bilinear resize used by :func:`resize`."""
    i0, i1, w = _axis_taps(n_in, n_out)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - w)
    np.add.at(m, (rows, i1), w)
    return m


def _lerp_axis(img: np.ndarray, axis: int, i0, i1, w, v0=None, v1=None) -> np.ndarray:
    a = np.take(img, i0, axis=axis)
    b = np.take(img, i1, axis=axis)
    shape = [1] * img.ndim
    shape[axis] = -1
    w = w.astype(np.float32).reshape(shape)
    if v0 is None:
        return a + (b - a) * w
    w0 = ((1.0 - w) * v0.reshape(shape)).astype(np.float32)
    w1 = (w * v1.reshape(shape)).astype(np.float32)
    return a * w0 + b * w1


def _premultiply(rgba: np.ndarray) -> np.ndarray:
    out = rgba.copy()
    out[..., :3] *= rgba[..., 3:4]
    return out


def _unpremultiply(rgba: np.ndarray) -> np.ndarray:
    a = rgba[..., 3:4]
    out = rgba.copy()
    np.divide(rgba[..., :3], a, out=out[..., :3], where=a > 1e-6)
    out[..., :3][np.broadcast_to(a <= 1e-6, out[..., :3].shape)] = 0.0
    return np.clip(out, 0.0, 1.0)


def _is_rgba(img: np.ndarray) -> bool:
    return img.ndim == 3 and img.shape[2] == 4


def resize(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize to ``size = (width, height)``."""
    w_out, h_out = int(size[0]), int(size[1])
    if w_out < 1 or h_out < 1:
        raise ValueError(f"invalid target size {size}")
    img = to_float(img)
    h_in, w_in = img.shape[:2]
    if (w_in, h_in) == (w_out, h_out):
        return img.copy()
    rgba = _is_rgba(img)
    work = _premultiply(img) if rgba else img
    if h_out != h_in:
        work = _lerp_axis(work, 0, *_axis_taps(h_in, h_out))
    if w_out != w_in:
        work = _lerp_axis(work, 1, *_axis_taps(w_in, w_out))
    return _unpremultiply(work) if rgba else np.clip(work, 0.0, 1.0)


def resize_window(img: np.ndarray, size: tuple[int, int], window: tuple[int, int, int, int]) -> np.ndarray:
    """``resize(img, size)[y0:y1, x0:x1]`` without computing pixels outside the window."""
    w_out, h_out = int(size[0]), int(size[1])
    x0, y0, x1, y1 = window
    if not (0 <= x0 < x1 <= w_out and 0 <= y0 < y1 <= h_out):
        raise ValueError(f"window {window} outside resized size {size}")
    img = to_float(img)
    h_in, w_in = img.shape[:2]
    if (w_in, h_in) == (w_out, h_out):
        return img[y0:y1, x0:x1].copy()
    rgba = _is_rgba(img)
    work = _premultiply(img) if rgba else img
    i0, i1, w = _axis_taps(h_in, h_out)
    work = _lerp_axis(work, 0, i0[y0:y1], i1[y0:y1], w[y0:y1])
    i0, i1, w = _axis_taps(w_in, w_out)
    work = _lerp_axis(work, 1, i0[x0:x1], i1[x0:x1], w[x0:x1])
    return _unpremultiply(work) if rgba else np.clip(work, 0.0, 1.0)


def resize_long_side(img: np.ndarray, target: int) -> np.ndarray:
    """Aspect-preserving bilinear resize so that max(width, height) == target."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("cannot resize an empty asset")
    if target < 1:
        raise ValueError("target must be >= 1")
    return resize(img, long_side_size(w, h, target))


def long_side_size(w: int, h: int, target: int) -> tuple[int, int]:
    if w >= h:
        return int(target), max(1, int(math.floor(h * target / w + 0.5)))
    return max(1, int(math.floor(w * target / h + 0.5))), int(target)


def _sample_bilinear(img: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Sample ``img`` at float coordinates; positions outside the raster read as zeros."""
    h, w = img.shape[:2]
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx = (sx - x0).astype(np.float32)
    fy = (sy - y0).astype(np.float32)
    out = np.zeros(sx.shape + img.shape[2:], dtype=np.float32)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        yy = y0 + dy
        vy = (yy >= 0) & (yy < h)
        yc = np.clip(yy, 0, h - 1)
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xx = x0 + dx
            valid = vy & (xx >= 0) & (xx < w)
            wgt = wx * wy * valid
            out += img[yc, np.clip(xx, 0, w - 1)] * wgt[..., None]
    return out


def flip_horizontal(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(img)[:, ::-1])


def rotated_size(w: int, h: int, degrees: float) -> tuple[int, int]:
    t = math.radians(degrees)
    c, s = abs(math.cos(t)), abs(math.sin(t))
    return (max(1, math.ceil(w * c + h * s - 1e-6)), max(1, math.ceil(w * s + h * c - 1e-6)))


def warp_rotate(rgba: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate counter-clockwise about the center, expanding the canvas to the rotated bounds.

    Newly exposed pixels are fully transparent. Multiples of 90 degrees are
    exact lattice permutations.
    """
    rgba = to_float(rgba)
    if degrees % 90 == 0:
        return np.ascontiguousarray(np.rot90(rgba, k=int(degrees // 90) % 4))
    return _rotate_resample(rgba, degrees)


def _rotate_resample(rgba: np.ndarray, degrees: float) -> np.ndarray:
    h, w = rgba.shape[:2]
    w2, h2 = rotated_size(w, h, degrees)
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    u = np.arange(w2, dtype=np.float64) + 0.5 - w2 / 2.0
    v = np.arange(h2, dtype=np.float64) + 0.5 - h2 / 2.0
    uu, vv = np.meshgrid(u, v)
    sx = uu * c - vv * s + w / 2.0 - 0.5
    sy = uu * s + vv * c + h / 2.0 - 0.5
    src = _premultiply(rgba) if _is_rgba(rgba) else rgba
    out = _sample_bilinear(src, sx, sy)
    return _unpremultiply(out) if _is_rgba(rgba) else out


def grid_steps(rng: np.random.Generator, cells: int, limit: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
    """Draw per-cell step scales 1+u, u ~ U(lo, hi), for the x and y axes."""
    lo, hi = float(limit[0]), float(limit[1])
    if lo > hi:
        raise ValueError(f"distortion limit must satisfy lo <= hi, got {limit}")
    if cells < 1:
        raise ValueError("cells must be >= 1")
    xs = 1.0 + rng.uniform(lo, hi, size=cells)
    ys = 1.0 + rng.uniform(lo, hi, size=cells)
    return xs, ys


def _grid_axis_map(n: int, steps: np.ndarray) -> np.ndarray:
    cells = len(steps)
    cell = n / cells
    out_knots = np.arange(cells + 1, dtype=np.float64) * cell
    src_knots = np.concatenate([[0.0], np.cumsum(cell * np.asarray(steps, dtype=np.float64))])
    return np.interp(np.arange(n, dtype=np.float64) + 0.5, out_knots, src_knots) - 0.5


def apply_grid_distortion(rgba: np.ndarray, x_steps, y_steps) -> np.ndarray:
    """Piecewise-linear grid warp: output cell i reads a source span scaled by ``steps[i]``.

    The canvas size is kept; content mapped from outside the source is transparent.
    """
    rgba = to_float(rgba)
    if np.all(np.asarray(x_steps) == 1.0) and np.all(np.asarray(y_steps) == 1.0):
        return rgba.copy()
    h, w = rgba.shape[:2]
    sx = _grid_axis_map(w, x_steps)
    sy = _grid_axis_map(h, y_steps)
    work = _premultiply(rgba) if _is_rgba(rgba) else rgba
    # separable: resample rows, then columns
    work = _lerp_axis(work, 0, *_zero_taps(sy, h))
    work = _lerp_axis(work, 1, *_zero_taps(sx, w))
    return _unpremultiply(work) if _is_rgba(rgba) else work


def _zero_taps(src: np.ndarray, n: int):
    i0 = np.floor(src).astype(np.intp)
    w = src - i0
    i1 = i0 + 1
    v0 = ((i0 >= 0) & (i0 < n)).astype(np.float64)
    v1 = ((i1 >= 0) & (i1 < n)).astype(np.float64)
    return np.clip(i0, 0, n - 1), np.clip(i1, 0, n - 1), w, v0, v1


def warp_grid_distort(
    rgba: np.ndarray,
    cells: int = 5,
    limit: tuple[float, float] = (-0.3, 0.3),
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    if rng is None:
        raise ValueError("warp_grid_distort needs a seeded generator")
    xs, ys = grid_steps(rng, cells, limit)
    return apply_grid_distortion(rgba, xs, ys)


# ---------------------------------------------------------------- distances


def squared_distance_to_complement(mask: np.ndarray, border_is_exterior: bool = False) -> np.ndarray:
    """Exact integer squared Euclidean distance from each true pixel to the nearest false pixel.

    With ``border_is_exterior`` the raster is treated as surrounded by false
    pixels. Without it, a mask with no false pixel yields -1 everywhere
    (no complement to measure against).
    """
    mask = np.asarray(mask, dtype=bool)
    if border_is_exterior:
        mask = np.pad(mask, 1, constant_values=False)
    if mask.size == 0:
        return np.zeros(mask.shape, dtype=np.int64)
    if mask.all():
        return np.full(mask.shape, -1, dtype=np.int64)
    _, (iy, ix) = ndimage.distance_transform_edt(mask, return_indices=True)
    gy, gx = np.indices(mask.shape)
    d2 = (gy - iy).astype(np.int64) ** 2 + (gx - ix).astype(np.int64) ** 2
    if border_is_exterior:
        d2 = d2[1:-1, 1:-1]
    return d2


def distance_to_complement(mask: np.ndarray, border_is_exterior: bool = False) -> np.ndarray:
    """Euclidean distance to the nearest false pixel; 0 on false pixels.

    A mask without any false pixel (and no exterior border) gets +inf.
    """
    d2 = squared_distance_to_complement(mask, border_is_exterior)
    out = np.sqrt(np.maximum(d2, 0).astype(np.float64))
    out[d2 < 0] = np.inf
    return out
