"""Synthetic stand-ins for real data: sprites, backgrounds, chroma-key frames and guide boxes.

Used by the test suite, the acceptance harness and ``toonsynth demo`` so the
whole pipeline can run without any downloaded corpus. Sprite colors stay
below the keying gate (S or V < 0.85) so keying them back out is well posed.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset_io import PoolEntry, PoolManifest, save_json
from .imaging import hsv_to_rgb, save_png
from .structures import InstanceAsset


def sprite_mask(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    """Union of a few random ellipses covering the middle of a w x h box."""
    yy, xx = np.mgrid[0:h, 0:w]
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(2, 5))):
        cx = rng.uniform(0.3, 0.7) * w
        cy = rng.uniform(0.3, 0.7) * h
        rx = rng.uniform(0.2, 0.5) * w
        ry = rng.uniform(0.2, 0.5) * h
        mask |= ((xx + 0.5 - cx) / rx) ** 2 + ((yy + 0.5 - cy) / ry) ** 2 <= 1.0
    return mask


def sprite_colors(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    """Flat-shaded cartoon texture: a few hue patches with mild noise, never highly saturated and bright."""
    hsv = np.empty((h, w, 3), dtype=np.float32)
    hsv[..., 0] = rng.random()
    hsv[..., 1] = rng.uniform(0.2, 0.8)
    hsv[..., 2] = rng.uniform(0.3, 0.8)
    for _ in range(int(rng.integers(1, 4))):
        x0, y0 = int(rng.integers(w)), int(rng.integers(h))
        x1, y1 = x0 + int(rng.integers(1, w + 1)), y0 + int(rng.integers(1, h + 1))
        hsv[y0:y1, x0:x1] = (rng.random(), rng.uniform(0.2, 0.8), rng.uniform(0.3, 0.8))
    hsv[..., 2] += rng.normal(0, 0.02, size=(h, w)).astype(np.float32)
    np.clip(hsv, 0.0, 0.8499, out=hsv)
    hsv[..., 0] = np.mod(hsv[..., 0], 1.0)
    return hsv_to_rgb(hsv)


def make_sprite(rng: np.random.Generator, w: int, h: int) -> InstanceAsset:
    mask = sprite_mask(rng, w, h)
    rgba = np.concatenate([sprite_colors(rng, w, h), mask[..., None].astype(np.float32)], axis=2)
    return InstanceAsset(rgba, mask, {"source": "synthetic"})


def make_background(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    """Smooth two-color gradient plus noise texture, float32 RGB."""
    a = rng.random(3).astype(np.float32)
    b = rng.random(3).astype(np.float32)
    t = np.linspace(0.0, 1.0, w, dtype=np.float32)[None, :, None]
    s = np.linspace(0.0, 1.0, h, dtype=np.float32)[:, None, None]
    mix = 0.5 * (t + s)
    img = a * (1 - mix) + b * mix + rng.normal(0, 0.05, size=(h, w, 3)).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def chroma_frame(
    rng: np.random.Generator,
    w: int,
    h: int,
    hue: float,
    fraction: float,
) -> tuple[np.ndarray, np.ndarray]:
    """A sprite covering about ``fraction`` of a w x h frame over the keying color ``hue``.

    Returns (float32 RGB frame, ground-truth sprite mask).
    """
    key = hsv_to_rgb(np.array([[[hue, 1.0, 1.0]]], dtype=np.float32))[0, 0]
    frame = np.broadcast_to(key, (h, w, 3)).copy()
    # ellipse unions fill roughly 55-75% of their box; size the box for the target fraction
    side = np.sqrt(fraction * w * h / 0.65)
    aspect = rng.uniform(0.6, 1.6)
    sw = int(np.clip(side * np.sqrt(aspect), 8, w))
    sh = int(np.clip(side / np.sqrt(aspect), 8, h))
    sprite = make_sprite(rng, sw, sh)
    x0 = int(rng.integers(0, w - sw + 1))
    y0 = int(rng.integers(0, h - sh + 1))
    truth = np.zeros((h, w), dtype=bool)
    truth[y0:y0 + sh, x0:x0 + sw] = sprite.mask
    frame[y0:y0 + sh, x0:x0 + sw][sprite.mask] = sprite.rgba[..., :3][sprite.mask]
    return frame, truth


def synthetic_guide_bundle(rng: np.random.Generator, n_photos: int = 200, max_boxes: int = 14) -> dict:
    """Person-like boxes (portrait aspect, clustered along a ground line) on random photo sizes."""
    photos = []
    for i in range(n_photos):
        pw = int(rng.choice([640, 480, 500, 427, 612]))
        ph = int(rng.choice([480, 640, 375, 427, 612]))
        n = int(rng.integers(1, max_boxes + 1))
        boxes = []
        ground = rng.uniform(0.6, 0.95) * ph
        for _ in range(n):
            bh = rng.uniform(0.15, 0.8) * ph
            bw = bh / rng.uniform(1.3, 3.5)
            x = rng.uniform(0, max(pw - bw, 1))
            y = float(np.clip(ground - bh + rng.normal(0, 0.03 * ph), 0, ph - bh))
            boxes.append([round(float(x), 2), round(y, 2), round(float(bw), 2), round(float(bh), 2)])
        photos.append({"id": i, "width": pw, "height": ph, "boxes": boxes})
    return {"version": 1, "source": "synthetic person-like boxes", "photos": photos}


def demo_assets(rng: np.random.Generator, n: int, lo: int = 80, hi: int = 320) -> dict[str, InstanceAsset]:
    out = {}
    for i in range(n):
        w, h = int(rng.integers(lo, hi)), int(rng.integers(lo, hi))
        out[f"fg{i:04d}"] = make_sprite(rng, w, h)
    return out


def demo_backgrounds(rng: np.random.Generator, n: int) -> dict[str, np.ndarray]:
    sizes = [(720, 720), (1440, 1080), (800, 600), (600, 900), (1024, 768)]
    return {f"bg{i:03d}": make_background(rng, *sizes[i % len(sizes)]) for i in range(n)}


def write_demo_pools(root: str | Path, seed: int = 0, n_fg: int = 24, n_bg: int = 6) -> dict:
    """Write a foreground manifest, a background directory and a guide bundle under ``root``.

    Returns the paths as a config fragment.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    fg_dir = root / "foregrounds"
    bg_dir = root / "backgrounds"
    fg_dir.mkdir(parents=True, exist_ok=True)
    bg_dir.mkdir(parents=True, exist_ok=True)
    manifest = PoolManifest(root=root)
    for aid, asset in demo_assets(rng, n_fg).items():
        save_png(fg_dir / f"{aid}.rgba.png", asset.rgba)
        save_png(fg_dir / f"{aid}.mask.png", asset.mask)
        manifest.add(PoolEntry(aid, f"foregrounds/{aid}.rgba.png", f"foregrounds/{aid}.mask.png",
                               "still_illustration", (asset.width, asset.height)))
    manifest.save(root / "foregrounds.json")
    for bid, img in demo_backgrounds(rng, n_bg).items():
        save_png(bg_dir / f"{bid}.png", img)
    save_json(root / "guide_boxes.json", synthetic_guide_bundle(rng, 50))
    return {
        "foreground_manifest": str(root / "foregrounds.json"),
        "background_dir": str(bg_dir),
        "guide_boxes": str(root / "guide_boxes.json"),
    }
