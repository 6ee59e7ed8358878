from __future__ import annotations

import colorsys
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import brute_force_sq_distance
from toonsynth.imaging import (
    apply_grid_distortion,
    bilateral_filter,
    distance_to_complement,
    flip_horizontal,
    hsv_to_rgb,
    load_png,
    long_side_size,
    resize,
    resize_long_side,
    resize_matrix,
    resize_window,
    rgb_to_hsv,
    save_png,
    squared_distance_to_complement,
    to_uint8,
    warp_grid_distort,
    warp_rotate,
)

GOLDEN = Path(__file__).parent / "golden"


def pixel(rgb) -> np.ndarray:
    return np.array([[rgb]], dtype=np.float32)


# ---------------------------------------------------------------- HSV


@pytest.mark.parametrize(
    "rgb, hsv",
    [
        ((0.0, 1.0, 0.0), (1 / 3, 1.0, 1.0)),
        ((1.0, 0.0, 0.0), (0.0, 1.0, 1.0)),
        ((0.5, 0.5, 0.5), (0.0, 0.0, 0.5)),
    ],
)
def test_rgb_to_hsv_reference_colors(rgb, hsv):
    np.testing.assert_allclose(rgb_to_hsv(pixel(rgb))[0, 0], hsv, atol=1e-6)


def test_rgb_to_hsv_rejects_wrong_channel_count():
    with pytest.raises(ValueError):
        rgb_to_hsv(np.zeros((2, 2, 4), dtype=np.float32))
    with pytest.raises(ValueError):
        hsv_to_rgb(np.zeros((2, 2), dtype=np.float32))


def lattice_17() -> np.ndarray:
    v = np.arange(17, dtype=np.float32) / 16.0
    r, g, b = np.meshgrid(v, v, v, indexing="ij")
    return np.stack([r, g, b], axis=-1).reshape(17, 289, 3)


def test_hsv_round_trip_on_17_cube_lattice():
    rgb = lattice_17()
    back = hsv_to_rgb(rgb_to_hsv(rgb))
    assert np.abs(back - rgb).max() <= 1.0 / 255.0


def test_rgb_to_hsv_matches_stdlib_hexcone_oracle():
    rgb = lattice_17()
    hsv = rgb_to_hsv(rgb)
    oracle = np.array([colorsys.rgb_to_hsv(*map(float, p)) for p in rgb.reshape(-1, 3)]).reshape(hsv.shape)
    dh = np.abs(hsv[..., 0] - oracle[..., 0])
    dh = np.minimum(dh, 1.0 - dh)
    assert dh.max() < 1e-5
    np.testing.assert_allclose(hsv[..., 1:], oracle[..., 1:], atol=1e-5)  # float32 arithmetic
    assert ((hsv[..., 0] >= 0) & (hsv[..., 0] < 1)).all()


# ---------------------------------------------------------------- bilateral


def reference_bilateral(img: np.ndarray, diameter: int, sigma: float) -> np.ndarray:
    """Direct double loop over the circular window, reflect-101 borders, L1 color distance on 0-255."""
    r = diameter // 2
    h, w, _ = img.shape
    img = img.astype(np.float64)
    pad = np.pad(img, ((r, r), (r, r), (0, 0)), mode="reflect")
    num = np.zeros_like(img)
    den = np.zeros((h, w, 1))
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy * dy + dx * dx > r * r:
                continue
            nb = pad[r + dy:r + dy + h, r + dx:r + dx + w]
            color = np.abs(nb - img).sum(axis=2, keepdims=True) * 255.0
            weight = math.exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)) * np.exp(-(color**2) / (2 * sigma * sigma))
            num += weight * nb
            den += weight
    return num / den


def test_bilateral_constant_image_is_fixed():
    img = np.full((40, 30, 3), 0.37, dtype=np.float32)
    np.testing.assert_allclose(bilateral_filter(img), img, atol=1e-6)


def test_bilateral_impulse_matches_double_loop_reference():
    img = np.full((33, 33, 3), 0.4, dtype=np.float32)
    img[16, 16] = (1.0, 0.2, 0.9)
    out = bilateral_filter(img, 17, 80.0)
    np.testing.assert_allclose(out, reference_bilateral(img, 17, 80.0), atol=1e-5)
    # the impulse is attenuated toward its surroundings
    assert np.abs(out[16, 16] - 0.4).sum() < np.abs(img[16, 16] - 0.4).sum()
    flat = np.ones((33, 33), dtype=bool)
    flat[16, 16] = False
    assert np.abs(out[flat] - 0.4).max() <= 1.0 / 255.0


def test_bilateral_random_image_matches_reference():
    img = np.random.default_rng(0).random((20, 24, 3)).astype(np.float32)
    np.testing.assert_allclose(bilateral_filter(img, 17, 80.0), reference_bilateral(img, 17, 80.0), atol=1e-5)


def test_bilateral_passes_alpha_through():
    rgba = np.random.default_rng(1).random((12, 12, 4)).astype(np.float32)
    assert np.array_equal(bilateral_filter(rgba)[..., 3], rgba[..., 3])


@pytest.mark.parametrize("diameter", [4, 1, 0, 16])
def test_bilateral_rejects_bad_diameter(diameter):
    with pytest.raises(ValueError):
        bilateral_filter(np.zeros((8, 8, 3), dtype=np.float32), diameter)


def test_bilateral_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        bilateral_filter(np.zeros((8, 8, 3), dtype=np.float32), 5, 0.0)


@given(arrays(np.float32, (9, 11, 3), elements=st.floats(0, 1, width=32)))
def test_bilateral_stays_in_unit_range(img):
    out = bilateral_filter(img, 5, 40.0)
    assert out.min() >= 0.0 and out.max() <= 1.0


# ---------------------------------------------------------------- rotation


def random_rgba(rng, h, w) -> np.ndarray:
    rgba = rng.random((h, w, 4)).astype(np.float32)
    rgba[..., 3] = (rng.random((h, w)) < 0.7).astype(np.float32)
    return rgba


def test_rotate_zero_is_identity():
    rgba = random_rgba(np.random.default_rng(2), 17, 23)
    assert np.array_equal(warp_rotate(rgba, 0.0), rgba)


def test_rotate_90_is_a_lattice_permutation():
    rgba = random_rgba(np.random.default_rng(3), 16, 16)
    out = warp_rotate(rgba, 90.0)
    assert np.array_equal(out, np.flip(np.transpose(rgba, (1, 0, 2)), axis=0))


def alpha_centroid(alpha: np.ndarray) -> np.ndarray:
    h, w = alpha.shape
    yy, xx = np.indices(alpha.shape, dtype=np.float64)
    total = alpha.sum()
    return np.array([(alpha * (xx + 0.5)).sum() / total - w / 2, (alpha * (yy + 0.5)).sum() / total - h / 2])


def test_rotate_30_preserves_alpha_centroid():
    rng = np.random.default_rng(4)
    rgba = np.zeros((60, 80, 4), dtype=np.float32)
    rgba[10:35, 12:70] = 1.0
    rgba[35:55, 50:66] = 1.0
    rgba[..., :3] = rng.random((60, 80, 3))
    # forward map every source pixel center through the rotation (counter-clockwise on screen)
    t = math.radians(30.0)
    cx, cy = alpha_centroid(rgba[..., 3])
    expected = np.array([cx * math.cos(t) + cy * math.sin(t), -cx * math.sin(t) + cy * math.cos(t)])
    got = alpha_centroid(warp_rotate(rgba, 30.0)[..., 3])
    assert np.abs(got - expected).max() <= 0.5


def test_rotation_is_counter_clockwise():
    rgba = np.zeros((21, 21, 4), dtype=np.float32)
    rgba[10, 18] = 1.0  # right of center
    out = warp_rotate(rgba, 45.0)
    cx, cy = alpha_centroid(out[..., 3])
    assert cx > 0 and cy < 0  # moved up and stays right


@given(st.floats(-30, 30), st.integers(3, 20), st.integers(3, 20))
def test_rotation_keeps_transparent_inputs_transparent(deg, h, w):
    rgba = np.zeros((h, w, 4), dtype=np.float32)
    rgba[..., :3] = 0.8
    assert not warp_rotate(rgba, deg)[..., 3].any()


# ---------------------------------------------------------------- grid distortion


def test_grid_zero_limit_is_identity():
    rgba = random_rgba(np.random.default_rng(5), 30, 40)
    out = warp_grid_distort(rgba, 5, (0.0, 0.0), np.random.default_rng(0))
    assert np.array_equal(out, rgba)


def test_grid_golden_checkerboard():
    import sys

    sys.path.insert(0, str(GOLDEN))
    from regenerate import grid_golden

    assert np.array_equal(grid_golden(), np.load(GOLDEN / "grid_checkerboard_seed7.npy"))


def test_grid_single_cell_is_a_global_scale_per_axis():
    h, w = 24, 32
    ramp = np.zeros((h, w, 3), dtype=np.float32)
    ramp[..., 0] = np.arange(w, dtype=np.float32)[None, :] / w
    ramp[..., 1] = np.arange(h, dtype=np.float32)[:, None] / h
    sx, sy = 0.8, 0.9
    out = apply_grid_distortion(ramp, [sx], [sy])
    x_src = (np.arange(w) + 0.5) * sx - 0.5
    y_src = (np.arange(h) + 0.5) * sy - 0.5
    interior = (x_src >= 0)[None, :] & (y_src >= 0)[:, None]
    np.testing.assert_allclose(out[..., 0][interior], np.broadcast_to(x_src / w, (h, w))[interior], atol=1e-6)
    np.testing.assert_allclose(out[..., 1][interior], np.broadcast_to((y_src / h)[:, None], (h, w))[interior], atol=1e-6)


def test_grid_rejects_inverted_limit():
    with pytest.raises(ValueError):
        warp_grid_distort(np.zeros((8, 8, 4), np.float32), 5, (0.3, -0.3), np.random.default_rng(0))


@given(st.integers(0, 2**31), st.integers(4, 24), st.integers(4, 24))
def test_grid_keeps_transparent_inputs_transparent(seed, h, w):
    rgba = np.zeros((h, w, 4), dtype=np.float32)
    rgba[..., 1] = 1.0
    out = warp_grid_distort(rgba, 5, (-0.3, 0.3), np.random.default_rng(seed))
    assert out.shape == rgba.shape
    assert not out[..., 3].any()


# ---------------------------------------------------------------- resize


def test_resize_long_side_exact_scale():
    img = np.zeros((50, 100, 3), dtype=np.float32)
    assert resize_long_side(img, 200).shape == (100, 200, 3)


def test_resize_long_side_identity_for_square_target():
    img = np.random.default_rng(6).random((64, 64, 3)).astype(np.float32)
    assert np.array_equal(resize_long_side(img, 64), img)


def test_resize_long_side_preconditions():
    with pytest.raises(ValueError):
        resize_long_side(np.zeros((0, 5, 3), np.float32), 10)
    with pytest.raises(ValueError):
        resize_long_side(np.zeros((5, 5, 3), np.float32), 0)


@given(st.integers(1, 400), st.integers(1, 400), st.integers(1, 600))
def test_long_side_size_hits_target(w, h, target):
    ow, oh = long_side_size(w, h, target)
    assert max(ow, oh) == target and min(ow, oh) >= 1


def test_resize_matches_separable_matrix_oracle():
    img = np.random.default_rng(7).random((13, 21, 3)).astype(np.float32)
    out = resize(img, (34, 9))
    rh, rw = resize_matrix(13, 9), resize_matrix(21, 34)
    oracle = np.einsum("ij,jkc,lk->ilc", rh, img.astype(np.float64), rw)
    np.testing.assert_allclose(out, oracle, atol=1e-5)


def test_resize_does_not_bleed_transparent_color():
    rgba = np.zeros((20, 20, 4), dtype=np.float32)
    rgba[:, :10] = (1.0, 0.0, 0.0, 1.0)
    rgba[:, 10:] = (0.0, 1.0, 0.0, 0.0)
    out = resize(rgba, (7, 7))
    visible = out[..., 3] > 0
    assert np.allclose(out[..., 1][visible], 0.0, atol=1e-6)


def test_resize_window_equals_cropped_resize():
    img = random_rgba(np.random.default_rng(8), 31, 45)
    full = resize(img, (70, 50))
    np.testing.assert_array_equal(resize_window(img, (70, 50), (5, 3, 60, 40)), full[3:40, 5:60])


def test_flip_is_an_involution():
    img = random_rgba(np.random.default_rng(9), 5, 7)
    assert np.array_equal(flip_horizontal(flip_horizontal(img)), img)


# ---------------------------------------------------------------- PNG


def test_png_round_trip(tmp_path):
    img = np.random.default_rng(10).integers(0, 256, (9, 13, 4), dtype=np.uint8)
    save_png(tmp_path / "x.png", img)
    assert np.array_equal(to_uint8(load_png(tmp_path / "x.png")), img)


def test_load_png_missing_file_raises_oserror(tmp_path):
    with pytest.raises(OSError):
        load_png(tmp_path / "missing.png")


# ---------------------------------------------------------------- distances


def test_distance_all_false_is_zero():
    assert not distance_to_complement(np.zeros((6, 6), bool)).any()


def test_distance_single_pixel_is_one():
    m = np.zeros((7, 7), bool)
    m[3, 3] = True
    d = distance_to_complement(m)
    assert d[3, 3] == 1.0 and d.sum() == 1.0


@pytest.mark.parametrize("border", [False, True])
def test_distance_matches_brute_force_on_random_masks(border):
    rng = np.random.default_rng(11)
    for _ in range(30):
        m = rng.random((32, 32)) < rng.uniform(0.3, 0.95)
        m[0, 0] = False
        assert np.array_equal(squared_distance_to_complement(m, border), brute_force_sq_distance(m, border))


def test_distance_full_mask_without_border_is_infinite():
    assert np.isinf(distance_to_complement(np.ones((3, 3), bool))).all()
    np.testing.assert_array_equal(distance_to_complement(np.ones((3, 3), bool), True)[1, 1], 2.0)


@given(arrays(bool, (12, 12)))
def test_distance_zero_on_complement_and_lipschitz(m):
    d = distance_to_complement(m, border_is_exterior=True)
    assert (d[~m] == 0).all()
    assert np.abs(np.diff(d, axis=0)).max(initial=0) <= 1.0
    assert np.abs(np.diff(d, axis=1)).max(initial=0) <= 1.0
    assert np.abs(d[1:, 1:] - d[:-1, :-1]).max(initial=0) <= math.sqrt(2) + 1e-12
    assert np.abs(d[1:, :-1] - d[:-1, 1:]).max(initial=0) <= math.sqrt(2) + 1e-12
