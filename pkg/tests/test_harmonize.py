from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from toonsynth.harmonize import (
    CORESET_LIMIT,
    apply_harmonization,
    harmonize_sample,
    histogram_match,
    kmeans,
    matching_lut,
    plan_harmonization,
    quantize_colors,
)
from toonsynth.structures import AnnotatedSample, Instance, tight_box


def n_colors(img: np.ndarray) -> int:
    return len(np.unique(img.reshape(-1, img.shape[-1]), axis=0))


def ecdf(a: np.ndarray) -> np.ndarray:
    return np.cumsum(np.bincount(a.ravel(), minlength=256)) / a.size


def ecdf_sup_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Largest gap between the empirical CDFs of two uint8 samples, over all 256 levels."""
    return float(np.abs(ecdf(a) - ecdf(b)).max())


def assert_matched(src: np.ndarray, out: np.ndarray, ref: np.ndarray) -> None:
    """A level-to-level map cannot split a source level, so the matched CDF stays below the
    reference CDF and trails it by less than the heaviest source level's mass."""
    f_out, f_ref = ecdf(out), ecdf(ref)
    assert (f_out <= f_ref + 1e-12).all()
    heaviest = np.bincount(src.ravel(), minlength=256).max() / src.size
    assert (f_ref - f_out).max() < heaviest + 1e-12


# ---------------------------------------------------------------- quantization


@pytest.mark.parametrize("dtype", [np.uint8, np.float32])
def test_image_with_exactly_k_colors_is_a_fixed_point(dtype):
    rng = np.random.default_rng(0)
    palette = rng.integers(0, 256, (12, 3), dtype=np.uint8)
    img = palette[rng.integers(0, 12, (30, 40))]
    if dtype == np.float32:
        img = img.astype(np.float32) / 255.0
    assert np.array_equal(quantize_colors(img, 12, np.random.default_rng(1)), img)


def test_k_one_gives_the_mean_color():
    img = np.random.default_rng(2).random((20, 25, 3)).astype(np.float32)
    out = quantize_colors(img, 1, np.random.default_rng(3))
    np.testing.assert_allclose(out, np.broadcast_to(img.reshape(-1, 3).mean(axis=0), img.shape), atol=1e-6)


def best_two_partition_sse(points: np.ndarray) -> float:
    best = np.inf
    n = len(points)
    for mask in itertools.product([False, True], repeat=n - 1):
        sel = np.array((False,) + mask)
        if sel.all() or not sel.any():
            continue
        sse = sum(((p - p.mean(axis=0)) ** 2).sum() for p in (points[sel], points[~sel]))
        best = min(best, sse)
    return best


def test_six_pixel_image_two_clusters_near_exhaustive_optimum():
    img = np.array([[[12, 10, 9], [30, 22, 18], [64, 70, 52]], [[210, 190, 180], [236, 228, 201], [150, 120, 96]]], np.uint8)
    points = img.reshape(-1, 3).astype(np.float64) / 255.0
    optimum = best_two_partition_sse(points)
    found = min(kmeans(points, np.ones(6), 2, np.random.default_rng(r))[0].objective for r in range(20))
    assert found <= 1.05 * optimum + 1e-12


@given(st.integers(0, 2**31), st.integers(1, 4))
def test_kmeans_ends_at_a_lloyd_fixed_point(seed, k):
    # any single run may stop in a local optimum, but never at a point Lloyd would still move
    rng = np.random.default_rng(seed)
    points = rng.random((30, 3))
    palette, labels = kmeans(points, np.ones(30), k, rng, max_iter=200, tol=0.0)
    d2 = ((points[:, None, :] - palette.centers[None]) ** 2).sum(axis=2)
    assert (d2[np.arange(30), labels] <= d2.min(axis=1) + 1e-12).all()
    for c in np.unique(labels):
        np.testing.assert_allclose(palette.centers[c], points[labels == c].mean(axis=0), atol=1e-12)


@given(st.integers(0, 2**31), st.integers(1, 8))
def test_lloyd_objective_never_increases(seed, k):
    rng = np.random.default_rng(seed)
    points = rng.random((200, 3))
    palette, _ = kmeans(points, rng.integers(1, 5, 200).astype(float), k, rng)
    hist = palette.history + [palette.objective]
    assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))


@given(st.integers(0, 2**31), st.sampled_from([12, 16, 32]))
def test_quantized_image_has_at_most_k_colors(seed, k):
    img = np.random.default_rng(seed).integers(0, 256, (40, 50, 3), dtype=np.uint8)
    assert n_colors(quantize_colors(img, k, np.random.default_rng(seed))) <= k


def test_coreset_path_keeps_color_budget():
    img = np.random.default_rng(5).integers(0, 256, (128, 128, 3), dtype=np.uint8)
    assert n_colors(img) > CORESET_LIMIT
    out, palette = quantize_colors(img, 16, np.random.default_rng(6), return_palette=True)
    assert n_colors(out) <= 16 and palette.k == 16


def test_quantize_rejects_bad_arguments():
    with pytest.raises(ValueError):
        quantize_colors(np.zeros((2, 2, 3), np.uint8), 0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        quantize_colors(np.zeros((0, 2, 3), np.uint8), 4, np.random.default_rng(0))


# ---------------------------------------------------------------- histogram matching


def test_matching_against_itself_is_identity():
    img = np.random.default_rng(7).integers(0, 256, (30, 30, 3), dtype=np.uint8)
    assert np.array_equal(histogram_match(img, img), img)


def test_constant_reference_maps_everything_to_it():
    src = np.random.default_rng(8).integers(0, 256, (10, 10, 3), dtype=np.uint8)
    ref = np.full((5, 5, 3), 77, dtype=np.uint8)
    assert (histogram_match(src, ref) == 77).all()
    assert (histogram_match(np.full((4, 4, 3), 3, np.uint8), ref) == 77).all()


@given(st.integers(0, 2**31))
def test_matched_cdf_tracks_reference_for_any_distribution(seed):
    rng = np.random.default_rng(seed)
    src = np.clip(rng.normal(rng.uniform(40, 200), rng.uniform(10, 60), (60, 70, 3)), 0, 255).astype(np.uint8)
    ref = np.clip(rng.gamma(rng.uniform(1, 5), rng.uniform(5, 30), (50, 40, 3)), 0, 255).astype(np.uint8)
    out = histogram_match(src, ref)
    for c in range(3):
        assert_matched(src[..., c], out[..., c], ref[..., c])


@given(st.integers(0, 2**31))
def test_noise_textured_regions_match_within_two_levels(seed):
    rng = np.random.default_rng(seed)
    src = rng.integers(0, 256, (100, 120, 3), dtype=np.uint8)
    ref = np.clip(rng.normal(128, 70, (110, 100, 3)), 0, 255).astype(np.uint8)
    out = histogram_match(src, ref)
    for c in range(3):
        assert ecdf_sup_distance(out[..., c], ref[..., c]) <= 2 / 256


@given(arrays(np.uint8, 300), arrays(np.uint8, 200))
def test_matching_lut_is_monotone(src, ref):
    lut = matching_lut(src, ref)
    assert (np.diff(lut.astype(int)) >= 0).all()


def test_histogram_match_float_input_returns_float():
    src = np.random.default_rng(9).random((8, 8, 3)).astype(np.float32)
    out = histogram_match(src, src)
    assert out.dtype == np.float32
    assert np.abs(out - src).max() <= 0.5 / 255 + 1e-6


def test_histogram_match_shape_check():
    with pytest.raises(ValueError):
        histogram_match(np.zeros((4, 4), np.uint8), np.zeros((4, 4, 3), np.uint8))


# ---------------------------------------------------------------- per-sample


def two_instance_sample(seed: int) -> AnnotatedSample:
    rng = np.random.default_rng(seed)
    image = rng.integers(0, 256, (60, 60, 3), dtype=np.uint8)
    instances = []
    for x0, x1 in ((5, 25), (30, 55)):
        m = np.zeros((60, 60), dtype=bool)
        m[10:50, x0:x1] = True
        instances.append(Instance(m, m.copy(), tight_box(m), f"a{x0}"))
    return AnnotatedSample(image, instances, {"sample_index": 0})


def masks_unchanged(a: AnnotatedSample, b: AnnotatedSample) -> bool:
    return all(
        np.array_equal(x.modal_mask, y.modal_mask) and np.array_equal(x.amodal_mask, y.amodal_mask) and x.bbox == y.bbox
        for x, y in zip(a.instances, b.instances)
    ) and len(a.instances) == len(b.instances)


def test_mode_none_keeps_the_image():
    s = two_instance_sample(0)
    out = harmonize_sample(s, "none", np.random.default_rng(0))
    assert np.array_equal(out.image, s.image) and masks_unchanged(s, out)
    assert out.layout["harmonization"] == {"mode": "none"}


@given(st.integers(0, 2**31))
def test_quantize_mode_respects_k_and_masks(seed):
    s = two_instance_sample(seed)
    out = harmonize_sample(s, "quantize", np.random.default_rng(seed))
    assert n_colors(out.image) <= out.layout["harmonization"]["k"]
    assert out.layout["harmonization"]["k"] in (12, 16, 32)
    assert masks_unchanged(s, out)


def test_histogram_match_with_one_instance_only_touches_background():
    s = two_instance_sample(1)
    s.instances = s.instances[:1]
    out = harmonize_sample(s, "histogram_match", np.random.default_rng(0))
    m = s.instances[0].modal_mask
    assert np.array_equal(out.image[m], s.image[m])
    assert not np.array_equal(out.image[~m], s.image[~m])
    for c in range(3):
        assert_matched(s.image[~m][:, c], out.image[~m][:, c], s.image[m][:, c])


@given(st.integers(0, 2**31))
def test_histogram_match_remaps_regions_toward_reference(seed):
    s = two_instance_sample(seed)
    out = harmonize_sample(s, "histogram_match", np.random.default_rng(seed))
    ref = out.layout["harmonization"]["ref_index"]
    ref_mask = s.instances[ref].modal_mask
    assert np.array_equal(out.image[ref_mask], s.image[ref_mask])
    other = s.instances[1 - ref].modal_mask
    for c in range(3):
        assert_matched(s.image[other][:, c], out.image[other][:, c], s.image[ref_mask][:, c])
        # monotone per-channel remap of the region
        src, dst = s.image[other][:, c], out.image[other][:, c]
        order = np.argsort(src, kind="stable")
        assert (np.diff(dst[order].astype(int)) >= 0).all()
    assert masks_unchanged(s, out)


def test_plan_rejects_unknown_mode_and_empty_histogram_match():
    with pytest.raises(ValueError):
        plan_harmonization(np.random.default_rng(0), "sepia", 2)
    with pytest.raises(ValueError):
        plan_harmonization(np.random.default_rng(0), "histogram_match", 0)


def test_apply_records_replay_identically():
    s = two_instance_sample(3)
    rec = {"mode": "quantize", "k": 16}
    a = apply_harmonization(s, rec, np.random.default_rng(5))
    b = apply_harmonization(s, rec, np.random.default_rng(5))
    assert np.array_equal(a.image, b.image)
