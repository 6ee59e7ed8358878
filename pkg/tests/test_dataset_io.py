from __future__ import annotations

import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from toonsynth.compositor import generate_sample
from toonsynth.config import RunConfig
from toonsynth.dataset_io import (
    PoolEntry,
    PoolManifest,
    coco_document,
    guide_boxes_from_coco,
    load_guide_boxes,
    read_dataset,
    read_tensor,
    rle_area,
    rle_decode,
    rle_encode,
    write_dataset,
    write_tensor,
)
from toonsynth.demo import write_demo_pools
from toonsynth.errors import GuideBundleError, RleError
from toonsynth.imaging import save_png
from toonsynth.structures import iou, tight_box

# ---------------------------------------------------------------- RLE


def test_all_false_rle():
    assert rle_encode(np.zeros((2, 2), bool))["counts"] == [4]


def test_all_true_rle_starts_with_zero_run():
    assert rle_encode(np.ones((2, 2), bool))["counts"] == [0, 4]


def test_rle_is_column_major():
    m = np.array([[1, 0, 0], [1, 1, 0]], dtype=bool)
    # columns read top to bottom: 1 1 | 0 1 | 0 0
    assert rle_encode(m) == {"size": [2, 3], "counts": [0, 2, 1, 1, 2]}


def test_rle_round_trip_on_random_masks():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        h, w = rng.integers(1, 12, 2)
        m = rng.random((h, w)) < rng.random()
        rle = rle_encode(m)
        assert sum(rle["counts"]) == h * w
        assert np.array_equal(rle_decode(rle), m)
        assert rle_area(rle) == m.sum()


@given(arrays(bool, array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=20)))
def test_rle_round_trip_property(m):
    assert np.array_equal(rle_decode(rle_encode(m)), m)


def test_rle_rejects_bad_counts():
    with pytest.raises(RleError):
        rle_decode({"size": [2, 2], "counts": [1, 2]})
    with pytest.raises(RleError):
        rle_decode({"size": [2, 2], "counts": "abc"})
    with pytest.raises(RleError):
        rle_decode({"size": [2, 2], "counts": [5, -1]})


# ---------------------------------------------------------------- pool manifest


def test_manifest_rejects_duplicate_ids():
    m = PoolManifest()
    m.add(PoolEntry("a", "a.png", None, "chroma_key", (1, 1)))
    with pytest.raises(ValueError):
        m.add(PoolEntry("a", "b.png", None, "chroma_key", (1, 1)))


def test_manifest_round_trip_and_missing_files(tmp_path):
    rgba = np.zeros((4, 5, 4), np.float32)
    rgba[1:3, 1:4] = 1.0
    save_png(tmp_path / "x.rgba.png", rgba)
    m = PoolManifest(root=tmp_path)
    m.add(PoolEntry("x", "x.rgba.png", None, "still_illustration", (5, 4)))
    m.save(tmp_path / "pool.json")
    loaded = PoolManifest.load(tmp_path / "pool.json")
    assert loaded.ids() == ["x"]
    asset = loaded.load_asset("x")
    assert asset.mask.sum() == 6 and asset.provenance["source"] == "still_illustration"
    (tmp_path / "x.rgba.png").unlink()
    with pytest.raises(FileNotFoundError):
        PoolManifest.load(tmp_path / "pool.json")


# ---------------------------------------------------------------- guide boxes


def bundle(tmp_path, photos) -> str:
    path = tmp_path / "guides.json"
    path.write_text(json.dumps({"version": 1, "photos": photos}))
    return str(path)


def test_guide_eligibility(tmp_path):
    b = load_guide_boxes(bundle(tmp_path, [{"id": 1, "width": 100, "height": 50, "boxes": [[0, 0, 5, 5]] * 3}]))
    assert len(b.eligible(3)) == 1
    assert b.eligible(4) == []


def test_guide_scaling_preserves_pairwise_iou(tmp_path):
    rng = np.random.default_rng(1)
    raw = [[float(v) for v in np.r_[rng.uniform(0, 300, 2), rng.uniform(10, 200, 2)]] for _ in range(6)]
    b = load_guide_boxes(bundle(tmp_path, [{"id": 0, "width": 640, "height": 480, "boxes": raw}]), 720)
    (photo,) = b.photos
    assert photo.scale == 720 / 640
    from toonsynth.structures import BoundingBox

    originals = [BoundingBox.from_xywh(*r) for r in raw]
    for i, j in itertools.combinations(range(6), 2):
        assert iou(photo.boxes[i], photo.boxes[j]) == pytest.approx(iou(originals[i], originals[j]), abs=1e-12)


def test_bundled_guides_load():
    b = load_guide_boxes()
    assert len(b) > 100 and b.eligible(1)
    for photo in b.photos[:20]:
        for box in photo.boxes:
            assert 0 <= box.x_min and box.x_max <= 720 + 1e-9 and box.y_max <= 720 + 1e-9


@pytest.mark.parametrize("doc", [[], {"photos": [{"width": 0, "height": 5, "boxes": []}]},
                                 {"photos": [{"width": 5, "height": 5, "boxes": [[0, 0, -1, 2]]}]}])
def test_malformed_guide_bundles(tmp_path, doc):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(GuideBundleError):
        load_guide_boxes(path)


def test_guide_bundle_from_coco_instances():
    doc = {
        "images": [{"id": 2, "width": 10, "height": 10}, {"id": 1, "width": 20, "height": 10}],
        "annotations": [
            {"image_id": 1, "category_id": 1, "bbox": [0, 0, 2, 3], "iscrowd": 0},
            {"image_id": 1, "category_id": 1, "bbox": [0, 0, 2, 3], "iscrowd": 1},
            {"image_id": 2, "category_id": 3, "bbox": [0, 0, 2, 3], "iscrowd": 0},
        ],
    }
    out = guide_boxes_from_coco(doc)
    assert [p["id"] for p in out["photos"]] == [1]
    assert out["photos"][0]["boxes"] == [[0.0, 0.0, 2.0, 3.0]]


# ---------------------------------------------------------------- COCO output


def test_empty_sample_list_gives_valid_document():
    doc = coco_document([])
    assert doc["images"] == [] and doc["annotations"] == [] and doc["categories"][0]["id"] == 1


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("pool")
    cfg = RunConfig.from_dict({"master_seed": 4, **write_demo_pools(root, seed=3, n_fg=6, n_bg=2)})
    from toonsynth.compositor import Pools

    pools = Pools.from_config(cfg)
    guides = load_guide_boxes(cfg.guide_boxes)
    samples = [generate_sample(i, cfg, pools, guides) for i in range(4)]
    out = tmp_path_factory.mktemp("out")
    doc = write_dataset(samples, out)
    return samples, out, doc, pools


def test_write_read_round_trip(small_dataset):
    samples, out, doc, _ = small_dataset
    back = read_dataset(out)
    assert len(back) == len(samples)
    for a, b in zip(samples, back):
        assert np.array_equal(a.image, b.image)
        assert len(a.instances) == len(b.instances)
        for x, y in zip(a.instances, b.instances):
            assert np.array_equal(x.modal_mask, y.modal_mask)
            assert np.array_equal(x.amodal_mask, y.amodal_mask)
            assert x.bbox == y.bbox and x.asset_id == y.asset_id


def test_annotation_records_are_consistent(small_dataset):
    _, _, doc, _ = small_dataset
    image_ids = {img["id"] for img in doc["images"]}
    assert [a["id"] for a in doc["annotations"]] == list(range(1, len(doc["annotations"]) + 1))
    for ann in doc["annotations"]:
        assert ann["image_id"] in image_ids
        m = rle_decode(ann["segmentation"])
        assert ann["area"] == int(m.sum())
        assert ann["bbox"] == [int(v) for v in tight_box(m).to_xywh()]


def test_layout_sidecar_replays_image_bytes(small_dataset):
    from toonsynth.compositor import render_layout
    from toonsynth.imaging import load_png, to_uint8

    _, out, _, pools = small_dataset
    for i in range(4):
        layout = json.loads((out / "layouts" / f"{i:06d}.json").read_text())
        stored = to_uint8(load_png(out / "images" / f"{i:06d}.png"))
        assert np.array_equal(render_layout(layout, pools).image, stored)


def test_annotations_json_is_deterministic(small_dataset, tmp_path):
    samples, out, _, _ = small_dataset
    write_dataset(samples, tmp_path)
    assert (tmp_path / "annotations.json").read_bytes() == (out / "annotations.json").read_bytes()


# ---------------------------------------------------------------- tensor container


@given(arrays(np.float32, array_shapes(min_dims=0, max_dims=4, max_side=5), elements=st.floats(-1e6, 1e6, width=32)))
def test_tensor_round_trip(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("t") / "x.tst"
    write_tensor(path, arr)
    back = read_tensor(path)
    assert back.shape == arr.shape and np.array_equal(back, arr)


def test_tensor_rejects_foreign_files(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE")
    with pytest.raises(ValueError):
        read_tensor(tmp_path / "x")
