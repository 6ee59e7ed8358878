"""Persistence: RLE codec, pool manifests, guide-box bundles, COCO documents, layouts, tensors."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import GuideBundleError, RleError
from .imaging import load_png, save_png
from .structures import AnnotatedSample, BoundingBox, Instance, InstanceAsset, tight_box

CATEGORY = {"id": 1, "name": "subject"}


# ---------------------------------------------------------------- RLE


def rle_encode(mask: np.ndarray) -> dict:
    """COCO uncompressed RLE: column-major run lengths starting with a run of zeros."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    flat = mask.ravel(order="F")
    if flat.size == 0:
        return {"size": [h, w], "counts": []}
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(edges).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return {"size": [int(h), int(w)], "counts": [int(c) for c in counts]}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = (int(v) for v in rle["size"])
    if isinstance(rle["counts"], (str, bytes)):
        raise RleError("compressed RLE strings are not supported")
    counts = np.asarray(rle["counts"], dtype=np.int64)
    if (counts < 0).any() or int(counts.sum()) != h * w:
        raise RleError(f"run lengths sum to {int(counts.sum())}, expected {h * w}")
    values = np.arange(len(counts)) % 2 == 1
    flat = np.repeat(values, counts)
    return flat.reshape((w, h)).T.copy()


def rle_area(rle: dict) -> int:
    return int(sum(rle["counts"][1::2]))


# ---------------------------------------------------------------- JSON helpers


def _write_json(path: Path, obj: Any) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, separators=(",", ":"), ensure_ascii=False)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _read_json(path: Path) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc


# ---------------------------------------------------------------- pool manifests


@dataclass
class PoolEntry:
    asset_id: str
    rgba_path: str
    mask_path: str | None
    source: str  # "chroma_key" | "still_illustration"
    native_size: tuple[int, int]

    def to_dict(self) -> dict:
        return {
            "asset_id": self.asset_id,
            "rgba_path": self.rgba_path,
            "mask_path": self.mask_path,
            "source": self.source,
            "native_size": list(self.native_size),
        }


class PoolManifest:
    """Foreground pool: unique asset ids mapped to RGBA/mask files (paths relative to the manifest)."""

    def __init__(self, entries: Iterable[PoolEntry] = (), root: str | Path = "."):
        self.root = Path(root)
        self.entries: list[PoolEntry] = []
        self._index: dict[str, PoolEntry] = {}
        for e in entries:
            self.add(e)

    def add(self, entry: PoolEntry) -> None:
        if entry.asset_id in self._index:
            raise ValueError(f"duplicate asset id {entry.asset_id!r}")
        self.entries.append(entry)
        self._index[entry.asset_id] = entry

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, asset_id: str) -> bool:
        return asset_id in self._index

    def ids(self) -> list[str]:
        return [e.asset_id for e in self.entries]

    def entry(self, asset_id: str) -> PoolEntry:
        return self._index[asset_id]

    def load_asset(self, asset_id: str) -> InstanceAsset:
        e = self._index[asset_id]
        rgba = load_png(self.root / e.rgba_path)
        if rgba.ndim == 2:
            rgba = np.repeat(rgba[..., None], 3, axis=2)
        if rgba.shape[2] == 3:
            rgba = np.concatenate([rgba, np.ones(rgba.shape[:2] + (1,), np.float32)], axis=2)
        if e.mask_path:
            m = load_png(self.root / e.mask_path)
            mask = (m if m.ndim == 2 else m[..., 0]) > 0.5
        else:
            mask = rgba[..., 3] > 0.5
        return InstanceAsset(rgba, mask, {"asset_id": e.asset_id, "source": e.source})

    def to_dict(self) -> dict:
        return {"version": 1, "entries": [e.to_dict() for e in self.entries]}

    def save(self, path: str | Path) -> None:
        _write_json(Path(path), self.to_dict())

    @classmethod
    def load(cls, path: str | Path, check_files: bool = True) -> "PoolManifest":
        path = Path(path)
        data = _read_json(path)
        manifest = cls(root=path.parent)
        for raw in data.get("entries", []):
            entry = PoolEntry(
                asset_id=str(raw["asset_id"]),
                rgba_path=raw["rgba_path"],
                mask_path=raw.get("mask_path"),
                source=raw.get("source", "chroma_key"),
                native_size=tuple(raw.get("native_size", (0, 0))),
            )
            if check_files:
                for p in (entry.rgba_path, entry.mask_path):
                    if p and not (manifest.root / p).is_file():
                        raise FileNotFoundError(f"manifest {path} references missing file {manifest.root / p}")
            manifest.add(entry)
        return manifest


def list_backgrounds(directory: str | Path) -> list[Path]:
    paths = sorted(Path(directory).glob("*.png"))
    return paths


# ---------------------------------------------------------------- guide boxes


@dataclass
class GuidePhoto:
    photo_id: str
    boxes: list[BoundingBox]  # already in canvas coordinates
    scale: float


class GuideBundle:
    """Person boxes from labeled photos, uniformly scaled to fit the canvas."""

    def __init__(self, photos: list[GuidePhoto], canvas: int):
        self.photos = photos
        self.canvas = canvas

    def eligible(self, n: int) -> list[GuidePhoto]:
        return [p for p in self.photos if len(p.boxes) >= n]

    def __len__(self) -> int:
        return len(self.photos)


def _bundled_guides() -> Path:
    return Path(str(resources.files("toonsynth") / "data" / "guide_boxes.json"))


def load_guide_boxes(path: str | Path | None = None, canvas: int = 720) -> GuideBundle:
    """Load a person-box bundle; ``None`` loads the one shipped with the package.

    Each photo is scaled by canvas / max(width, height) so every box keeps
    its relative geometry and lands inside the canvas.
    """
    path = _bundled_guides() if path is None else Path(path)
    data = _read_json(path)
    if not isinstance(data, dict) or not isinstance(data.get("photos"), list):
        raise GuideBundleError(f"{path}: expected an object with a 'photos' list")
    photos = []
    for i, raw in enumerate(data["photos"]):
        try:
            w, h = float(raw["width"]), float(raw["height"])
            boxes_raw = raw["boxes"]
            pid = str(raw.get("id", i))
        except (KeyError, TypeError) as exc:
            raise GuideBundleError(f"{path}: photo #{i} is malformed ({exc})") from exc
        if w <= 0 or h <= 0:
            raise GuideBundleError(f"{path}: photo #{i} has non-positive size")
        s = canvas / max(w, h)
        boxes = []
        for b in boxes_raw:
            if len(b) != 4 or b[2] <= 0 or b[3] <= 0:
                raise GuideBundleError(f"{path}: photo #{i} has an invalid box {b}")
            boxes.append(BoundingBox.from_xywh(*(float(v) for v in b)).scaled(s))
        photos.append(GuidePhoto(pid, boxes, s))
    return GuideBundle(photos, canvas)


def guide_boxes_from_coco(instances: str | Path | dict, min_area: float = 0.0) -> dict:
    """Build a guide bundle from a COCO instances file (category 1 = person, non-crowd)."""
    doc = instances if isinstance(instances, dict) else _read_json(Path(instances))
    by_image: dict[int, list] = {}
    for ann in doc["annotations"]:
        if ann.get("category_id") == 1 and not ann.get("iscrowd", 0) and ann["bbox"][2] * ann["bbox"][3] > min_area:
            by_image.setdefault(ann["image_id"], []).append([float(v) for v in ann["bbox"]])
    photos = []
    for img in sorted(doc["images"], key=lambda im: im["id"]):
        if img["id"] in by_image:
            photos.append({"id": img["id"], "width": img["width"], "height": img["height"], "boxes": by_image[img["id"]]})
    return {"version": 1, "source": "coco person boxes", "photos": photos}


# ---------------------------------------------------------------- COCO documents


def sample_file_name(index: int) -> str:
    return f"{index:06d}.png"


def _annotation_records(sample: AnnotatedSample, image_id: int) -> list[dict]:
    records = []
    for inst in sample.instances:
        rle = rle_encode(inst.modal_mask)
        records.append({
            "image_id": int(image_id),
            "category_id": CATEGORY["id"],
            "bbox": [int(v) for v in inst.bbox.to_xywh()],
            "segmentation": rle,
            "area": rle_area(rle),
            "iscrowd": 0,
            "asset_id": inst.asset_id,
            "amodal_segmentation": rle_encode(inst.amodal_mask),
        })
    return records


def _image_record(sample: AnnotatedSample, index: int) -> dict:
    h, w = sample.image.shape[:2]
    return {"id": int(index), "file_name": f"images/{sample_file_name(index)}", "width": int(w), "height": int(h)}


def _assemble(images: dict[int, dict], annotations: dict[int, list[dict]]) -> dict:
    """COCO document with images in index order and annotation ids numbered in that order."""
    anns = []
    for idx in sorted(images):
        for rec in annotations.get(idx, []):
            anns.append({"id": len(anns) + 1, **rec})
    return {"images": [images[i] for i in sorted(images)], "annotations": anns, "categories": [dict(CATEGORY)]}


def coco_document(samples: Sequence[AnnotatedSample], indices: Sequence[int] | None = None) -> dict:
    indices = list(range(len(samples))) if indices is None else list(indices)
    images = {int(i): _image_record(s, i) for i, s in zip(indices, samples)}
    annotations = {int(i): _annotation_records(s, i) for i, s in zip(indices, samples)}
    return _assemble(images, annotations)


class DatasetWriter:
    """Single writer for one output directory.

    Samples may arrive in any order; images and layout sidecars are written
    immediately and ``annotations.json`` is assembled in index order by
    :meth:`close`, so the output does not depend on arrival order.
    """

    def __init__(self, out_dir: str | Path):
        self.out = Path(out_dir)
        try:
            (self.out / "images").mkdir(parents=True, exist_ok=True)
            (self.out / "layouts").mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create output directory {self.out}: {exc}") from exc
        self._images: dict[int, dict] = {}
        self._annotations: dict[int, list[dict]] = {}

    def add(self, index: int, sample: AnnotatedSample) -> None:
        index = int(index)
        if index in self._images:
            raise ValueError(f"sample {index} written twice")
        save_png(self.out / "images" / sample_file_name(index), sample.image)
        if sample.layout is not None:
            _write_json(self.out / "layouts" / f"{index:06d}.json", sample.layout)
        self._images[index] = _image_record(sample, index)
        self._annotations[index] = _annotation_records(sample, index)

    def close(self) -> dict:
        doc = _assemble(self._images, self._annotations)
        _write_json(self.out / "annotations.json", doc)
        return doc


def write_dataset(
    samples: Sequence[AnnotatedSample], out_dir: str | Path, indices: Sequence[int] | None = None
) -> dict:
    """Write PNGs, per-sample layout sidecars and ``annotations.json``; returns the COCO document."""
    indices = list(range(len(samples))) if indices is None else list(indices)
    writer = DatasetWriter(out_dir)
    for idx, sample in zip(indices, samples):
        writer.add(idx, sample)
    return writer.close()


def read_dataset(out_dir: str | Path) -> list[AnnotatedSample]:
    out = Path(out_dir)
    doc = _read_json(out / "annotations.json")
    by_image: dict[int, list] = {}
    for ann in doc["annotations"]:
        by_image.setdefault(ann["image_id"], []).append(ann)
    samples = []
    for img in doc["images"]:
        image = np.asarray(np.round(load_png(out / img["file_name"]) * 255), dtype=np.uint8)
        instances = []
        for ann in by_image.get(img["id"], []):
            modal = rle_decode(ann["segmentation"])
            amodal = rle_decode(ann["amodal_segmentation"]) if "amodal_segmentation" in ann else modal.copy()
            box = tight_box(modal)
            instances.append(Instance(modal, amodal, box, str(ann.get("asset_id", ""))))
        layout_path = out / "layouts" / f"{int(img['id']):06d}.json"
        layout = _read_json(layout_path) if layout_path.is_file() else None
        samples.append(AnnotatedSample(image, instances, layout))
    return samples


def load_coco(path: str | Path) -> Any:
    return _read_json(Path(path))


def save_json(path: str | Path, obj: Any) -> None:
    _write_json(Path(path), obj)


# ---------------------------------------------------------------- tensor container

TENSOR_MAGIC = b"TST1"


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    """Magic ``TST1``, uint32 ndim, uint32 dims, then little-endian float32 data (C order)."""
    arr = np.asarray(array, dtype="<f4", order="C")
    header = TENSOR_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path}: not a tensor container")
    (ndim,) = struct.unpack_from("<I", blob, 4)
    shape = struct.unpack_from(f"<{ndim}I", blob, 8)
    offset = 8 + 4 * ndim
    n = math.prod(shape)
    if len(blob) - offset != 4 * n:
        raise ValueError(f"{path}: payload has {len(blob) - offset} bytes, expected {4 * n}")
    return np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape).astype(np.float32)
