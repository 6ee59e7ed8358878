"""Command line entry point: ``toonsynth extract | synthesize | evaluate | verify``.

Exit codes: 0 success, 1 a check or pipeline step failed, 2 invalid usage or input.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import chroma, metrics, verify
from .compositor import Pools, generate_sample
from .config import ExtractConfig, RunConfig
from .dataset_io import DatasetWriter, PoolEntry, PoolManifest, load_coco, load_guide_boxes, save_json
from .errors import EmptyForeground, ToonSynthError, ZeroSupport
from .imaging import bilateral_filter, load_png, resize, save_png, to_float

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or unreadable/invalid input files."""


# ---------------------------------------------------------------- extract


def cmd_extract(args) -> int:
    frames_dir = Path(args.frames)
    if not args.fps > 0:
        raise UsageError(f"--fps must be positive, got {args.fps}")
    if not frames_dir.is_dir():
        raise UsageError(f"frames directory not found: {frames_dir}")
    frames = sorted(frames_dir.glob("*.png"))
    if not frames:
        raise UsageError(f"no PNG frames in {frames_dir}")
    cfg = ExtractConfig()
    min_area = cfg.min_area if args.min_area is None else args.min_area
    picked = chroma.sample_frames(frames, args.fps, cfg.target_fps)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    manifest = PoolManifest.load(manifest_path) if manifest_path.is_file() else PoolManifest(root=out)

    prepared = []
    for path in picked:
        frame = load_png(path)[..., :3]
        filtered = bilateral_filter(frame, cfg.bilateral_diameter, cfg.bilateral_sigma)
        try:
            est = chroma.estimate_keying_hue(filtered, cfg.hue_bins, cfg.key_gate, cfg.hue_half_window)
        except ZeroSupport as exc:
            print(f"{path.name}: rejected ({exc})")
            continue
        prepared.append((path, frame, filtered, est))

    if args.key_mode == "per_video" and prepared:
        hue = chroma.majority_key([p[3] for p in prepared])
        prepared = [(p, f, fl, chroma.KeyingEstimate(hue, e.support, e.coverage)) for p, f, fl, e in prepared]

    added = 0
    next_id = len(manifest)
    for path, frame, filtered, est in prepared:
        try:
            asset = chroma.extract_instance(
                filtered, est, color=frame, gate=cfg.extract_gate, half_window=cfg.hue_half_window, min_area=min_area
            )
        except EmptyForeground as exc:
            print(f"{path.name}: hue {est.hue_star:.4f} coverage {est.coverage:.3f} rejected ({exc})")
            continue
        while f"{next_id:04d}" in manifest:
            next_id += 1
        aid = f"{next_id:04d}"
        save_png(out / f"{aid}.rgba.png", asset.rgba)
        save_png(out / f"{aid}.mask.png", asset.mask)
        manifest.add(PoolEntry(aid, f"{aid}.rgba.png", f"{aid}.mask.png", "chroma_key", (asset.width, asset.height)))
        added += 1
        print(f"{path.name}: hue {est.hue_star:.4f} coverage {est.coverage:.3f} -> {aid} ({asset.width}x{asset.height})")
    manifest.save(manifest_path)
    print(f"processed {len(picked)} of {len(frames)} frames, extracted {added} instances")
    if added == 0:
        raise EmptyForeground("no instance extracted; pool is empty")
    return EXIT_OK


# ---------------------------------------------------------------- synthesize

_WORKER: dict = {}


def _worker_init(cfg_dict: dict) -> None:
    cfg = RunConfig.from_dict(cfg_dict)
    _WORKER["cfg"] = cfg
    _WORKER["pools"] = Pools.from_config(cfg)
    _WORKER["guides"] = load_guide_boxes(cfg.guide_boxes, cfg.canvas)


def _worker_run(index: int):
    try:
        return index, generate_sample(index, _WORKER["cfg"], _WORKER["pools"], _WORKER["guides"]), None
    except ToonSynthError as exc:
        return index, None, f"{type(exc).__name__}: {exc}"


def resolve_workers(cfg: RunConfig, cli_value: int | None) -> int:
    env = os.environ.get("TOONSYNTH_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise UsageError(f"TOONSYNTH_THREADS must be an integer, got {env!r}") from exc
    elif cli_value is not None:
        n = cli_value
    else:
        n = cfg.workers
    if n < 1:
        raise UsageError("worker count must be >= 1")
    return n


def run_synthesis(cfg: RunConfig, out_dir: str | Path, workers: int = 1, preview: int = 0):
    """Generate ``cfg.sample_count`` samples into ``out_dir``; returns (failures, preview samples)."""
    writer = DatasetWriter(out_dir)
    failures: list[dict] = []
    keep = []
    indices = range(cfg.sample_count)
    if cfg.sample_count == 0:
        results = iter(())
        executor = None
    elif workers == 1 or cfg.sample_count <= 1:
        _worker_init(cfg.to_dict())
        results = map(_worker_run, indices)
        executor = None
    else:
        executor = ProcessPoolExecutor(workers, initializer=_worker_init, initargs=(cfg.to_dict(),))
        results = executor.map(_worker_run, indices, chunksize=4)
    try:
        for index, sample, error in results:
            if error is not None:
                failures.append({"sample_index": index, "error": error})
                continue
            writer.add(index, sample)
            if len(keep) < preview:
                keep.append(sample)
    finally:
        if executor is not None:
            executor.shutdown()
    writer.close()
    return failures, keep


def contact_sheet(samples, cols: int | None = None, thumb: int = 240) -> np.ndarray:
    """Grid of thumbnails with each instance's modal mask tinted in its own color."""
    n = len(samples)
    cols = cols or max(1, math.ceil(math.sqrt(n)))
    rows = max(1, math.ceil(n / cols))
    sheet = np.ones((rows * thumb, cols * thumb, 3), dtype=np.float32)
    palette = np.random.default_rng(0).uniform(0.2, 1.0, size=(64, 3)).astype(np.float32)
    for i, s in enumerate(samples):
        img = to_float(s.image).copy()
        for j, inst in enumerate(s.instances):
            tint = palette[j % len(palette)]
            img[inst.modal_mask] = 0.55 * img[inst.modal_mask] + 0.45 * tint
        r, c = divmod(i, cols)
        sheet[r * thumb:(r + 1) * thumb, c * thumb:(c + 1) * thumb] = resize(img, (thumb, thumb))
    return sheet


def cmd_synthesize(args) -> int:
    try:
        cfg = RunConfig.load(args.config)
    except (OSError, ValueError, TypeError) as exc:
        raise UsageError(f"invalid config {args.config}: {exc}") from exc
    if cfg.sample_count > 0 and (not cfg.foreground_manifest or not cfg.background_dir):
        raise UsageError("config must name foreground_manifest and background_dir")
    if args.preview < 0:
        raise UsageError("--preview must be >= 0")
    workers = resolve_workers(cfg, args.workers)
    t0 = time.perf_counter()
    failures, keep = run_synthesis(cfg, args.out, workers, args.preview or 0)
    elapsed = time.perf_counter() - t0
    if args.preview:
        save_png(Path(args.out) / "preview.png", contact_sheet(keep))
    print(f"wrote {cfg.sample_count - len(failures)} samples to {args.out} in {elapsed:.1f}s with {workers} worker(s)")
    for f in failures:
        print(f"sample {f['sample_index']} failed: {f['error']}", file=sys.stderr)
    if failures:
        save_json(Path(args.out) / "failures.json", failures)
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------- evaluate


def cmd_evaluate(args) -> int:
    try:
        gt = load_coco(args.gt)
        pred = load_coco(args.pred)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    try:
        report = metrics.evaluate_coco(gt, pred)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"cannot evaluate: {exc}") from exc
    save_json(args.report, report)
    for key in ("Box AP", "Mask AP", "Boundary AP"):
        if key in report:
            print(f"{key}: {100 * report[key]:.1f}")
    return EXIT_OK


# ---------------------------------------------------------------- verify


def cmd_verify(args) -> int:
    results = verify.run_checks(points=args.points, seed=args.seed)
    print(verify.format_table(results))
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


# ---------------------------------------------------------------- main


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="toonsynth", description="Synthetic cartoon segmentation data tools.")
    p.add_argument("--json-errors", action="store_true", help="report errors as JSON on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("extract", help="cut subjects out of chroma-key frames")
    e.add_argument("--frames", required=True)
    e.add_argument("--fps", required=True, type=float)
    e.add_argument("--out", required=True)
    e.add_argument("--min-area", type=int, default=None)
    e.add_argument("--key-mode", choices=("per_frame", "per_video"), default="per_frame")
    e.set_defaults(func=cmd_extract)

    s = sub.add_parser("synthesize", help="compose annotated samples")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--preview", type=int, default=0, metavar="N")
    s.add_argument("--workers", type=int, default=None)
    s.set_defaults(func=cmd_synthesize)

    v = sub.add_parser("evaluate", help="Box/Mask/Boundary AP of predictions against ground truth")
    v.add_argument("--gt", required=True)
    v.add_argument("--pred", required=True)
    v.add_argument("--report", required=True)
    v.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("verify", help="run the gradient, oracle and determinism checks")
    c.add_argument("--points", type=int, default=100)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_verify)
    return p


def _report(exc: BaseException, code: int, as_json: bool) -> int:
    if as_json:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    else:
        print(f"error: {exc}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    as_json = "--json-errors" in argv
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _report(exc, EXIT_USAGE, as_json)
    try:
        return args.func(args)
    except UsageError as exc:
        return _report(exc, EXIT_USAGE, as_json)
    except (ToonSynthError, OSError) as exc:
        return _report(exc, EXIT_FAIL, as_json)


if __name__ == "__main__":
    sys.exit(main())
