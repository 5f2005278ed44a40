"""Command-line surface for the full pipeline.

Subcommands compose the library modules: render ground-truth heatmaps from
an annotation CSV, group heatmap bundles into detections, fuse flip-
augmented detections, evaluate FROC sensitivity, simulate degraded bundles,
check loss gradients, and window raw CT intensities.

Exit codes: 0 success, 2 usage error, 3 input-format error, 4 internal
invariant violation. Failed commands remove their partial outputs. Given
identical inputs, flags, and seeds every command writes identical bytes;
the worker count never changes output content.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import config as config_mod
from .dataio import (
    InputFormatError,
    apply_ct_window,
    parse_annotations,
    read_detections,
    read_heatmaps,
    write_annotations,
    write_detections,
    write_heatmaps,
)
from .evaluation import (
    diameter_bucket,
    froc,
    interval_bucket,
    lesion_type_name,
    match_detections,
    stratified_froc,
)
from .fusion import fuse_tta
from .grouping import detect
from .losses import (
    FocalParams,
    finite_diff_check,
    focal_loss,
    focal_loss_grad,
    offset_loss,
    offset_loss_grad,
)
from .synthetic import (
    DegradationConfig,
    flip_scene,
    generate_scene,
    simulate_heatmaps,
)
from .targets import render_targets

HEATMAP_SUFFIX = ".rkhm"


class _Outputs:
    """Tracks files written by a command so failures can clean them up."""

    def __init__(self) -> None:
        self.paths: list[Path] = []

    def write_bytes(self, path: Path, data: bytes) -> None:
        self.run(path, lambda tmp: tmp.write_bytes(data))

    def write_text(self, path: Path, text: str) -> None:
        self.write_bytes(path, text.encode("utf-8"))

    def run(self, path: Path, writer) -> None:
        """Run a writer function against a temp path, then move into place."""
        tmp = path.with_name(path.name + ".tmp")
        try:
            writer(tmp)
            os.replace(tmp, path)
        except BaseException:
            tmp.unlink(missing_ok=True)
            raise
        self.paths.append(path)

    def discard_all(self) -> None:
        for path in self.paths:
            try:
                path.unlink()
            except OSError:
                pass


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode("utf-8")


def _load_effective_config(args, section_overrides: dict[str, dict]) -> dict:
    cfg = config_mod.load_config(getattr(args, "config", None))
    for section, overrides in section_overrides.items():
        cfg = config_mod.apply_overrides(cfg, section, overrides)
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def _cmd_render_targets(args) -> int:
    cfg = _load_effective_config(
        args,
        {
            "render": {
                "stride": args.stride,
                "input_size": args.input_size,
                "min_overlap": args.min_overlap,
                "sigma_divisor": args.sigma_divisor,
            }
        },
    )
    render = cfg["render"]
    stride = render["stride"]
    input_size = render["input_size"]
    out_cells = -(-input_size // stride)

    parsed = parse_annotations(args.annotations, args.exclusions)
    by_image: dict[str, list] = {}
    for ann in parsed.annotations:
        by_image.setdefault(ann.file_name, []).append(ann)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = _Outputs()
    try:
        for key in sorted(by_image):
            extremes = [ann.extremes() for ann in by_image[key]]
            try:
                targets = render_targets(
                    extremes,
                    out_cells,
                    out_cells,
                    stride,
                    min_overlap=render["min_overlap"],
                    sigma_divisor=render["sigma_divisor"],
                    input_size=(input_size, input_size),
                )
            except ValueError as exc:
                raise InputFormatError(f"image {key}: {exc}") from None
            outputs.run(
                out_dir / f"{key}{HEATMAP_SUFFIX}",
                lambda tmp, b=targets.bundle: write_heatmaps(b, tmp),
            )
        outputs.write_bytes(out_dir / "config.json", _json_bytes(cfg))
    except BaseException:
        outputs.discard_all()
        raise

    if parsed.n_excluded:
        print(f"excluded {parsed.n_excluded} annotation row(s)")
    if parsed.inconsistent:
        print(
            f"warning: {len(parsed.inconsistent)} annotation(s) with "
            f"inconsistent bounding boxes: {', '.join(parsed.inconsistent)}"
        )
    print(f"wrote {len(by_image)} heatmap bundle(s) to {out_dir}")
    return 0


def _cmd_detect(args) -> int:
    cfg = _load_effective_config(
        args,
        {
            "grouping": {
                "tau_e": args.tau_e,
                "tau_c": args.tau_c,
                "k1": args.k1,
                "k2": args.k2,
                "kernel": args.kernel,
                "center_interp": args.center_interp,
            }
        },
    )
    grouping_cfg = config_mod.grouping_config(cfg)

    heatmap_dir = Path(args.heatmaps)
    files = sorted(heatmap_dir.glob(f"*{HEATMAP_SUFFIX}"))
    if not files:
        raise InputFormatError(f"no {HEATMAP_SUFFIX} files in {heatmap_dir}")

    def run_one(path: Path):
        bundle = read_heatmaps(path)
        return path.stem, detect(bundle, grouping_cfg)

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            results = dict(pool.map(run_one, files))
    else:
        results = dict(run_one(f) for f in files)

    outputs = _Outputs()
    outputs.run(
        Path(args.out),
        lambda tmp: write_detections(
            {key: results[key] for key in sorted(results)}, tmp, config=cfg
        ),
    )
    n_dets = sum(len(d) for d in results.values())
    print(f"wrote {n_dets} detection(s) over {len(results)} image(s) to {args.out}")
    return 0


def _cmd_fuse(args) -> int:
    cfg = _load_effective_config(
        args,
        {
            "soft_nms": {
                "sigma": args.sigma,
                "score_floor": args.score_floor,
                "method": args.method,
            }
        },
    )
    nms_cfg = config_mod.soft_nms_config(cfg)

    original, _ = read_detections(args.original)
    flipped, _ = read_detections(args.flipped)
    keys = sorted(set(original) | set(flipped))
    fused = {
        key: fuse_tta(
            original.get(key, []), flipped.get(key, []), args.image_width, nms_cfg
        )
        for key in keys
    }

    outputs = _Outputs()
    outputs.run(
        Path(args.out), lambda tmp: write_detections(fused, tmp, config=cfg)
    )
    n_dets = sum(len(d) for d in fused.values())
    print(f"wrote {n_dets} fused detection(s) over {len(keys)} image(s) to {args.out}")
    return 0


def _stratum_label(ann, key: str) -> str:
    if key == "type":
        return lesion_type_name(ann.lesion_type)
    if key == "diameter":
        return diameter_bucket(ann.long_diameter_mm)
    return interval_bucket(ann.slice_interval_mm)


def _format_report_text(result, strata, iou_threshold, pad, fp_targets) -> str:
    def row(label: str, values) -> str:
        return label.ljust(14) + "".join(f"{v:>9}" for v in values)

    def fmt(value) -> str:
        if value is None or (isinstance(value, float) and math.isinf(value)):
            return "-"
        return f"{value:.4f}"

    lines = [
        f"FROC sensitivity (matching: IoU >= {iou_threshold:g} "
        f"on boxes padded {pad:g} px)",
        f"images: {result.n_images}    lesions: {result.n_lesions}",
        row("FPs/image", [f"{t:g}" for t in fp_targets]),
        row("sensitivity", [fmt(p.sensitivity) for p in result.points]),
        row("threshold", [fmt(p.threshold) for p in result.points]),
    ]
    if strata is not None:
        lines.append("")
        lines.append(f"stratified by {strata.key}")
        for name in sorted(strata.per_stratum):
            sub = strata.per_stratum[name]
            lines.append(
                row(
                    f"{name} ({sub.n_lesions})",
                    [fmt(p.sensitivity) for p in sub.points],
                )
            )
    return "\n".join(lines) + "\n"


def _froc_to_dict(result) -> dict:
    return {
        "n_images": result.n_images,
        "n_lesions": result.n_lesions,
        "points": [
            {
                "fp_target": p.fp_target,
                "sensitivity": p.sensitivity,
                "threshold": None if math.isinf(p.threshold) else p.threshold,
                "fp_per_image": p.fp_per_image,
            }
            for p in result.points
        ],
    }


def _cmd_eval(args) -> int:
    cfg = _load_effective_config(
        args,
        {
            "eval": {
                "iou_threshold": args.iou,
                "pad": args.pad,
                "fp_targets": args.fps,
            }
        },
    )
    eval_cfg = cfg["eval"]
    fp_targets = tuple(eval_cfg["fp_targets"])

    detections, _ = read_detections(args.detections)
    parsed = parse_annotations(args.annotations, args.exclusions)
    if parsed.n_excluded:
        print(f"excluded {parsed.n_excluded} annotation row(s)")
    gts_by_image: dict[str, list] = {}
    for ann in parsed.annotations:
        gts_by_image.setdefault(ann.file_name, []).append(ann)

    keys = sorted(set(detections) | set(gts_by_image))
    matches, labels = [], []
    for key in keys:
        anns = gts_by_image.get(key, [])
        matches.append(
            match_detections(
                detections.get(key, []),
                [ann.bbox for ann in anns],
                iou_threshold=eval_cfg["iou_threshold"],
                pad=eval_cfg["pad"],
            )
        )
        if args.stratify:
            labels.append([_stratum_label(ann, args.stratify) for ann in anns])

    result = froc(matches, fp_targets)
    strata = (
        stratified_froc(matches, labels, args.stratify, fp_targets)
        if args.stratify
        else None
    )

    report = {
        "config": cfg,
        "criterion": "iou-on-padded-boxes",
        "froc": _froc_to_dict(result),
        "strata": None
        if strata is None
        else {
            "key": strata.key,
            "per_stratum": {
                name: _froc_to_dict(sub)
                for name, sub in strata.per_stratum.items()
            },
        },
    }
    text = _format_report_text(
        result, strata, eval_cfg["iou_threshold"], eval_cfg["pad"], fp_targets
    )

    outputs = _Outputs()
    try:
        outputs.write_bytes(Path(args.out + ".json"), _json_bytes(report))
        outputs.write_text(Path(args.out + ".txt"), text)
    except BaseException:
        outputs.discard_all()
        raise
    print(text, end="")
    return 0


def _cmd_simulate(args) -> int:
    cfg = _load_effective_config(
        args, {"render": {"stride": args.stride}}
    )
    render = cfg["render"]
    stride = render["stride"]

    scene = generate_scene(
        args.n_lesions,
        image_size=(args.image_size, args.image_size),
        seed=args.scene_seed,
    )
    degradation_seed = (
        args.degradation_seed if args.degradation_seed is not None else args.scene_seed
    )
    degradation = DegradationConfig(
        noise_sigma=args.noise,
        peak_drop_prob=args.drop,
        spurious_rate=args.spurious,
        jitter_cells=args.jitter,
        seed=degradation_seed,
    )

    key = f"syn_{args.scene_seed}"
    provenance = dict(cfg)
    provenance["simulate"] = {
        "scene_seed": args.scene_seed,
        "n_lesions": args.n_lesions,
        "image_size": args.image_size,
        "noise_sigma": args.noise,
        "peak_drop_prob": args.drop,
        "spurious_rate": args.spurious,
        "jitter_cells": args.jitter,
        "degradation_seed": degradation_seed,
    }

    outputs = _Outputs()
    try:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        bundle = simulate_heatmaps(
            scene,
            degradation,
            stride,
            min_overlap=render["min_overlap"],
            sigma_divisor=render["sigma_divisor"],
        )
        outputs.run(
            out_dir / f"{key}{HEATMAP_SUFFIX}",
            lambda tmp: write_heatmaps(bundle, tmp),
        )
        outputs.run(
            out_dir / "annotations.csv",
            lambda tmp: write_annotations(scene.annotations, tmp),
        )
        outputs.write_bytes(out_dir / "config.json", _json_bytes(provenance))

        if args.flipped_out:
            flipped_dir = Path(args.flipped_out)
            flipped_dir.mkdir(parents=True, exist_ok=True)
            flipped_degradation = DegradationConfig(
                noise_sigma=args.noise,
                peak_drop_prob=args.drop,
                spurious_rate=args.spurious,
                jitter_cells=args.jitter,
                seed=degradation_seed + 1,
            )
            flipped_bundle = simulate_heatmaps(
                flip_scene(scene),
                flipped_degradation,
                stride,
                min_overlap=render["min_overlap"],
                sigma_divisor=render["sigma_divisor"],
            )
            outputs.run(
                flipped_dir / f"{key}{HEATMAP_SUFFIX}",
                lambda tmp: write_heatmaps(flipped_bundle, tmp),
            )
            outputs.write_bytes(flipped_dir / "config.json", _json_bytes(provenance))
    except BaseException:
        outputs.discard_all()
        raise

    print(
        f"wrote synthetic bundle ({args.n_lesions} lesion(s), "
        f"seed {args.scene_seed}) to {args.out}"
    )
    return 0


def _small_offset_targets():
    """Two lesions on a 12x12 grid: compact planes for offset FD checks."""
    from .geometry import ExtremePoints, Point2

    def diamond(cx, cy, hw, hh):
        return ExtremePoints(
            top=Point2(cx, cy - hh), left=Point2(cx - hw, cy),
            bottom=Point2(cx, cy + hh), right=Point2(cx + hw, cy),
            center=Point2(cx, cy),
        )

    return render_targets(
        [diamond(14.5, 16.25, 9, 10), diamond(34.0, 30.75, 10, 8)], 12, 12, 4
    )


def _cmd_check_gradients(args) -> int:
    rng = np.random.default_rng(args.seed)
    params = FocalParams()
    worst_focal = 0.0
    worst_offset = 0.0

    for _ in range(args.trials):
        pred = rng.uniform(0.05, 0.95, size=(8, 8))
        target = np.zeros((8, 8))
        peaks = rng.integers(1, 4)
        for _ in range(peaks):
            r, c = rng.integers(0, 8, size=2)
            target[r, c] = 1.0
        shoulders = rng.uniform(0.0, 0.99, size=(8, 8))
        target = np.where(target == 1.0, 1.0, shoulders * (rng.random((8, 8)) < 0.3))

        report = finite_diff_check(
            lambda x: focal_loss(x, target, n_objects=int(peaks), params=params),
            lambda x: focal_loss_grad(x, target, n_objects=int(peaks), params=params),
            pred,
            tol=args.tol,
        )
        worst_focal = max(worst_focal, report.max_rel_err)
        if not report.passed:
            print(
                f"FAIL focal: max_rel_err={report.max_rel_err:.3e} "
                f"at cell {report.worst_cell}"
            )
            return 4

    # the offset check sweeps every plane cell, so fewer trials suffice
    offset_trials = max(1, args.trials // 10)
    targets = _small_offset_targets()
    shape = targets.bundle.offset_maps.shape
    for _ in range(offset_trials):
        pred = rng.uniform(0.0, 1.0, size=shape)
        report = finite_diff_check(
            lambda x: offset_loss(x, targets),
            lambda x: offset_loss_grad(x, targets),
            pred,
            tol=args.tol,
        )
        worst_offset = max(worst_offset, report.max_rel_err)
        if not report.passed:
            print(
                f"FAIL offset: max_rel_err={report.max_rel_err:.3e} "
                f"at cell {report.worst_cell}"
            )
            return 4

    print(
        f"PASS: {args.trials} focal trials (max_rel_err={worst_focal:.3e}), "
        f"{offset_trials} offset trials (max_rel_err={worst_offset:.3e}), "
        f"tol={args.tol:g}"
    )
    return 0


def _cmd_window(args) -> int:
    data = np.fromfile(args.infile, dtype="<f4")
    normalized = apply_ct_window(data, args.level, args.width).astype("<f4")
    outputs = _Outputs()
    outputs.write_bytes(Path(args.out), normalized.tobytes())
    print(f"windowed {data.size} value(s) to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _positive_float(raw: str) -> float:
    value = float(raw)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {raw}")
    return value


def _fps_list(raw: str) -> list[float]:
    try:
        return [float(p) for p in raw.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad FP target list: {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    # config-backed flags carry their effective default in the help text;
    # their argparse default stays None so only explicit flags override the
    # config file
    parser = argparse.ArgumentParser(
        prog="recistkit",
        description="Keypoint-based lesion detection toolkit: targets, "
        "grouping, fusion, and FROC evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "render-targets",
        help="render ground-truth heatmap bundles from an annotation CSV",
    )
    p.add_argument("--annotations", required=True, help="annotation CSV path")
    p.add_argument("--exclusions", default=None,
                   help="file of keys to drop (default: none)")
    p.add_argument("--input-size", type=int, default=None,
                   help="input pixels, square (default: 511)")
    p.add_argument("--stride", type=int, default=None,
                   help="down-sampling factor (default: 4)")
    p.add_argument("--min-overlap", type=float, default=None,
                   help="kernel radius rule IoU (default: 0.3)")
    p.add_argument("--sigma-divisor", type=float, default=None,
                   help="kernel sigma = radius / divisor (default: 3.0)")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_render_targets)

    p = sub.add_parser(
        "detect",
        help="group heatmap bundles into scored detections",
    )
    p.add_argument("--heatmaps", required=True, help="directory of bundles")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--tau-e", type=float, default=None,
                   help="extreme-peak threshold, strict (default: 0.1)")
    p.add_argument("--tau-c", type=float, default=None,
                   help="center-response threshold, strict (default: 0.1)")
    p.add_argument("--k1", type=int, default=None,
                   help="max peaks kept per map (default: 40)")
    p.add_argument("--k2", type=int, default=None,
                   help="max combinations kept (default: 100)")
    p.add_argument("--kernel", type=int, default=None,
                   help="odd peak-suppression window (default: 3)")
    p.add_argument("--center-interp", choices=["nearest", "bilinear"],
                   default=None,
                   help="center map sampling (default: nearest)")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                   help="images processed in parallel; output is identical "
                        "regardless (default: machine parallelism)")
    p.add_argument("--out", required=True, help="detections JSON path")
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser(
        "fuse",
        help="merge original and flipped detections with Soft-NMS",
    )
    p.add_argument("--original", required=True, help="detections JSON")
    p.add_argument("--flipped", required=True,
                   help="detections JSON from the flipped view")
    p.add_argument("--image-width", type=_positive_float, required=True,
                   help="width of the original image in pixels")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--sigma", type=_positive_float, default=None,
                   help="gaussian decay bandwidth (default: 0.5)")
    p.add_argument("--score-floor", type=float, default=None,
                   help="minimum retained score (default: 0.001)")
    p.add_argument("--method", choices=["gaussian", "linear"], default=None,
                   help="decay law (default: gaussian)")
    p.add_argument("--out", required=True, help="fused detections JSON path")
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser(
        "eval",
        help="FROC sensitivity of detections against annotations",
    )
    p.add_argument("--detections", required=True, help="detections JSON")
    p.add_argument("--annotations", required=True, help="annotation CSV")
    p.add_argument("--exclusions", default=None,
                   help="file of keys to drop (default: none)")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--iou", type=float, default=None,
                   help="match IoU threshold (default: 0.5)")
    p.add_argument("--pad", type=float, default=None,
                   help="detection box padding in px (default: 5)")
    p.add_argument("--fps", type=_fps_list, default=None,
                   help="comma-separated FPs-per-image targets "
                        "(default: 0.5,1,2,3,4)")
    p.add_argument("--stratify", choices=["type", "diameter", "interval"],
                   default=None,
                   help="also report per-stratum sensitivity (default: off)")
    p.add_argument("--out", required=True, help="report path prefix (.json/.txt)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser(
        "simulate",
        help="write a synthetic degraded bundle plus its ground-truth CSV",
    )
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scene-seed", type=int, default=0,
                   help="scene RNG seed (default: 0)")
    p.add_argument("--n-lesions", type=int, default=3,
                   help="lesions to place (default: 3)")
    p.add_argument("--image-size", type=int, default=768,
                   help="image pixels, square (default: 768)")
    p.add_argument("--stride", type=int, default=None,
                   help="down-sampling factor (default: 4)")
    p.add_argument("--noise", type=float, default=0.0,
                   help="keypoint-map noise sigma (default: 0)")
    p.add_argument("--drop", type=float, default=0.0,
                   help="kernel drop probability (default: 0)")
    p.add_argument("--spurious", type=float, default=0.0,
                   help="expected fake peaks per map (default: 0)")
    p.add_argument("--jitter", type=int, default=0,
                   help="max peak-cell jitter in cells (default: 0)")
    p.add_argument("--degradation-seed", type=int, default=None,
                   help="degradation RNG seed (default: the scene seed)")
    p.add_argument("--flipped-out", default=None,
                   help="also write the flipped view's bundle here "
                        "(default: off)")
    p.add_argument("--config", default=None, help="JSON config file")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser(
        "check-gradients",
        help="verify analytic loss gradients against finite differences",
    )
    p.add_argument("--trials", type=int, default=100,
                   help="random instances per loss (default: 100)")
    p.add_argument("--tol", type=float, default=1e-5,
                   help="max relative error (default: 1e-5)")
    p.add_argument("--seed", type=int, default=0,
                   help="RNG seed (default: 0)")
    p.set_defaults(func=_cmd_check_gradients)

    p = sub.add_parser(
        "window",
        help="normalize raw float32 CT intensities to [0, 1]",
    )
    p.add_argument("--level", type=float, required=True,
                   help="window center in HU")
    p.add_argument("--width", type=_positive_float, required=True,
                   help="window width in HU, > 0")
    p.add_argument("--in", dest="infile", required=True,
                   help="raw little-endian float32 input file")
    p.add_argument("--out", required=True,
                   help="raw little-endian float32 output file")
    p.set_defaults(func=_cmd_window)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputFormatError as exc:
        print(f"error: input-format: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: input-format: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - deliberate catch-all boundary
        print(f"error: internal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
