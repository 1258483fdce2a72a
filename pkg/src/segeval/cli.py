"""Command-line front end: ``segeval <command> [flags]``.

Exit codes: 0 on success, 1 on data or validation errors, 2 on usage errors.
Every run echoes its resolved configuration as JSON on standard error, and
every file it writes is written atomically.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Callable, Optional, Sequence

from . import __version__
from ._fs import dumps_canonical, write_text_atomic
from .augment import (
    DEFAULT_ROTATIONS,
    DEFAULT_SCALES,
    DEFAULT_TRANSLATIONS,
    AugmentationConfig,
    AugmentationError,
    offline_augment,
)
from .dataset_io import (
    DatasetIOError,
    DatasetManifest,
    dataset_from_coco,
    load_dataset,
    load_predictions,
    read_annotations,
    save_dataset,
    save_predictions,
    split_csv,
)
from .evaluate import COCO_THRESHOLDS, THRESHOLDS_50_90, EvalConfig, EvalReport, EvaluationError, evaluate
from .masks import MaskError
from .model import instance_histogram, validate_dataset
from .report import render_per_class, render_report, render_summary
from .split import SplitConfig, SplitError, render_split_report, search_split
from .synth import REFERENCE_FRAMES, PerturbationConfig, SceneConfig, generate_dataset, perturb_dataset

DEFAULT_SEED = 0
THRESHOLD_SETS = {"coco": COCO_THRESHOLDS, "50-90": THRESHOLDS_50_90}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _pairs(text: str) -> tuple[tuple[float, float], ...]:
    """``"-0.1:-0.1,0.1:0.1"`` -> ((-0.1, -0.1), (0.1, 0.1))."""
    out = []
    for item in text.split(","):
        if not item.strip():
            continue
        parts = item.split(":")
        if len(parts) != 2:
            raise argparse.ArgumentTypeError(f"expected u:v pairs, got {item!r}")
        try:
            out.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected u:v pairs, got {item!r}") from None
    return tuple(out)


def _echo(command: str, config: dict) -> None:
    print(json.dumps({"command": command, "config": config}, sort_keys=True), file=sys.stderr)


def _write_or_print(path: Optional[str], text: str) -> None:
    if path:
        write_text_atomic(path, text)
    else:
        sys.stdout.write(text)


def _is_annotation_doc(doc) -> bool:
    # manifests also carry an "images" key, but it names a directory
    return isinstance(doc, dict) and isinstance(doc.get("images"), list)


def _load_ground_truth(path: str, check_images: bool = False, load_images: bool = False):
    """Accept either a manifest or a bare COCO-layout annotation file."""
    p = Path(path)
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetIOError(f"missing file: {p}") from None
    except json.JSONDecodeError as exc:
        raise DatasetIOError(f"{p}: malformed JSON ({exc})") from None
    if _is_annotation_doc(doc):
        if load_images:
            raise DatasetIOError(f"{p}: pixel data needs a manifest, not a bare annotation file")
        return read_annotations(p)
    return load_dataset(p, check_images=check_images, load_images=load_images)


# -- commands ---------------------------------------------------------------


def cmd_validate(args) -> int:
    _echo("validate", {"input": args.input, "check_images": args.check_images})
    p = Path(args.input)
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetIOError(f"missing file: {p}") from None
    except json.JSONDecodeError as exc:
        raise DatasetIOError(f"{p}: malformed JSON ({exc})") from None
    if _is_annotation_doc(doc):
        ds = dataset_from_coco(doc, mask_dir=p.parent / "masks", source=str(p))
    else:
        manifest = DatasetManifest.read(p)
        ds = _load_unvalidated(manifest, args.check_images)
    violations = validate_dataset(ds)
    for v in violations:
        print(str(v), file=sys.stderr)
    hist = instance_histogram(ds)
    print(f"frames: {len(ds.frames)}  instances: {ds.num_instances}  violations: {len(violations)}")
    for cat in ds.taxonomy:
        print(f"{cat.name:<18}{hist[cat.id]:>6}")
    return 1 if violations else 0


def _load_unvalidated(manifest: DatasetManifest, check_images: bool):
    doc = json.loads(manifest.annotation_path.read_text(encoding="utf-8")) if manifest.annotation_path.is_file() else None
    if doc is None:
        raise DatasetIOError(f"missing file: {manifest.annotation_path}")
    if manifest.taxonomy_path is not None and manifest.taxonomy_path.is_file():
        doc = dict(doc)
        doc["categories"] = json.loads(manifest.taxonomy_path.read_text(encoding="utf-8"))
    ds = dataset_from_coco(doc, mask_dir=manifest.root / "masks", source=str(manifest.annotation_path))
    if check_images:
        for f in ds.frames:
            path = manifest.image_path / f.image_ref
            if not path.is_file():
                raise DatasetIOError(f"missing image file: {path}")
    return ds


def _augmentation_config(args) -> AugmentationConfig:
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    overrides = {
        "rotations": args.rotations,
        "scales": args.scales,
        "translations": args.translations,
        "rotation_scale_product": True if args.cartesian else None,
        "preservation_threshold": args.area_threshold,
        "fill_policy": args.fill,
        "fill_value": args.fill_value,
        "online_flip_prob": args.flip_prob,
        "online_blur_prob": args.blur_prob,
        "online_sigma_range": args.sigma_range,
        "seed": args.seed,
    }
    merged = dict(base)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return AugmentationConfig.from_json(merged)
    except (TypeError, AugmentationError, ValueError) as exc:
        raise UsageError(f"invalid augmentation config: {exc}") from None


def cmd_augment(args) -> int:
    cfg = _augmentation_config(args)
    _echo("augment", {"manifest": args.manifest, "out": args.out, "threads": args.threads, **cfg.to_json()})
    ds = load_dataset(args.manifest, load_images=True)
    out = offline_augment(ds, cfg, threads=args.threads)
    manifest = save_dataset(out, Path(args.out))
    write_text_atomic(manifest.root / "augmentation.json", dumps_canonical(cfg.to_json()))
    print(f"{len(ds.frames)} source frames -> {len(out.frames)} frames written to {args.out}")
    return 0


def _sibling_manifest(source: str, root: Path) -> DatasetManifest:
    """Manifest for a re-annotated copy that keeps using the source's images."""
    src = Path(source)
    try:
        doc = json.loads(src.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        doc = None
    if doc is None or _is_annotation_doc(doc):
        image_path = src.parent / "images"
    else:
        image_path = DatasetManifest.read(src).image_path
    rel = os.path.relpath(image_path.resolve(), root.resolve())
    return DatasetManifest(root=root, image_dir=rel)


def cmd_split(args) -> int:
    try:
        cfg = SplitConfig(
            fractions=(args.train, args.val, args.test),
            quota=args.quota,
            tolerance=args.tolerance,
            seed=args.seed,
            max_attempts=args.max_attempts,
            best_effort=args.best_effort,
            force=args.force,
        )
    except SplitError as exc:
        raise UsageError(str(exc)) from None
    _echo("split", {"input": args.input, "out": args.out, "save": args.save, "threads": args.threads, **cfg.to_json()})
    ds = _load_ground_truth(args.input)
    result = search_split(ds, cfg, threads=args.threads)
    report = render_split_report(result.dataset, quota=cfg.quota, tolerance=cfg.tolerance)
    report += f"score: {result.score} (attempt {result.best_attempt} of {cfg.max_attempts})\n"
    table = split_csv(result.dataset)
    if args.out:
        write_text_atomic(args.out, table)
        sys.stdout.write(report)
    else:
        sys.stdout.write(table)
        sys.stderr.write(report)
    if args.save:
        save_dataset(result.dataset, _sibling_manifest(args.input, Path(args.save)))
    if result.violations and not cfg.best_effort:
        names = ", ".join(result.dataset.category_name(c) for c in result.violations)
        print(f"quota not met within tolerance for: {names}", file=sys.stderr)
        return 1
    return 0


def cmd_evaluate(args) -> int:
    try:
        cfg = EvalConfig(
            iou_kind=args.iou,
            thresholds=THRESHOLD_SETS[args.thresholds],
            mode=args.mode,
            max_detections=args.max_dets,
            exclude_other=args.exclude_other,
        )
    except EvaluationError as exc:
        raise UsageError(str(exc)) from None
    _echo(
        "evaluate",
        {"gt": args.gt, "pred": args.pred, "split": args.split, "label": args.label, "threads": args.threads, **cfg.to_json()},
    )
    gt = _load_ground_truth(args.gt)
    if args.split != "all":
        gt = gt.subset(args.split)
        if not gt.frames:
            raise DataError(f"no frames tagged {args.split!r}")
    preds = load_predictions(args.pred, _load_ground_truth(args.gt))
    keep = {f.frame_id for f in gt.frames}
    preds = {k: v for k, v in preds.items() if k in keep}
    report = evaluate(gt, preds, cfg, threads=args.threads, label=args.label)
    doc = dumps_canonical(report.to_json())
    if args.out:
        write_text_atomic(args.out, doc)
    else:
        sys.stdout.write(doc)
    if args.csv:
        write_text_atomic(args.csv, render_report(report, style="csv", layout="per-class"))
    sys.stdout.write(render_report(report, style="text", layout="summary"))
    sys.stdout.write(render_report(report, style="text", layout="per-class"))
    return 0


def cmd_synth(args) -> int:
    try:
        scene = SceneConfig(
            width=args.width,
            height=args.height,
            instruments=(args.min_instruments, args.max_instruments),
            shape=args.shape,
            occlusion=args.occlusion,
            seed=args.seed,
        )
        pcfg = PerturbationConfig(
            jitter=args.jitter,
            drop_prob=args.drop,
            spurious_rate=args.spurious,
            class_flip_prob=args.class_flip,
            score_noise=args.score_noise,
            seed=args.seed if args.pred_seed is None else args.pred_seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.frames < 1:
        raise UsageError("--frames must be at least 1")
    _echo(
        "synth",
        {
            "out": args.out,
            "frames": args.frames,
            "instances": args.instances,
            "balanced": args.balanced,
            "with_images": args.with_images,
            "scene": scene.to_json(),
            "predictions": args.predictions,
            "perturbation": pcfg.to_json(),
            "threads": args.threads,
        },
    )
    ds = generate_dataset(scene, args.frames, args.instances, args.balanced, args.with_images, args.threads)
    manifest = save_dataset(ds, Path(args.out))
    if args.predictions:
        save_predictions(perturb_dataset(ds, pcfg, args.threads), args.predictions)
    print(f"{len(ds.frames)} frames, {ds.num_instances} instances written to {manifest.root}")
    return 0


def _read_report(path: str) -> EvalReport:
    try:
        return EvalReport.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
    except FileNotFoundError:
        raise DatasetIOError(f"missing file: {path}") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetIOError(f"{path}: not an evaluation report ({exc})") from None


def cmd_report(args) -> int:
    _echo("report", {"report": args.report, "bbox_report": args.bbox_report, "style": args.style, "layout": args.layout})
    reports = [_read_report(p) for p in args.report]
    if args.layout == "per-class":
        if len(reports) != 1:
            raise UsageError("per-class layout takes exactly one --report")
        bbox = _read_report(args.bbox_report) if args.bbox_report else None
        text = render_per_class(reports[0], bbox, style=args.style)
    else:
        runs: dict[str, list[EvalReport]] = {}
        for r in reports:
            runs.setdefault(r.label or "run", []).append(r)
        try:
            text = render_summary(list(runs.items()), style=args.style)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    _write_or_print(args.out, text)
    return 0


# -- parser -----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="segeval", description="Instance-segmentation dataset tooling and evaluation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def threads(p):
        p.add_argument("--threads", type=int, default=1, help="worker threads; output does not depend on it")

    p = sub.add_parser("validate", help="check a dataset against the data-model rules")
    p.add_argument("input", help="manifest or annotation JSON")
    p.add_argument("--check-images", action="store_true")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("augment", help="materialize the offline augmentation grid")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config", help="AugmentationConfig JSON; flags override its fields")
    p.add_argument("--area-threshold", type=float, help="preservation threshold (default 0.9)")
    p.add_argument("--seed", type=int, help=f"online-stage seed (default {DEFAULT_SEED})")
    p.add_argument("--rotations", type=_floats, help=f"degrees (default {','.join(map(str, DEFAULT_ROTATIONS))})")
    p.add_argument("--scales", type=_floats, help=f"factors (default {','.join(map(str, DEFAULT_SCALES))})")
    p.add_argument(
        "--translations", type=_pairs, help="u:v fractions (default " + ",".join(f"{u}:{v}" for u, v in DEFAULT_TRANSLATIONS) + ")"
    )
    p.add_argument("--cartesian", action="store_true", help="combine every rotation with every scale")
    p.add_argument("--fill", choices=("mean-rgb", "constant"))
    p.add_argument("--fill-value", type=_ints, help="R,G,B for --fill constant")
    p.add_argument("--flip-prob", type=float)
    p.add_argument("--blur-prob", type=float)
    p.add_argument("--sigma-range", type=_floats)
    threads(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("split", help="assign train/val/test tags with per-class quotas")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", dest="input")
    src.add_argument("--gt", dest="input", help="annotation JSON")
    p.add_argument("--train", type=float, default=0.6)
    p.add_argument("--val", type=float, default=0.2)
    p.add_argument("--test", type=float, default=0.2)
    p.add_argument("--quota", type=int, default=7)
    p.add_argument("--tolerance", type=int, default=1)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--max-attempts", type=int, default=16)
    p.add_argument("--best-effort", action="store_true")
    p.add_argument("--force", action="store_true", help="overwrite existing split tags")
    p.add_argument("--out", help="split CSV path (default: standard output)")
    p.add_argument("--save", help="write the tagged dataset to this directory")
    threads(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("evaluate", help="COCO-style AP/AR of predictions against ground truth")
    p.add_argument("--gt", required=True, help="manifest or annotation JSON")
    p.add_argument("--pred", required=True)
    p.add_argument("--mode", choices=("binary", "multiclass"), default="multiclass")
    p.add_argument("--iou", choices=("mask", "bbox"), default="mask")
    p.add_argument("--thresholds", choices=tuple(THRESHOLD_SETS), default="coco")
    p.add_argument("--max-dets", type=_ints, default=(1, 10, 100))
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="all")
    p.add_argument("--exclude-other", action="store_true")
    p.add_argument("--label", default="")
    p.add_argument("--out", help="report JSON path (default: standard output)")
    p.add_argument("--csv", help="also write the per-class table as CSV")
    threads(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="generate a synthetic dataset and optional predictions")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=REFERENCE_FRAMES)
    p.add_argument("--instances", type=int, help="exact total instance count")
    p.add_argument("--balanced", action="store_true", help="near-uniform class labels")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--width", type=int, default=540)
    p.add_argument("--height", type=int, default=360)
    p.add_argument("--min-instruments", type=int, default=1)
    p.add_argument("--max-instruments", type=int, default=3)
    p.add_argument("--shape", choices=("capsule", "rotated-rectangle"), default="capsule")
    p.add_argument("--occlusion", action="store_true")
    p.add_argument("--with-images", action="store_true")
    p.add_argument("--predictions", help="also write perturbed predictions to this path")
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--drop", type=float, default=0.0)
    p.add_argument("--spurious", type=float, default=0.0)
    p.add_argument("--class-flip", type=float, default=0.0)
    p.add_argument("--score-noise", type=float, default=0.0)
    p.add_argument("--pred-seed", type=int, help="perturbation seed (default: --seed)")
    threads(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="render evaluation reports as tables")
    p.add_argument("--report", required=True, nargs="+")
    p.add_argument("--bbox-report")
    p.add_argument("--style", choices=("text", "csv"), default="text")
    p.add_argument("--layout", choices=("summary", "per-class"), default="summary")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


DATA_ERRORS = (DatasetIOError, DataError, EvaluationError, SplitError, AugmentationError, MaskError, OSError)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "threads", 1) < 1:
        print("segeval: error: --threads must be at least 1", file=sys.stderr)
        return 2
    func: Callable[..., int] = args.func
    try:
        return func(args)
    except UsageError as exc:
        print(f"segeval {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except DATA_ERRORS as exc:
        print(f"segeval {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
