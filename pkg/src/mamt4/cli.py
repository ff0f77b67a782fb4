"""Command-line pipeline driver.

Verbs: synth, preprocess, train-unet, train, eval, gradcheck, report.
Exit codes: 0 success, 1 runtime failure, 2 usage error.  All randomness
flows from explicit seeds (flags or config files); outputs are created
under their target directories and never overwritten without --force.
"""

from __future__ import annotations

import argparse
import re
import sys
from dataclasses import replace
from pathlib import Path

from . import data as dat
from . import imaging
from . import training as tr
from .errors import IncompatibleCheckpoint, ParseError
from .experiments import run_gradient_suite
from .models import (
    UNetConfig,
    build_mamt4_state,
    build_single_view_state,
    build_unet_state,
    load_checkpoint,
    save_checkpoint,
)
from .training import TrainConfig


class _UsageError(Exception):
    """Flag-level mistake that argparse cannot express (exit 2)."""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mamt4",
        description="Four-view mammography pipeline: synthesize data, preprocess, "
                    "train, evaluate, self-check.",
    )
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")

    p = sub.add_parser("synth", help="generate a synthetic exam dataset")
    p.add_argument("--scenario", required=True,
                   choices=("single_view", "asymmetry", "artifact"),
                   help="label construction: per-image blob, cross-view asymmetry, "
                        "or corner tags with a faint blob")
    p.add_argument("--exams", required=True, type=int, help="number of 4-view exams (>= 10)")
    p.add_argument("--seed", required=True, type=int, help="generator seed")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("preprocess", help="write a breast-cropped copy of a dataset")
    p.add_argument("--manifest", required=True, help="input manifest.csv")
    p.add_argument("--method", required=True, choices=("threshold", "unet"),
                   help="breast segmentation: intensity threshold or trained segmenter")
    p.add_argument("--unet-ckpt", help="segmenter checkpoint (required for --method unet)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("train-unet", help="train the breast segmenter")
    p.add_argument("--manifest", required=True, help="manifest of a dataset with masks/")
    p.add_argument("--config", required=True, help="key=value training config file")
    p.add_argument("--out", required=True, help="checkpoint path (log written alongside)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("train", help="train the classifier (stage 1 or 2)")
    p.add_argument("--stage", required=True, type=int, choices=(1, 2),
                   help="1: single-view model; 2: fusion head over a frozen backbone")
    p.add_argument("--manifest", required=True, help="dataset manifest.csv")
    p.add_argument("--config", required=True, help="key=value training config file")
    p.add_argument("--backbone", help="stage-1 checkpoint (required for --stage 2)")
    p.add_argument("--out", required=True, help="checkpoint path (log written alongside)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("eval", help="score a checkpoint on a dataset's test split")
    p.add_argument("--mode", required=True, choices=("single", "mamt4"),
                   help="single-view model or four-view fusion model")
    p.add_argument("--ckpt", required=True,
                   help="checkpoint path; with --seeds, a template containing {seed}")
    p.add_argument("--manifest", required=True, help="dataset manifest.csv")
    p.add_argument("--seeds", help="comma list, e.g. \"1,2,3,4,5\": evaluate one "
                                   "checkpoint per seed and print mean ± std")

    sub.add_parser("gradcheck", help="finite-difference check of every op and model")

    p = sub.add_parser("report", help="summarize training logs as mean ± std tables")
    p.add_argument("--logs", required=True, help="directory of .log files; runs grouped "
                                                 "by name with the trailing _s<seed> stripped")
    return parser


# ---------------------------------------------------------------------------
# helpers

def _refuse_overwrite(paths, force: bool) -> None:
    if force:
        return
    for p in paths:
        if Path(p).exists():
            raise FileExistsError(f"refusing to overwrite {p} (pass --force)")


def _read_config(path) -> TrainConfig:
    return tr.parse_train_config(Path(path).read_text(encoding="utf-8"))


def _ckpt_and_log(out) -> tuple:
    out = Path(out)
    return out, out.with_suffix(".log")


# ---------------------------------------------------------------------------
# verbs

def _cmd_synth(args) -> int:
    out = Path(args.out)
    images = out / "images"
    _refuse_overwrite([out / "manifest.csv"], args.force)
    if not args.force and images.exists() and any(images.iterdir()):
        raise FileExistsError(f"refusing to overwrite images under {images} (pass --force)")
    dat.synth_generate(args.exams, args.scenario, args.seed, out)
    print(f"wrote {args.exams} {args.scenario} exams to {out}")
    return 0


def _crop_to_mask(img, mask):
    """Centered square crop around the mask's largest component, resized
    back to the input size; images with no foreground pass through."""
    region = imaging.largest_component(mask)
    if not region.any():
        return img
    cropped = imaging.centered_crop(img, region)
    return imaging.resize_bilinear(cropped, img.shape[0], img.shape[1])


def _cmd_preprocess(args) -> int:
    if args.method == "unet" and not args.unet_ckpt:
        raise _UsageError("--method unet requires --unet-ckpt")
    manifest = Path(args.manifest)
    exams = dat.load_manifest(manifest)
    root = manifest.parent
    out = Path(args.out)
    _refuse_overwrite([out / "manifest.csv"], args.force)

    seg_state = None
    ucfg = UNetConfig.desk()
    if args.method == "unet":
        seg_state = build_unet_state(ucfg, seed=0)
        seg_state.load_arrays(load_checkpoint(args.unet_ckpt))

    count = 0
    for exam in exams:
        for key in dat.VIEW_ORDER:
            if key not in exam.views:
                continue
            rel = exam.views[key]
            img = imaging.read_image(root / rel)
            if args.method == "threshold":
                mask = imaging.threshold_mask(img)
            else:
                mask = tr.predict_mask(seg_state, img, ucfg)
            target = out / rel
            _refuse_overwrite([target], args.force)
            target.parent.mkdir(parents=True, exist_ok=True)
            imaging.write_image(_crop_to_mask(img, mask), target)
            count += 1
    dat.write_manifest(exams, out / "manifest.csv")
    print(f"preprocessed {count} images ({args.method}) to {out}")
    return 0


def _cmd_train_unet(args) -> int:
    cfg = _read_config(args.config)
    ckpt, log = _ckpt_and_log(args.out)
    _refuse_overwrite([ckpt, log], args.force)
    manifest = Path(args.manifest)
    pairs = tr.make_mask_dataset(manifest)
    state, records = tr.train_unet(cfg, pairs, manifest.parent)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, ckpt)
    tr.write_unet_log(records, log)
    best = max(r[2] for r in records)
    print(f"segmenter best IoU {best:.4f} over {len(records)} epochs; saved {ckpt}")
    return 0


def _cmd_train(args) -> int:
    if args.stage == 2 and not args.backbone:
        raise _UsageError("--stage 2 requires --backbone")
    cfg = replace(_read_config(args.config), stage=args.stage)
    ckpt, log = _ckpt_and_log(args.out)
    _refuse_overwrite([ckpt, log], args.force)
    ds = tr.make_dataset(Path(args.manifest), cfg.label_mode)
    if args.stage == 1:
        state, records = tr.train_stage1(cfg, ds)
        mode = "single"
    else:
        state, records = tr.train_stage2(cfg, ds, args.backbone)
        mode = "mamt4"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, ckpt)
    tr.write_log(records, log)
    rep = tr.evaluate(state, ds, mode, cfg)
    print(f"stage {args.stage} done ({len(records)} epochs): "
          f"ROC-AUC {rep.roc_auc:.4f} F1 {rep.f1:.4f}; saved {ckpt}")
    return 0


def _load_eval_state(path, mode: str):
    """Rebuild the model the checkpoint belongs to, trying each preset."""
    arrays = load_checkpoint(path)
    last = None
    for preset in ("desk", "paper"):
        bcfg, mcfg = tr.model_cfgs(preset)
        if mode == "single":
            state = build_single_view_state(bcfg, seed=0)
        else:
            state = build_mamt4_state(bcfg, mcfg, seed=0)
        try:
            state.load_arrays(arrays)
            return state, preset
        except IncompatibleCheckpoint as err:
            last = err
    raise last


def _cmd_eval(args) -> int:
    ds = tr.make_dataset(Path(args.manifest))
    if args.seeds:
        try:
            seeds = [int(s) for s in args.seeds.split(",")]
        except ValueError:
            raise _UsageError(f"--seeds must be a comma list of integers, got {args.seeds!r}")
        if "{seed}" not in args.ckpt:
            raise _UsageError("--seeds needs a --ckpt template containing {seed}")
        paths = [args.ckpt.replace("{seed}", str(s)) for s in seeds]
    else:
        paths = [args.ckpt]
    reports = []
    for path in paths:
        state, preset = _load_eval_state(path, args.mode)
        cfg = TrainConfig(preset=preset)
        reports.append(tr.evaluate(state, ds, args.mode, cfg))
    summary = tr.summarize_reports(reports)
    print(f"ROC-AUC {summary['roc_auc']}")
    print(f"F1 {summary['f1']}")
    print(f"F1-macro {summary['f1_macro']}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_gradient_suite()
    failures = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: max_rel_err={r.max_rel_err:.3e} tol={r.tolerance:.0e}")
        failures += 0 if r.passed else 1
    print(f"{len(results) - failures}/{len(results)} gradient checks passed")
    return 1 if failures else 0


_SEED_SUFFIX = re.compile(r"_s\d+$")


def _cmd_report(args) -> int:
    logdir = Path(args.logs)
    files = sorted(logdir.glob("*.log"))
    if not files:
        raise FileNotFoundError(f"no .log files under {logdir}")
    classifier: dict = {}
    segmenter: dict = {}
    for f in files:
        group = _SEED_SUFFIX.sub("", f.stem)
        try:
            records = tr.read_log(f)
            best = max(records, key=lambda r: r.f1)
            classifier.setdefault(group, []).append(best)
        except ParseError:
            rows = tr.read_unet_log(f)
            segmenter.setdefault(group, []).append(max(r[2] for r in rows))
    if classifier:
        print(f"{'run':24s} {'ROC-AUC':>12s} {'F1':>12s} {'F1-macro':>12s} {'n':>3s}")
        for group, rows in classifier.items():
            print(f"{group:24s} {tr.format_mean_std([r.roc_auc for r in rows]):>12s} "
                  f"{tr.format_mean_std([r.f1 for r in rows]):>12s} "
                  f"{tr.format_mean_std([r.f1_macro for r in rows]):>12s} {len(rows):>3d}")
    if segmenter:
        print(f"{'run':24s} {'IoU':>12s} {'n':>3s}")
        for group, ious in segmenter.items():
            print(f"{group:24s} {tr.format_mean_std(ious):>12s} {len(ious):>3d}")
    return 0


_HANDLERS = {
    "synth": _cmd_synth,
    "preprocess": _cmd_preprocess,
    "train-unet": _cmd_train_unet,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "report": _cmd_report,
}


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _HANDLERS[args.verb](args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))
