#!/usr/bin/env python3
"""Run the desk-scale benchmark protocols and print their numbers.

Datasets, checkpoints, and logs land under --out; rerunning reuses any
dataset already generated there.  Expect roughly 45 minutes for the full
set on one CPU core; --only picks a subset.
"""

import argparse
import sys
from pathlib import Path

from mamt4 import experiments as ex


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="results", help="working directory")
    parser.add_argument("--only", nargs="*", metavar="NAME",
                        choices=("gradients", "single_view", "multi_view", "crop", "unet"),
                        help="subset of benchmarks to run")
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    picked = set(args.only or ("gradients", "single_view", "multi_view", "crop", "unet"))

    if "gradients" in picked:
        results = ex.run_gradient_suite()
        fails = [r for r in results if not r.passed]
        worst = max(r.max_rel_err / r.tolerance for r in results)
        print(f"gradients: {len(results) - len(fails)}/{len(results)} passed, "
              f"worst err/tol {worst:.2e}")
        for r in fails:
            print(f"  FAIL {r.name}: {r.max_rel_err:.3e} (tol {r.tolerance:.0e})")

    if "single_view" in picked:
        r = ex.single_view_benchmark(out)
        print(f"single_view: ROC-AUC {r.roc_auc:.3f} F1 {r.f1:.3f} "
              f"in {r.epochs} epochs ({r.seconds:.0f}s)")

    if "multi_view" in picked:
        r = ex.multi_view_gain(out)
        print(f"multi_view: stage1 {r.mean_stage1:.3f} -> stage2 {r.mean_stage2:.3f} "
              f"(gain {r.mean_gain:+.3f}, backbone frozen: {r.backbone_identical}, "
              f"{r.seconds:.0f}s)")
        print(f"  stage1 per seed: {[round(a, 3) for a in r.stage1_aucs]}")
        print(f"  stage2 per seed: {[round(a, 3) for a in r.stage2_aucs]}")

    if "crop" in picked:
        r = ex.crop_gain(out)
        print(f"crop: with {r.mean_crop:.3f} vs without {r.mean_nocrop:.3f} "
              f"(gain {r.mean_gain:+.3f}, {r.seconds:.0f}s)")

    if "unet" in picked:
        r = ex.unet_benchmark(out)
        print(f"unet: best IoU {r.best_iou:.4f} in {r.epochs} epochs ({r.seconds:.0f}s)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
