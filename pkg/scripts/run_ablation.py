"""Baseline vs DSC vs Full on synthetic figures.

Trains each variant on the synthetic split, reports held-out SSIM / mask-SSIM,
and the one-sample overfitting loss, for several seeds.

    python3 scripts/run_ablation.py --seeds 0 1 2 --iters 2000 --out ablation.json
"""
import argparse
import json
import statistics
import time

from deformwarp.ablation import AblationConfig, heldout_mask_ssim, overfit_recon


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--variants", nargs="+", default=["baseline", "full"])
    ap.add_argument("--overfit-variants", nargs="+", default=["baseline", "dsc"])
    ap.add_argument("--iters", type=int, default=AblationConfig.iterations)
    ap.add_argument("--overfit-iters", type=int, default=AblationConfig.overfit_iterations)
    ap.add_argument("--train-pairs", type=int, default=AblationConfig.train_pairs)
    ap.add_argument("--out", help="write all numbers as JSON")
    args = ap.parse_args()

    cfg = AblationConfig(iterations=args.iters, overfit_iterations=args.overfit_iters, train_pairs=args.train_pairs)
    start = time.perf_counter()
    results = {"config": cfg.__dict__, "heldout": {}, "overfit": {}}
    for variant in args.variants:
        results["heldout"][variant] = [heldout_mask_ssim(variant, s, cfg, log=print) for s in args.seeds]
    for variant in args.overfit_variants:
        results["overfit"][variant] = [overfit_recon(variant, s, cfg, log=print) for s in args.seeds]
    results["seconds"] = time.perf_counter() - start

    print("\nmedian over seeds")
    for variant, rows in results["heldout"].items():
        print(f"  {variant:9s} mask-SSIM {statistics.median(r['mask_ssim'] for r in rows):.4f}"
              f"  SSIM {statistics.median(r['ssim'] for r in rows):.4f}")
    for variant, vals in results["overfit"].items():
        print(f"  {variant:9s} overfit L1 {statistics.median(vals):.2f}")
    print(f"total {results['seconds']:.0f}s")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
