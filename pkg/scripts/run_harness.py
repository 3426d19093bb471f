"""Run every harness preset over a few seeds and summarize fused vs baselines.

    python scripts/run_harness.py --seeds 0,1,2,3,4 --epochs 600 --out results/
"""
import argparse
import statistics
import time
from pathlib import Path

from adapterfuse.harness import PRESETS, desk_config, metrics_csv, run_preset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--epochs", type=int, default=600)
    ap.add_argument("--presets", default=",".join(PRESETS))
    ap.add_argument("--oracle", action="store_true", help="also train the joint-data reference adapter")
    ap.add_argument("--out", default="results")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in args.seeds.split(",")]
    cfg = desk_config(epochs=args.epochs)
    for preset in args.presets.split(","):
        t0 = time.time()
        rows = run_preset(preset, seeds, cfg, with_oracle=args.oracle)
        (out / f"{preset}.csv").write_text(metrics_csv(rows))
        print(f"{preset} ({time.time() - t0:.0f}s)")
        for variant in dict.fromkeys(r["variant"] for r in rows):
            fused = [r["fused_eval"] for r in rows if r["variant"] == variant]
            base = [r["target_only_eval"] for r in rows if r["variant"] == variant]
            print(f"  {variant:>10}: median fused {statistics.median(fused):.4g}  target-only {statistics.median(base):.4g}")


if __name__ == "__main__":
    main()
