"""Sensitivity of the fused result to the patch scale and the gate bias.

    python scripts/run_sweep.py --seed 0 --epochs 200
"""
import argparse
from pathlib import Path

from adapterfuse.harness import build_scenario, desk_config
from adapterfuse.pipeline import sweep, sweep_csv


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--scenario", default="single-source")
    ap.add_argument("--alphas", default="0.05,0.3,0.9")
    ap.add_argument("--mu-gates", default="-0.1,0.1")
    ap.add_argument("--out", default="results/sweep.csv")
    args = ap.parse_args()

    cfg = desk_config(epochs=args.epochs)
    scen = build_scenario(args.scenario, args.seed, replay_per_task=cfg.data.replay_per_task,
                          batch_size=cfg.data.batch_size)
    rows = sweep(cfg, "alpha_init", [float(v) for v in args.alphas.split(",")], scenario=scen)
    rows += sweep(cfg, "mu_gate", [float(v) for v in args.mu_gates.split(",")], scenario=scen)
    text = sweep_csv(rows)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(text)
    print(text, end="")


if __name__ == "__main__":
    main()
