"""Pretrain variant d on the synthetic suite, then compare pass@2 on held-out
tasks before and after test-time training."""

import argparse
import csv
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from rolesep.experiments import ExperimentConfig, heldout_suite, pretrain, run_ttt_efficacy
from rolesep.train import TTTStrategy


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=ExperimentConfig.steps)
    ap.add_argument("--tasks", type=int, default=20)
    ap.add_argument("--ttt", type=int, choices=[1, 2, 3], default=2)
    ap.add_argument("--variant", default="d")
    ap.add_argument("--out", default="runs/ttt")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    exp = replace(ExperimentConfig(), steps=args.steps)
    models = {s: pretrain(args.variant, s, exp)[0] for s in args.seeds}
    res = run_ttt_efficacy(models, heldout_suite(args.tasks), TTTStrategy.named(args.ttt), exp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ttt_efficacy.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "pre_pass_at_2", "post_pass_at_2", "mean_ttt_epochs"])
        for s, a, b, ep in zip(args.seeds, res.pre, res.post, res.epochs):
            w.writerow([s, f"{a:.4f}", f"{b:.4f}", f"{np.mean(ep):.1f}"])
    print(f"pre {np.mean(res.pre):.3f} -> post {np.mean(res.post):.3f}")


if __name__ == "__main__":
    main()
