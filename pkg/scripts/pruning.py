"""Pruning sweep on the fingerprinted MNIST model: accuracy and FVSR per rate.

    python3 scripts/pruning.py --seeds 1 2 3
"""
import argparse
import csv
import logging

from splitfp import experiments

p = argparse.ArgumentParser()
p.add_argument("--seeds", type=int, nargs="+", default=[1])
p.add_argument("--rates", type=float, nargs="+", default=[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
p.add_argument("--out-dir", default="runs/table1")
args = p.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

rows = []
for seed in args.seeds:
    run = experiments.pipeline(experiments.mnist_config(seed), args.out_dir)
    for rate, acc, fvsr in experiments.pruning(run, args.rates):
        rows.append({"seed": seed, "rate": f"{rate:.2f}", "accuracy": f"{acc:.6f}", "fvsr": f"{fvsr:.6f}"})
        print(rows[-1], flush=True)
with open(f"{args.out_dir}/pruning.csv", "w", newline="") as f:
    w = csv.DictWriter(f, fieldnames=["seed", "rate", "accuracy", "fvsr"], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
