"""MNIST Table-1-style run: Acc_o, Acc_f, AccDrop, FVSR per seed.

    python3 scripts/table1.py --seeds 1 2 3 --out-dir runs/table1
"""
import argparse
import logging

import numpy as np

from splitfp import experiments, trainer
from splitfp.fingerprint import format_rate

p = argparse.ArgumentParser()
p.add_argument("--seeds", type=int, nargs="+", default=[1])
p.add_argument("--out-dir", default="runs/table1")
args = p.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

rows = []
for seed in args.seeds:
    run = experiments.pipeline(experiments.mnist_config(seed), args.out_dir)
    r = run.train()
    rows.append(r.row())
    print(f"seed {seed}: acc_o={100 * r.acc_o:.2f}% acc_f={100 * r.acc_f:.2f}% "
          f"accdrop={100 * r.accdrop:.2f} fvsr={100 * r.fvsr:.0f}% injection {format_rate(r.injection_rate)}")
trainer.write_csv(f"{args.out_dir}/table1.csv", rows)
fvsr = [float(r["fvsr"]) for r in rows]
print(f"mean fvsr {np.mean(fvsr):.3f} over {len(rows)} seed(s) -> {args.out_dir}/table1.csv")
