"""Label inference at the shallowest and deepest tested split, per seed.

    python3 scripts/label_inference.py --seeds 1 2 3 --ks 4 10
"""
import argparse
import csv
import logging

from splitfp import experiments

p = argparse.ArgumentParser()
p.add_argument("--seeds", type=int, nargs="+", default=[1])
p.add_argument("--ks", type=int, nargs="+", default=[4, 10])
p.add_argument("--mode", choices=["oracle", "strict"], default="oracle")
p.add_argument("--metric", choices=["l2", "cosine"], default="l2")
p.add_argument("--out-dir", default="runs/table1")
args = p.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

rows = []
for seed in args.seeds:
    run = experiments.pipeline(experiments.mnist_config(seed), args.out_dir)
    for k in args.ks:
        r = experiments.label_inference(run, k, args.mode, args.metric)
        rows.append({"seed": seed, "k": k, "attacker_mode": r.attacker_mode,
                     "label_accuracy": f"{r.label_accuracy:.6f}", "stolen_accuracy": f"{r.stolen_accuracy:.6f}",
                     "stolen_fvsr": f"{r.stolen_fvsr:.6f}",
                     "fingerprint_rows_inferred_as_target":
                         f"{r.fingerprint_rows_inferred_as_target}/{r.fingerprint_rows_seen}"})
        print(rows[-1], flush=True)
with open(f"{args.out_dir}/label_inference.csv", "w", newline="") as f:
    w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
