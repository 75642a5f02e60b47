"""Split-layer ablation: accuracy/FVSR and label-inference outcome per k.

Training is split-invariant, so one fingerprinted model serves every k; what
changes with k is the traffic the eavesdropper sees.

    python3 scripts/split_layer_ablation.py --ks 4 5 6 7 8 10 --seeds 1
"""
import argparse
import csv
import logging

from splitfp import experiments

p = argparse.ArgumentParser()
p.add_argument("--ks", type=int, nargs="+", default=[4, 5, 6, 7, 8, 10])
p.add_argument("--seeds", type=int, nargs="+", default=[1])
p.add_argument("--mode", choices=["oracle", "strict"], default="oracle")
p.add_argument("--out-dir", default="runs/split")
args = p.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

rows = []
for seed in args.seeds:
    run = experiments.pipeline(experiments.mnist_config(seed), args.out_dir)
    for k in args.ks:
        r = experiments.label_inference(run, k, mode=args.mode)
        rows.append({"seed": seed, "k": k, "mode": r.attacker_mode, "label_accuracy": f"{r.label_accuracy:.6f}",
                     "stolen_accuracy": f"{r.stolen_accuracy:.6f}", "stolen_fvsr": f"{r.stolen_fvsr:.6f}"})
        print(rows[-1], flush=True)
with open(f"{args.out_dir}/split_ablation.csv", "w", newline="") as f:
    w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
