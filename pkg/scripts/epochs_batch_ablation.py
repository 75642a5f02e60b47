"""Epoch and batch-size ablation of the MNIST run (one row per cell).

    python3 scripts/epochs_batch_ablation.py --epochs 4 8 16 --batches 32 64 128
"""
import argparse
import logging

from splitfp import experiments, trainer

p = argparse.ArgumentParser()
p.add_argument("--epochs", type=int, nargs="+", default=[4, 8, 16])
p.add_argument("--batches", type=int, nargs="+", default=[64])
p.add_argument("--seed", type=int, default=1)
p.add_argument("--out-dir", default="runs/ablation")
args = p.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

rows = []
for epochs in args.epochs:
    for batch in args.batches:
        run = experiments.pipeline(experiments.mnist_config(args.seed, epochs=epochs, batch=batch), args.out_dir)
        rows.append(run.train().row())
        print(rows[-1], flush=True)
trainer.write_csv(f"{args.out_dir}/epochs_batch.csv", rows)
