"""Training of original and fingerprinted split models, verification, metrics."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import engine
from .data import BatchPlan, Dataset, batches
from .engine import LayerStack, ModelSpec
from .fingerprint import FingerprintSet, inject
from .protocol import SplitSession, Topology
from .wire import load_tensors, save_tensors

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 16
    batch_size: int = 64
    lr: float = 0.01
    split_index: int = 8
    topology: str = "b"
    seed: int = 0
    transport: str = "inproc"

    def validate(self, layer_count: int | None = None) -> "TrainConfig":
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if layer_count is not None and not 0 < self.split_index < layer_count:
            raise ValueError(f"split_index must be in (0, {layer_count}), got {self.split_index}")
        Topology.parse(self.topology)
        return self


def run_split_training(stack: LayerStack, ds: Dataset, cfg: TrainConfig, tap=None,
                       on_epoch=None) -> SplitSession:
    """Train ``stack`` in place through a split session; returns the (closed) session."""
    cfg.validate(len(stack))
    session = SplitSession.create(stack, cfg.split_index, cfg.topology, cfg.lr, cfg.transport, tap)
    try:
        for epoch in range(cfg.epochs):
            plan = BatchPlan.for_epoch(len(ds), cfg.batch_size, cfg.seed, epoch)
            losses = [session.train_batch(x, y) for x, y in batches(ds, plan, stack.input_shape)]
            session.end_epoch()
            log.info("epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, float(np.mean(losses)))
            if on_epoch is not None:
                on_epoch(epoch, session)
    finally:
        session.close()
    return session


def train_monolithic(stack: LayerStack, ds: Dataset, cfg: TrainConfig) -> LayerStack:
    """Same schedule as ``run_split_training`` on the unsplit stack (reference path)."""
    cfg.validate()
    for epoch in range(cfg.epochs):
        plan = BatchPlan.for_epoch(len(ds), cfg.batch_size, cfg.seed, epoch)
        for x, y in batches(ds, plan, stack.input_shape):
            _, grads = engine.loss_and_backward(stack, x, y, need_input_grad=False)
            engine.sgd_step(stack, grads, cfg.lr)
    return stack


def train_original(ds: Dataset, cfg: TrainConfig, spec: ModelSpec, tap=None) -> SplitSession:
    stack = engine.init_stack(spec, cfg.seed)
    return run_split_training(stack, ds, cfg, tap)


def train_fingerprinted(ds: Dataset, fp: FingerprintSet, cfg: TrainConfig, spec: ModelSpec,
                        tap=None) -> SplitSession:
    """Fresh initialisation, trained on the clean rows plus the fingerprints."""
    stack = engine.init_stack(spec, cfg.seed)
    return run_split_training(stack, inject(ds, fp), cfg, tap)


def as_stack(model) -> LayerStack:
    return model.full_stack() if isinstance(model, SplitSession) else model


# --------------------------------------------------------------------------
# verification and metrics


@dataclass
class VerificationResult:
    n_s: int
    n_f: int
    per_example: list = field(default_factory=list)  # (index, predicted, target, ground_truth)

    @property
    def fvsr(self) -> float:
        return self.n_s / self.n_f


def verify(model, fp: FingerprintSet) -> VerificationResult:
    """Count fingerprints predicted as their target labels."""
    stack = as_stack(model)
    if stack.output_shape() != (fp.class_count,):
        raise ValueError(f"model outputs {stack.output_shape()}, fingerprints have {fp.class_count} classes")
    pred = engine.predict(stack, fp.inputs(stack.input_shape))
    rows = [(i, int(p), int(t), int(g))
            for i, (p, t, g) in enumerate(zip(pred, fp.target_labels, fp.ground_truth))]
    return VerificationResult(int(np.sum(pred == fp.target_labels)), len(fp), rows)


def test_accuracy(model, ds: Dataset) -> float:
    stack = as_stack(model)
    return engine.accuracy(stack, ds.inputs(stack.input_shape), ds.labels)


test_accuracy.__test__ = False


@dataclass
class ExperimentReport:
    acc_o: float
    acc_f: float
    fvsr: float
    n_s: int
    n_f: int
    dataset: str = ""
    k: int = 0
    epochs: int = 0
    batch: int = 0
    lr: float = 0.0
    seed: int = 0
    injection_rate: float = 0.0

    @property
    def accdrop(self) -> float:
        return self.acc_o - self.acc_f

    def row(self) -> dict:
        return {
            "dataset": self.dataset, "k": self.k, "epochs": self.epochs, "batch": self.batch,
            "acc_o": f"{self.acc_o:.6f}", "acc_f": f"{self.acc_f:.6f}",
            "accdrop": f"{self.accdrop:.6f}", "fvsr": f"{self.fvsr:.6f}", "seed": self.seed,
        }

    def to_json(self) -> dict:
        d = asdict(self)
        d["accdrop"] = self.accdrop
        return d


CSV_COLUMNS = ["dataset", "k", "epochs", "batch", "acc_o", "acc_f", "accdrop", "fvsr", "seed"]


def metrics(original, fingerprinted, test_ds: Dataset, fp: FingerprintSet, **meta) -> ExperimentReport:
    res = verify(fingerprinted, fp)
    return ExperimentReport(test_accuracy(original, test_ds), test_accuracy(fingerprinted, test_ds),
                            res.fvsr, res.n_s, res.n_f, **meta)


def write_csv(path, rows, columns=CSV_COLUMNS) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(stack: LayerStack, directory, split_index: int | None = None, epoch: int | None = None,
                    **extra) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_tensors(d / "params.bin", stack.params)
    manifest = {"spec": stack.spec().to_dict(), "seed": stack.rng_seed, "split_index": split_index,
                "epoch": epoch, "param_file": "params.bin", **extra}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return d


def load_checkpoint(directory) -> tuple[LayerStack, dict]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    stack = engine.init_stack(ModelSpec.from_dict(manifest["spec"]), manifest["seed"])
    params = load_tensors(d / manifest["param_file"])
    if len(params) != len(stack.params):
        raise ValueError(f"checkpoint has {len(params)} tensors, model needs {len(stack.params)}")
    for p, v in zip(stack.params, params):
        if p.shape != v.shape:
            raise ValueError(f"checkpoint tensor {v.shape} does not fit parameter {p.shape}")
        p[...] = v
    return stack, manifest
