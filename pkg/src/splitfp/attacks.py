"""Adversaries against a fingerprinted split model.

Label inference: an eavesdropper that sees only the split-layer traffic
(smashed data out, gradients back) and knows the architecture guesses each
row's label by trying every class on a surrogate server head and keeping the
class whose split-layer gradient is closest to the intercepted one. The
guessed labels then train a stolen model.

Pruning: global magnitude pruning of weights, no fine-tuning.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import engine
from .data import BatchPlan, Dataset
from .engine import LayerStack, ModelSpec
from .fingerprint import FingerprintSet
from .protocol import Topology
from .trainer import TrainConfig, train_monolithic, verify
from .wire import MsgType, read_transcript

log = logging.getLogger(__name__)

PRUNING_RATES = (0.1, 0.3, 0.5, 0.7)


@dataclass
class InterceptRecord:
    batch_index: int
    epoch: int
    smashed: np.ndarray
    grad: np.ndarray


@dataclass
class InterceptLog:
    records: list
    architecture: ModelSpec  # full model structure, no parameters
    split_index: int

    def __len__(self):
        return len(self.records)

    def head_spec(self) -> ModelSpec:
        return self.architecture.slice(self.split_index)

    @classmethod
    def from_messages(cls, messages, topology, architecture: ModelSpec, split_index: int,
                      max_epochs: int | None = None) -> "InterceptLog":
        """Pair each outgoing SMASHED frame with the split-layer GRAD of its batch."""
        topology = Topology.parse(topology)
        pattern = {
            Topology.A: (MsgType.SMASHED, MsgType.LABELS, MsgType.GRAD, MsgType.LOSS),
            Topology.B: (MsgType.SMASHED, MsgType.GRAD),
            Topology.C: (MsgType.SMASHED, MsgType.SMASHED, MsgType.GRAD, MsgType.GRAD),
        }[topology]
        split_shape = architecture.shapes()[split_index]
        records, pending, epoch, batch = [], [], 0, 0
        for msg in messages:
            if msg.msg_type == MsgType.END_EPOCH:
                if pending:
                    raise ValueError("transcript epoch ends mid-batch")
                epoch += 1
                if max_epochs is not None and epoch >= max_epochs:
                    break
                continue
            pending.append(msg)
            if tuple(m.msg_type for m in pending) != pattern[:len(pending)]:
                raise ValueError(f"transcript does not follow topology {topology.value}: "
                                 f"{[m.msg_type.name for m in pending]}")
            if len(pending) == len(pattern):
                smashed = pending[0].tensor
                grad = pending[pattern.index(MsgType.GRAD) if topology != Topology.C else 3].tensor
                if smashed.shape[1:] != split_shape or grad.shape != smashed.shape:
                    raise ValueError(f"record {batch}: tensors {smashed.shape}/{grad.shape} "
                                     f"do not match split shape {split_shape}")
                records.append(InterceptRecord(batch, epoch, smashed, grad))
                pending, batch = [], batch + 1
        return cls(records, architecture, split_index)

    @classmethod
    def from_transcript(cls, path, topology, architecture, split_index, max_epochs=None):
        return cls.from_messages(read_transcript(path), topology, architecture, split_index, max_epochs)


def candidate_gradients(head: LayerStack, smashed: np.ndarray, class_count: int) -> np.ndarray:
    """Split-layer gradient of the mean loss for every candidate label, shape (C, B, ...)."""
    scores = engine.forward(head, smashed)
    n = len(smashed)
    out = []
    for c in range(class_count):
        _, dlogits = engine.head_loss(head, scores, np.full(n, c))
        out.append(engine.backward_from_loss(head, dlogits, need_input_grad=True).input_grad)
    return np.stack(out)


def infer_labels(log_: InterceptLog, class_count: int, seed: int = 0, metric: str = "l2") -> list:
    """Per record, the label whose surrogate gradient is nearest the intercepted one.

    The surrogate head is freshly initialised from the known architecture;
    ties go to the lowest class.
    """
    if not len(log_):
        raise ValueError("intercept log is empty")
    if metric not in ("l2", "cosine"):
        raise ValueError(f"unknown metric {metric!r}")
    head = engine.init_stack(log_.head_spec(), seed)
    out = []
    for rec in log_.records:
        cand = candidate_gradients(head, rec.smashed, class_count)
        cand = cand.reshape(class_count, len(rec.smashed), -1).astype(np.float64)
        g = rec.grad.reshape(len(rec.smashed), -1).astype(np.float64)
        if metric == "l2":
            score = ((cand - g[None]) ** 2).sum(axis=2)
        else:
            num = (cand * g[None]).sum(axis=2)
            den = np.linalg.norm(cand, axis=2) * np.linalg.norm(g, axis=1)[None] + 1e-30
            score = -num / den
        out.append(np.argmin(score, axis=0).astype(np.int64))
    return out


def replay_stream(ds: Dataset, cfg: TrainConfig, n_batches: int):
    """Regenerate the victim's first ``n_batches`` batch index arrays (its data order)."""
    out, epoch = [], 0
    while len(out) < n_batches:
        plan = BatchPlan.for_epoch(len(ds), cfg.batch_size, cfg.seed, epoch)
        for idx in plan.index_batches():
            out.append(idx)
            if len(out) == n_batches:
                break
        epoch += 1
    return out


def steal_model(log_: InterceptLog, inferred, inputs, cfg: TrainConfig,
                mode: str = "oracle") -> LayerStack:
    """Train a surrogate from scratch on the attacker's inputs and inferred labels.

    ``oracle`` mode: ``inputs`` are the raw rows behind each record and the
    surrogate is the full architecture. ``strict`` mode: inputs are ignored,
    the smashed data itself trains a head-only surrogate.
    """
    y = np.concatenate(inferred)
    if mode == "oracle":
        spec = log_.architecture
        x = np.concatenate([np.asarray(i) for i in inputs])
    elif mode == "strict":
        spec = log_.head_spec()
        x = np.concatenate([r.smashed for r in log_.records])
    else:
        raise ValueError(f"unknown attacker mode {mode!r}")
    if len(x) != len(y):
        raise ValueError(f"{len(x)} attacker inputs for {len(y)} inferred labels")
    classes = spec.shapes()[-1][0]
    flat = x.reshape(len(x), 1, -1) if x.ndim != 3 else x
    train = Dataset(flat.astype(np.float32), y, classes)
    stack = engine.init_stack(spec, cfg.seed)
    return train_monolithic(stack, train, cfg)


def prune(stack: LayerStack, rate: float) -> LayerStack:
    """Zero the ``rate`` fraction of smallest-magnitude weights globally (biases kept)."""
    if not 0 <= rate < 1:
        raise ValueError(f"pruning rate must be in [0, 1), got {rate}")
    out = stack.copy()
    weights = [layer.params[0] for layer in out.layers if layer.params]
    if not weights:
        return out
    flat = np.concatenate([np.abs(w).ravel() for w in weights])
    n_prune = int(round(rate * len(flat)))
    if n_prune == 0:
        return out
    mask = np.ones(len(flat), dtype=bool)
    mask[np.argsort(flat, kind="stable")[:n_prune]] = False
    off = 0
    for w in weights:
        m = mask[off:off + w.size].reshape(w.shape)
        w *= m
        off += w.size
    return out


def prunable_count(stack: LayerStack) -> int:
    return sum(layer.params[0].size for layer in stack.layers if layer.params)


# --------------------------------------------------------------------------
# suite


@dataclass
class AttackConfig:
    mode: str = "oracle"
    metric: str = "l2"
    seed: int = 1000
    epochs: int = 16
    batch_size: int = 64
    lr: float = 0.01
    rates: tuple = PRUNING_RATES

    def steal_cfg(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, seed=self.seed)


@dataclass
class AttackReport:
    label_accuracy: float
    stolen_accuracy: float
    stolen_fvsr: float
    pruning_curve: list = field(default_factory=list)  # (rate, accuracy, fvsr)
    attacker_mode: str = "oracle"
    split_index: int = 0
    records: int = 0
    fingerprint_rows_seen: int = 0
    fingerprint_rows_inferred_as_target: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "attack_report.json").write_text(json.dumps(self.to_json(), indent=1))
        with open(out / "pruning_curve.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["rate", "accuracy", "fvsr"])
            for rate, acc, fvsr in self.pruning_curve:
                w.writerow([f"{rate:.2f}", f"{acc:.6f}", f"{fvsr:.6f}"])
        with open(out / "label_inference.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["attacker_mode", "split_index", "records", "label_accuracy",
                        "stolen_accuracy", "stolen_fvsr", "fingerprint_rows_seen",
                        "fingerprint_rows_inferred_as_target"])
            w.writerow([self.attacker_mode, self.split_index, self.records, f"{self.label_accuracy:.6f}",
                        f"{self.stolen_accuracy:.6f}", f"{self.stolen_fvsr:.6f}",
                        self.fingerprint_rows_seen, self.fingerprint_rows_inferred_as_target])


def pruning_curve(stack: LayerStack, test_ds: Dataset, fp: FingerprintSet, rates=PRUNING_RATES):
    rows = []
    for rate in rates:
        pruned = prune(stack, rate)
        acc = engine.accuracy(pruned, test_ds.inputs(pruned.input_shape), test_ds.labels)
        rows.append((float(rate), acc, verify(pruned, fp).fvsr))
    return rows


def run_attack_suite(victim: LayerStack, log_: InterceptLog, train_ds: Dataset, victim_cfg: TrainConfig,
                     test_ds: Dataset, fp: FingerprintSet, cfg: AttackConfig,
                     n_clean: int | None = None) -> AttackReport:
    """Infer labels, steal, verify fingerprints on the stolen model, sweep pruning.

    ``train_ds`` is the victim's (fingerprint-injected) training set. It is used
    to score the inferred labels and, in oracle mode, as the attacker's inputs.
    ``n_clean`` marks where fingerprint rows start in ``train_ds``.
    """
    classes = train_ds.class_count
    inferred = infer_labels(log_, classes, cfg.seed, cfg.metric)
    stream = replay_stream(train_ds, victim_cfg, len(log_))
    for rec, idx in zip(log_.records, stream):
        if len(idx) != len(rec.smashed):
            raise ValueError("intercept log does not line up with the victim's batch order")
    truth = np.concatenate([train_ds.labels[i] for i in stream])
    guess = np.concatenate(inferred)
    label_acc = float(np.mean(truth == guess))
    seen = as_target = 0
    if n_clean is not None:
        all_idx = np.concatenate(stream)
        fp_rows = all_idx >= n_clean
        seen = int(fp_rows.sum())
        as_target = int(np.sum(guess[fp_rows] == truth[fp_rows]))
    inputs = [train_ds.images[i] for i in stream]
    stolen = steal_model(log_, inferred, inputs, cfg.steal_cfg(), cfg.mode)
    if cfg.mode == "strict":
        client, _ = victim.split(log_.split_index)
        stolen = client + stolen
    stolen_acc = engine.accuracy(stolen, test_ds.inputs(stolen.input_shape), test_ds.labels)
    report = AttackReport(label_acc, stolen_acc, verify(stolen, fp).fvsr,
                          pruning_curve(victim, test_ds, fp, cfg.rates), cfg.mode,
                          log_.split_index, len(log_), seen, as_target)
    log.info("attack k=%d mode=%s label_acc=%.4f stolen_acc=%.4f stolen_fvsr=%.3f",
             log_.split_index, cfg.mode, label_acc, stolen_acc, report.stolen_fvsr)
    return report
