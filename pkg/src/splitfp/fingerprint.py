"""Adversarial-example fingerprints: FGSM generation, selection and injection."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import engine
from .data import Dataset
from .engine import LayerStack
from .wire import load_tensors, save_tensors

DEFAULT_EPSILONS = (0.05, 0.1, 0.2, 0.3)


class FingerprintExhausted(RuntimeError):
    def __init__(self, shortfall: dict):
        self.shortfall = shortfall
        detail = ", ".join(f"class {c}: {n} missing" for c, n in sorted(shortfall.items()))
        super().__init__(f"not enough misclassified adversarial examples ({detail})")


@dataclass
class FingerprintSet:
    examples: np.ndarray        # (n_f, H, W) in [0, 1]
    target_labels: np.ndarray   # the generating model's (wrong) predictions
    ground_truth: np.ndarray
    epsilons: np.ndarray        # epsilon that produced each example
    seed: int
    source_indices: np.ndarray  # rows of the clean dataset the examples came from
    epsilon_schedule: tuple = DEFAULT_EPSILONS
    class_count: int = 10

    def __post_init__(self):
        self.examples = np.asarray(self.examples, dtype=np.float32)
        self.target_labels = np.asarray(self.target_labels, dtype=np.int64)
        self.ground_truth = np.asarray(self.ground_truth, dtype=np.int64)
        self.epsilons = np.asarray(self.epsilons, dtype=np.float64)
        self.source_indices = np.asarray(self.source_indices, dtype=np.int64)
        self.epsilon_schedule = tuple(float(e) for e in self.epsilon_schedule)
        n = len(self.examples)
        if n == 0:
            raise ValueError("a fingerprint set needs at least one example")
        for name in ("target_labels", "ground_truth", "epsilons", "source_indices"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} entries for {n} examples")
        if np.any(self.target_labels == self.ground_truth):
            raise ValueError("every target label must differ from its ground truth")
        if self.examples.min() < 0 or self.examples.max() > 1:
            raise ValueError("fingerprint pixels must lie in [0, 1]")

    def __len__(self):
        return len(self.examples)

    def inputs(self, input_shape) -> np.ndarray:
        return self.examples.reshape((len(self),) + tuple(input_shape))

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_tensors(d / "examples.bin", [self.examples])
        manifest = {
            "n_f": len(self),
            "seed": self.seed,
            "class_count": self.class_count,
            "epsilon_schedule": list(self.epsilon_schedule),
            "epsilons": self.epsilons.tolist(),
            "target_labels": self.target_labels.tolist(),
            "ground_truth": self.ground_truth.tolist(),
            "source_indices": self.source_indices.tolist(),
            "tensor_file": "examples.bin",
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
        return d

    @classmethod
    def load(cls, directory) -> "FingerprintSet":
        d = Path(directory)
        m = json.loads((d / "manifest.json").read_text())
        (examples,) = load_tensors(d / m["tensor_file"])
        return cls(examples, m["target_labels"], m["ground_truth"], m["epsilons"], m["seed"],
                   m["source_indices"], tuple(m["epsilon_schedule"]), m["class_count"])


def fgsm_perturbation(model: LayerStack, x: np.ndarray, y_true, epsilon: float) -> np.ndarray:
    """``epsilon * sign(grad_x loss)`` for a batch ``x`` shaped like the model input."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    x = np.asarray(x, dtype=model.dtype)
    _, grads = engine.loss_and_backward(model, x, np.atleast_1d(y_true), need_input_grad=True)
    return (model.dtype.type(epsilon) * np.sign(grads.input_grad)).astype(x.dtype)


def fgsm(model: LayerStack, x: np.ndarray, y_true, epsilon: float) -> np.ndarray:
    x = np.asarray(x, dtype=model.dtype)
    return np.clip(x + fgsm_perturbation(model, x, y_true, epsilon), 0, 1)


def build_fingerprints(model: LayerStack, ds: Dataset, per_class: int = 10,
                       epsilon_schedule=DEFAULT_EPSILONS, seed: int = 0,
                       chunk: int = 64) -> FingerprintSet:
    """Collect ``per_class`` FGSM examples per class that ``model`` misclassifies.

    Candidates are clean rows the model gets right, visited in a seeded random
    order. Each gets the smallest epsilon of the schedule that changes the
    prediction; the new prediction becomes its target label.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    schedule = sorted(float(e) for e in epsilon_schedule)
    if not schedule or schedule[0] < 0:
        raise ValueError("epsilon schedule must be non-empty and non-negative")
    shape = model.input_shape
    rng = np.random.default_rng(seed)
    found = {"x": [], "t": [], "y": [], "e": [], "i": []}
    shortfall = {}
    for c in range(ds.class_count):
        cand = rng.permutation(np.flatnonzero(ds.labels == c))
        got = 0
        for start in range(0, len(cand), chunk):
            if got == per_class:
                break
            idx = cand[start:start + chunk]
            x = ds.images[idx].reshape((len(idx),) + shape)
            y = ds.labels[idx]
            keep = engine.predict(model, x) == y
            idx, x, y = idx[keep], x[keep], y[keep]
            if not len(idx):
                continue
            pert = fgsm_perturbation(model, x, y, 1.0)  # sign only; rescaled per epsilon
            done = np.zeros(len(idx), dtype=bool)
            adv_at = [None] * len(idx)
            for eps in schedule:
                adv = np.clip(x + np.float32(eps) * pert, 0, 1).astype(np.float32)
                pred = engine.predict(model, adv)
                for j in np.flatnonzero(~done & (pred != y)):
                    done[j] = True
                    adv_at[j] = (adv[j], int(pred[j]), eps)
            for j in range(len(idx)):
                if got == per_class:
                    break
                if adv_at[j] is None:
                    continue
                a, p, eps = adv_at[j]
                found["x"].append(a.reshape(ds.image_shape))
                found["t"].append(p)
                found["y"].append(int(y[j]))
                found["e"].append(eps)
                found["i"].append(int(idx[j]))
                got += 1
        if got < per_class:
            shortfall[c] = per_class - got
    if shortfall:
        raise FingerprintExhausted(shortfall)
    fp = FingerprintSet(np.stack(found["x"]), found["t"], found["y"], found["e"], seed,
                        found["i"], tuple(schedule), ds.class_count)
    pred = engine.predict(model, fp.inputs(shape))
    assert np.array_equal(pred, fp.target_labels), "selected fingerprint no longer misclassified"
    return fp


def inject(ds: Dataset, fp: FingerprintSet) -> Dataset:
    """Append fingerprints (with their target labels) after the clean rows."""
    if fp.examples.shape[1:] != ds.image_shape:
        raise ValueError(f"fingerprint shape {fp.examples.shape[1:]} does not match dataset {ds.image_shape}")
    if fp.class_count != ds.class_count or fp.target_labels.max() >= ds.class_count:
        raise ValueError("fingerprint classes do not match the dataset")
    return Dataset(np.concatenate([ds.images, fp.examples]).astype(np.float32),
                   np.concatenate([ds.labels, fp.target_labels]), ds.class_count)


def injection_rate(n_clean: int, n_f: int) -> float:
    return n_f / (n_clean + n_f)


def format_rate(rate: float) -> str:
    return f"{100 * rate:.3f}%"
