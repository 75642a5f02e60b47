"""Experiment building blocks shared by ``scripts/`` and the acceptance suite.

Runs live in directories (see ``cli.Run``), so a finished run is reused when
the same config is pointed at the same directory again.
"""
from __future__ import annotations

import dataclasses
import logging
from pathlib import Path

import numpy as np

from . import attacks, trainer
from .cli import Run, train_config
from .config import RunConfig
from .fingerprint import inject
from .protocol import TranscriptRecorder

log = logging.getLogger(__name__)


def mnist_config(seed: int = 1, **changes) -> RunConfig:
    """The desk-scale MNIST reference config (same as ``configs/mnist.toml``)."""
    return RunConfig(seed=seed).replace(**changes) if changes else RunConfig(seed=seed).validate()


def run_dir(root, cfg: RunConfig) -> Path:
    return Path(root) / f"{cfg.dataset}-k{cfg.k}-e{cfg.epochs}-b{cfg.batch}-s{cfg.seed}-{cfg.digest()[:8]}"


def pipeline(cfg: RunConfig, root) -> Run:
    """Original model, fingerprints and fingerprinted model for ``cfg`` (cached under ``root``)."""
    run = Run(cfg, run_dir(root, cfg))
    run.train()
    return run


def intercept(run: Run, k: int, epochs: int = 1) -> attacks.InterceptLog:
    """Eavesdrop on the first ``epochs`` epochs of the run's fingerprinted training, split at ``k``.

    Training is deterministic and split-invariant, so these epochs carry
    exactly the traffic the full run would have produced at split ``k``.
    """
    train, _ = run.datasets
    fp = run.fingerprint()
    spec = run.spec
    cfg = dataclasses.replace(train_config(run.cfg), epochs=epochs, split_index=k)
    tap = TranscriptRecorder(max_epochs=epochs)
    trainer.train_fingerprinted(train, fp, cfg, spec, tap=tap)
    return attacks.InterceptLog.from_messages(tap.messages, cfg.topology, spec, k, max_epochs=epochs)


def label_inference(run: Run, k: int, mode: str = "oracle", metric: str = "l2",
                    rates=()) -> attacks.AttackReport:
    """Intercept at split ``k``, infer labels, steal a model and verify it."""
    train, test = run.datasets
    fp = run.fingerprint()
    lg = intercept(run, k, run.cfg.attack.tap_epochs)
    a = run.cfg.attack
    acfg = attacks.AttackConfig(mode=mode, metric=metric, seed=run.cfg.seed + a.seed_offset,
                                epochs=a.epochs or run.cfg.epochs, batch_size=run.cfg.batch,
                                lr=a.lr or run.cfg.lr, rates=tuple(rates))
    victim_cfg = dataclasses.replace(train_config(run.cfg), split_index=k)
    return attacks.run_attack_suite(run.fingerprinted(), lg, inject(train, fp), victim_cfg, test, fp,
                                    acfg, n_clean=len(train))


def pruning(run: Run, rates=(0.1, 0.3, 0.5, 0.7)):
    _, test = run.datasets
    return attacks.pruning_curve(run.fingerprinted(), test, run.fingerprint(), rates)


def control_fvsr(run: Run, control: Run) -> float:
    """FVSR of another run's clean original model on ``run``'s fingerprints."""
    return trainer.verify(control.original(), run.fingerprint()).fvsr


def non_increasing_within(values, slack: float) -> bool:
    v = np.asarray(values, dtype=float)
    return bool(np.all(np.diff(v) <= slack))
