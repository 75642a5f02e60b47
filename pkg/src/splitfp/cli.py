"""Command-line front end.

    splitfp prepare     export a dataset (MNIST IDX or synthetic blobs) to --out-dir
    splitfp fingerprint train the original model and build its fingerprint set
    splitfp train       train the fingerprinted split model, write report.csv/json
    splitfp verify      FVSR of a model on a fingerprint set, with ownership decision
    splitfp attack      label inference + stealing + pruning on a finished run
    splitfp sweep       one full run per value of k, epochs or batch

Every command writes into --out-dir and updates ``manifest.json`` there.
Exit code 0 iff all requested stages succeed; 2 for config errors; 1 for a
failed stage, whose name is printed on stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attacks, data, models, trainer
from .config import ConfigError, RunConfig
from . import config as config_mod
from .data import Dataset
from .fingerprint import FingerprintSet, build_fingerprints, format_rate, inject, injection_rate
from .protocol import TranscriptWriter
from .wire import load_tensors, save_tensors

log = logging.getLogger("splitfp")

MANIFEST = "manifest.json"


class StageError(RuntimeError):
    def __init__(self, stage: str, msg: str):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {msg}")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def sha256_dataset(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.images).tobytes())
    h.update(ds.labels.astype("<i8").tobytes())
    return h.hexdigest()


def sha256_dir(path) -> str:
    """Hash of every file under ``path`` (names and contents, sorted)."""
    h = hashlib.sha256()
    root = Path(path)
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(sha256_file(p).encode())
    return h.hexdigest()


def training_key(config: dict) -> dict:
    """The part of a config that determines the trained artifacts."""
    key = {k: v for k, v in config.items() if k not in ("attack", "threshold", "sweep")}
    key["tap_epochs"] = config.get("attack", {}).get("tap_epochs")
    return key


@dataclass
class RunManifest:
    config: dict
    seed: int
    artifacts: dict = field(default_factory=dict)  # name -> path relative to the run dir
    hashes: dict = field(default_factory=dict)     # name -> sha256
    stages: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)    # stage -> wall seconds

    @classmethod
    def load_or_new(cls, out_dir: Path, cfg: RunConfig) -> "RunManifest":
        p = out_dir / MANIFEST
        if p.exists():
            m = json.loads(p.read_text())
            if training_key(m["config"]) == training_key(cfg.to_dict()):
                m["config"] = cfg.to_dict()
                return cls(**m)
            log.info("config changed; starting a fresh manifest in %s", out_dir)
        return cls(cfg.to_dict(), cfg.seed)

    def record(self, out_dir: Path, name: str, path: Path, stage: str | None = None) -> None:
        rel = Path(path).relative_to(out_dir)
        self.artifacts[name] = str(rel)
        self.hashes[name] = sha256_dir(path) if Path(path).is_dir() else sha256_file(path)
        if stage and stage not in self.stages:
            self.stages.append(stage)

    def has(self, out_dir: Path, name: str) -> bool:
        return name in self.artifacts and (out_dir / self.artifacts[name]).exists()

    def save(self, out_dir: Path) -> None:
        body = {"config": self.config, "seed": self.seed, "artifacts": self.artifacts,
                "hashes": self.hashes, "stages": self.stages, "timings": self.timings}
        (out_dir / MANIFEST).write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# shared plumbing


def model_spec(cfg: RunConfig, input_dim: int | None = None):
    if cfg.model == "mnist_net":
        return models.mnist_net(**cfg.model_args)
    args = {"hidden": (32,), "classes": cfg.synth.classes, **cfg.model_args}
    args["hidden"] = tuple(args["hidden"])
    return models.mlp(input_dim or cfg.synth.dim, **args)


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "mnist":
        train, test = data.load_mnist(split="train"), data.load_mnist(split="test")
    else:
        s = cfg.synth
        train, test = data.synth_splits(s.n_train, s.n_test, s.classes, s.dim, cfg.seed, s.sigma)
    if cfg.train_limit:
        train = train.subset(np.arange(min(cfg.train_limit, len(train))))
    if cfg.test_limit:
        test = test.subset(np.arange(min(cfg.test_limit, len(test))))
    return train, test


def train_config(cfg: RunConfig) -> trainer.TrainConfig:
    return trainer.TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch, lr=cfg.lr,
                               split_index=cfg.k, topology=cfg.topology, seed=cfg.seed,
                               transport=cfg.transport)


def _stage(name):
    def wrap(fn):
        def run(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except (OSError, ValueError, RuntimeError) as e:
                raise StageError(name, str(e)) from e
        run.__name__ = fn.__name__
        return run
    return wrap


class Run:
    """One configured run living in ``out_dir``; stages reuse earlier artifacts."""

    def __init__(self, cfg: RunConfig, out_dir):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest.load_or_new(self.out, cfg)
        self._data = None

    @property
    def datasets(self):
        if self._data is None:
            try:
                self._data = load_data(self.cfg)
            except (OSError, ValueError) as e:
                raise StageError("data", str(e)) from e
            self.manifest.hashes["train_data"] = sha256_dataset(self._data[0])
            self.manifest.hashes["test_data"] = sha256_dataset(self._data[1])
        return self._data

    @property
    def spec(self):
        train, _ = self.datasets
        return model_spec(self.cfg, int(np.prod(train.image_shape)))

    def _save(self):
        self.manifest.save(self.out)

    @_stage("fingerprint")
    def fingerprint(self) -> FingerprintSet:
        if self.manifest.has(self.out, "fingerprints"):
            return FingerprintSet.load(self.out / self.manifest.artifacts["fingerprints"])
        train, _ = self.datasets
        t0 = time.time()
        original = trainer.as_stack(trainer.train_original(train, train_config(self.cfg), self.spec))
        self.manifest.record(self.out, "original", trainer.save_checkpoint(
            original, self.out / "original", self.cfg.k, self.cfg.epochs), "fingerprint")
        fp = build_fingerprints(original, train, self.cfg.fingerprint.per_class,
                                self.cfg.fingerprint.epsilons, seed=self.cfg.seed)
        self.manifest.record(self.out, "fingerprints", fp.save(self.out / "fingerprints"), "fingerprint")
        self.manifest.timings["fingerprint"] = round(time.time() - t0, 1)
        self._save()
        log.info("fingerprint stage: %d examples in %.0fs", len(fp), time.time() - t0)
        return fp

    def original(self):
        self.fingerprint()
        return trainer.load_checkpoint(self.out / self.manifest.artifacts["original"])[0]

    @_stage("train")
    def train(self) -> trainer.ExperimentReport:
        fp = self.fingerprint()
        if self.manifest.has(self.out, "report_json"):
            return trainer.ExperimentReport(**{k: v for k, v in json.loads(
                (self.out / "report.json").read_text()).items() if k != "accdrop"})
        train, test = self.datasets
        t0 = time.time()
        tap = TranscriptWriter(self.out / "transcript.bin", max_epochs=self.cfg.attack.tap_epochs)
        try:
            marked = trainer.as_stack(trainer.train_fingerprinted(train, fp, train_config(self.cfg),
                                                                  self.spec, tap=tap))
        finally:
            tap.close()
        self.manifest.record(self.out, "transcript", self.out / "transcript.bin", "train")
        self.manifest.record(self.out, "fingerprinted", trainer.save_checkpoint(
            marked, self.out / "fingerprinted", self.cfg.k, self.cfg.epochs), "train")
        report = trainer.metrics(self.original(), marked, test, fp, dataset=self.cfg.dataset, k=self.cfg.k,
                                 epochs=self.cfg.epochs, batch=self.cfg.batch, lr=self.cfg.lr,
                                 seed=self.cfg.seed, injection_rate=injection_rate(len(train), len(fp)))
        trainer.write_csv(self.out / "report.csv", [report.row()])
        (self.out / "report.json").write_text(json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n")
        self.manifest.record(self.out, "report_csv", self.out / "report.csv", "train")
        self.manifest.record(self.out, "report_json", self.out / "report.json", "train")
        self.manifest.timings["train"] = round(time.time() - t0, 1)
        self._save()
        log.info("train stage: %d clean + %d fingerprints = %d rows (%s) in %.0fs", len(train), len(fp),
                 len(train) + len(fp), format_rate(report.injection_rate), time.time() - t0)
        return report

    def fingerprinted(self):
        self.train()
        return trainer.load_checkpoint(self.out / self.manifest.artifacts["fingerprinted"])[0]

    @_stage("verify")
    def verify(self, model_dir=None, fp_dir=None) -> dict:
        fp = FingerprintSet.load(fp_dir) if fp_dir else self.fingerprint()
        model = trainer.load_checkpoint(model_dir)[0] if model_dir else self.fingerprinted()
        res = trainer.verify(model, fp)
        out = {"n_s": res.n_s, "n_f": res.n_f, "fvsr": res.fvsr, "threshold": self.cfg.threshold,
               "owner": res.fvsr >= self.cfg.threshold,
               "model": str(model_dir) if model_dir else "fingerprinted"}
        (self.out / "verify.json").write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")
        return out

    @_stage("attack")
    def attack(self) -> attacks.AttackReport:
        if not self.manifest.has(self.out, "transcript"):
            raise StageError("attack", f"no tap transcript in {self.out}; run 'train' first")
        fp = self.fingerprint()
        victim = self.fingerprinted()
        train, test = self.datasets
        a = self.cfg.attack
        lg = attacks.InterceptLog.from_transcript(self.out / self.manifest.artifacts["transcript"],
                                                  self.cfg.topology, self.spec, self.cfg.k,
                                                  max_epochs=a.tap_epochs)
        acfg = attacks.AttackConfig(mode=a.mode, metric=a.metric, seed=self.cfg.seed + a.seed_offset,
                                    epochs=a.epochs or self.cfg.epochs, batch_size=self.cfg.batch,
                                    lr=a.lr or self.cfg.lr, rates=tuple(a.rates))
        report = attacks.run_attack_suite(victim, lg, inject(train, fp), train_config(self.cfg), test, fp,
                                          acfg, n_clean=len(train))
        report.write(self.out / "attack")
        self.manifest.record(self.out, "attack", self.out / "attack", "attack")
        self._save()
        return report


# --------------------------------------------------------------------------
# commands


def cmd_prepare(args, cfg: RunConfig) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.mnist is not None:
        src = Path(args.mnist)
        try:
            train = data.load_mnist(src, "train")
            test = data.load_mnist(src, "test")
        except (OSError, ValueError) as e:
            raise StageError("prepare", str(e)) from e
        for split, ds in (("train", train), ("test", test)):
            img, lab = data.MNIST_FILES[split]
            data.write_idx(ds, out / img, out / lab)
        manifest = {"dataset": "mnist", "n_train": len(train), "n_test": len(test),
                    "image_shape": list(train.image_shape), "class_count": train.class_count}
    else:
        s = cfg.synth
        train, test = data.synth_splits(s.n_train, s.n_test, s.classes, s.dim, cfg.seed, s.sigma)
        for split, ds in (("train", train), ("test", test)):
            save_tensors(out / f"{split}.bin", [ds.images, ds.labels.astype(np.float32)])
        manifest = {"dataset": "synth", "n_train": len(train), "n_test": len(test),
                    "image_shape": list(train.image_shape), "class_count": train.class_count,
                    "seed": cfg.seed, "synth": cfg.to_dict()["synth"]}
    manifest["sha256"] = {"train": sha256_dataset(train), "test": sha256_dataset(test)}
    (out / "dataset.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    print(f"prepared {manifest['dataset']}: N={manifest['n_train']} train, {manifest['n_test']} test -> {out}")
    return 0


def load_prepared(directory) -> tuple[Dataset, Dataset]:
    """Read back a synthetic dataset written by ``prepare --synth``."""
    d = Path(directory)
    m = json.loads((d / "dataset.json").read_text())
    out = []
    for split in ("train", "test"):
        images, labels = load_tensors(d / f"{split}.bin")
        out.append(Dataset(images, labels.astype(np.int64), m["class_count"]))
    return out[0], out[1]


def cmd_fingerprint(args, cfg) -> int:
    run = Run(cfg, args.out_dir)
    fp = run.fingerprint()
    eps = ", ".join(f"{e:g}:{int(np.sum(fp.epsilons == e))}" for e in fp.epsilon_schedule)
    print(f"fingerprints: {len(fp)} examples ({eps}) -> {run.out / 'fingerprints'}")
    return 0


def cmd_train(args, cfg) -> int:
    run = Run(cfg, args.out_dir)
    r = run.train()
    n_clean = len(run.datasets[0])
    print(f"injected {r.n_f} fingerprints into {n_clean} samples -> {n_clean + r.n_f} "
          f"(injection rate {format_rate(r.injection_rate)})")
    print(f"acc_o={100 * r.acc_o:.2f}% acc_f={100 * r.acc_f:.2f}% accdrop={100 * r.accdrop:.2f} points "
          f"fvsr={100 * r.fvsr:.1f}% ({r.n_s}/{r.n_f})")
    return 0


def cmd_verify(args, cfg) -> int:
    out = Run(cfg, args.out_dir).verify(args.model, args.fingerprints)
    verdict = "ownership verified" if out["owner"] else "ownership NOT verified"
    print(f"fvsr={out['fvsr']:.4f} ({out['n_s']}/{out['n_f']}), threshold {out['threshold']}: {verdict}")
    return 0


def cmd_attack(args, cfg) -> int:
    r = Run(cfg, args.out_dir).attack()
    print(f"attacker_mode={r.attacker_mode} k={r.split_index} label_accuracy={r.label_accuracy:.4f} "
          f"stolen_accuracy={r.stolen_accuracy:.4f} stolen_fvsr={r.stolen_fvsr:.4f}")
    for rate, acc, fvsr in r.pruning_curve:
        print(f"  prune {rate:.1f}: accuracy={acc:.4f} fvsr={fvsr:.4f}")
    return 0


def cmd_sweep(args, cfg) -> int:
    if not cfg.sweep.values:
        raise ConfigError("field 'sweep.values': must list at least one value")
    out = Path(args.out_dir)
    rows = []
    for v in cfg.sweep.values:
        cell = cfg.replace(**{cfg.sweep.param: int(v)}, sweep={"param": cfg.sweep.param, "values": []})
        run = Run(cell, out / f"{cfg.sweep.param}-{int(v)}")
        rows.append(run.train().row())
        if args.attack:
            run.attack()
        print(f"{cfg.sweep.param}={int(v)}: {rows[-1]}")
    trainer.write_csv(out / "sweep.csv", rows)
    return 0


COMMANDS = {"prepare": cmd_prepare, "fingerprint": cmd_fingerprint, "train": cmd_train,
            "verify": cmd_verify, "attack": cmd_attack, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run config (or a run manifest)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out-dir", default="runs/default")
    common.add_argument("--transport", choices=["inproc", "tcp"])
    common.add_argument("--topology", choices=["a", "b", "c"])
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="splitfp", description="split learning with adversarial-example fingerprints")
    sub = p.add_subparsers(dest="command", required=True)
    prep = sub.add_parser("prepare", parents=[common], help="export a dataset")
    src = prep.add_mutually_exclusive_group(required=True)
    src.add_argument("--mnist", metavar="DIR", help="directory with the four MNIST IDX files")
    src.add_argument("--synth", action="store_true", help="synthetic blobs from the [synth] config section")
    sub.add_parser("fingerprint", parents=[common], help="train the original model, build fingerprints")
    sub.add_parser("train", parents=[common], help="train the fingerprinted model and report")
    ver = sub.add_parser("verify", parents=[common], help="FVSR and ownership decision")
    ver.add_argument("--model", help="checkpoint directory (default: this run's fingerprinted model)")
    ver.add_argument("--fingerprints", help="fingerprint set directory (default: this run's)")
    att = sub.add_parser("attack", parents=[common], help="label inference, stealing and pruning")
    att.add_argument("--mode", choices=["oracle", "strict"])
    sw = sub.add_parser("sweep", parents=[common], help="one run per value of sweep.param")
    sw.add_argument("--attack", action="store_true", help="also run the attack suite per cell")
    return p


def resolve_config(args) -> RunConfig:
    cfg = config_mod.load(args.config) if args.config else RunConfig()
    changes = {}
    for flag in ("seed", "transport", "topology"):
        if getattr(args, flag, None) is not None:
            changes[flag] = getattr(args, flag)
    if getattr(args, "mode", None):
        changes["attack"] = {**cfg.to_dict()["attack"], "mode": args.mode}
    return cfg.replace(**changes) if changes else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
