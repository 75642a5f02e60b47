"""Declarative run configuration (one run = one TOML/JSON file).

Schema (all keys optional, defaults shown by ``RunConfig()``)::

    dataset = "mnist"            # or "synth"
    model = "mnist_net"          # or "mlp"
    model_args = {}              # keyword args of the model builder
    k = 8                        # split index
    epochs = 16
    batch = 64
    lr = 0.1
    seed = 1
    topology = "b"               # a | b | c
    transport = "inproc"         # inproc | tcp
    threshold = 0.9              # FVSR ownership decision
    train_limit = 0              # >0 keeps only the first N training rows
    test_limit = 0

    [fingerprint]  per_class, epsilons
    [attack]       mode, metric, rates, epochs, lr, seed_offset, tap_epochs
    [synth]        n_train, n_test, classes, dim, sigma
    [sweep]        param ("k" | "epochs" | "batch"), values
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .fingerprint import DEFAULT_EPSILONS
from .protocol import Topology


class ConfigError(ValueError):
    pass


@dataclass
class FingerprintParams:
    per_class: int = 10
    epsilons: tuple = DEFAULT_EPSILONS


@dataclass
class AttackParams:
    mode: str = "oracle"
    metric: str = "l2"
    rates: tuple = (0.1, 0.3, 0.5, 0.7)
    epochs: int = 0          # 0 means same as the victim run
    lr: float = 0.0          # 0 means same as the victim run
    seed_offset: int = 1000
    tap_epochs: int = 1      # epochs of traffic kept in the transcript


@dataclass
class SynthParams:
    n_train: int = 60
    n_test: int = 20
    classes: int = 4
    dim: int = 16
    sigma: float = 0.12


@dataclass
class SweepParams:
    param: str = "k"
    values: tuple = ()


@dataclass
class RunConfig:
    dataset: str = "mnist"
    model: str = "mnist_net"
    model_args: dict = field(default_factory=dict)
    k: int = 8
    epochs: int = 16
    batch: int = 64
    lr: float = 0.1
    seed: int = 1
    topology: str = "b"
    transport: str = "inproc"
    threshold: float = 0.9
    train_limit: int = 0
    test_limit: int = 0
    fingerprint: FingerprintParams = field(default_factory=FingerprintParams)
    attack: AttackParams = field(default_factory=AttackParams)
    synth: SynthParams = field(default_factory=SynthParams)
    sweep: SweepParams = field(default_factory=SweepParams)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return json.loads(json.dumps(d))  # tuples -> lists

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def replace(self, **changes) -> "RunConfig":
        return from_dict({**self.to_dict(), **changes})

    def validate(self) -> "RunConfig":
        checks = [
            ("dataset", self.dataset in ("mnist", "synth"), "must be 'mnist' or 'synth'"),
            ("model", self.model in ("mnist_net", "mlp"), "must be 'mnist_net' or 'mlp'"),
            ("epochs", self.epochs >= 1, "must be >= 1"),
            ("batch", self.batch >= 1, "must be >= 1"),
            ("lr", self.lr > 0, "must be positive"),
            ("k", self.k >= 1, "must be >= 1"),
            ("topology", self.topology in [t.value for t in Topology], "must be one of a, b, c"),
            ("transport", self.transport in ("inproc", "tcp"), "must be 'inproc' or 'tcp'"),
            ("threshold", 0 <= self.threshold <= 1, "must be in [0, 1]"),
            ("train_limit", self.train_limit >= 0, "must be >= 0"),
            ("test_limit", self.test_limit >= 0, "must be >= 0"),
            ("fingerprint.per_class", self.fingerprint.per_class >= 1, "must be >= 1"),
            ("fingerprint.epsilons", len(self.fingerprint.epsilons) > 0
             and all(e >= 0 for e in self.fingerprint.epsilons), "must be non-empty and non-negative"),
            ("attack.mode", self.attack.mode in ("oracle", "strict"), "must be 'oracle' or 'strict'"),
            ("attack.metric", self.attack.metric in ("l2", "cosine"), "must be 'l2' or 'cosine'"),
            ("attack.rates", all(0 <= r < 1 for r in self.attack.rates), "must lie in [0, 1)"),
            ("attack.epochs", self.attack.epochs >= 0, "must be >= 0"),
            ("attack.lr", self.attack.lr >= 0, "must be >= 0"),
            ("attack.tap_epochs", self.attack.tap_epochs >= 1, "must be >= 1"),
            ("synth.n_train", self.synth.n_train >= 1, "must be >= 1"),
            ("synth.n_test", self.synth.n_test >= 1, "must be >= 1"),
            ("synth.classes", self.synth.classes >= 2, "must be >= 2"),
            ("synth.dim", self.synth.dim >= 1, "must be >= 1"),
            ("synth.sigma", self.synth.sigma > 0, "must be positive"),
            ("sweep.param", self.sweep.param in ("k", "epochs", "batch"), "must be 'k', 'epochs' or 'batch'"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(f"field '{name}': {msg}")
        return self


_SECTIONS = {"fingerprint": FingerprintParams, "attack": AttackParams, "synth": SynthParams,
             "sweep": SweepParams}


def _coerce(path: str, value, default):
    """Check ``value`` against the type of the field's default."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, (list, tuple)) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
        value = tuple(value) if ok else value
    elif isinstance(default, dict):
        ok = isinstance(value, dict)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"field '{path}': expected {type(default).__name__}, got {type(value).__name__} "
                          f"({value!r})")
    return value


def _build(cls, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"field '{prefix.rstrip('.')}': expected a table")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown field '{prefix}{unknown[0]}'")
    kwargs = {}
    for key, value in data.items():
        if cls is RunConfig and key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, f"{key}.")
        else:
            kwargs[key] = _coerce(prefix + key, value, getattr(defaults, key))
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    # a run manifest carries its config under "config"
    if "config" in data and "artifacts" in data:
        data = data["config"]
    return _build(RunConfig, data).validate()


def load(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    text = p.read_text()
    try:
        data = tomllib.loads(text) if p.suffix == ".toml" else json.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"{p}: cannot parse ({e})") from e
    return from_dict(data)
