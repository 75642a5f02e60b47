import csv

import numpy as np
import pytest

from splitfp import engine, fingerprint as F, trainer
from splitfp.data import synth_dataset
from splitfp.models import mlp
from splitfp.trainer import ExperimentReport, TrainConfig


@pytest.fixture(scope="module")
def embedded():
    ds = synth_dataset(60, 4, 16, seed=3, sigma=0.12)
    spec = mlp(16, (24,), 4)
    cfg = TrainConfig(epochs=30, batch_size=16, lr=0.1, seed=0, split_index=2)
    original = trainer.as_stack(trainer.train_original(ds, cfg, spec))
    fp = F.build_fingerprints(original, ds, per_class=2, seed=0)
    marked = trainer.as_stack(trainer.train_fingerprinted(ds, fp, cfg, spec))
    control = trainer.as_stack(trainer.train_original(ds, TrainConfig(**{**cfg.__dict__, "seed": 50}), spec))
    return ds, original, fp, marked, control


def test_config_validation():
    TrainConfig().validate(11)
    for bad in ({"epochs": 0}, {"batch_size": 0}, {"lr": 0.0}, {"topology": "z"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()
    with pytest.raises(ValueError, match="split_index"):
        TrainConfig(split_index=11).validate(11)


def test_fingerprints_embed_and_control_is_lower(embedded):
    ds, original, fp, marked, control = embedded
    assert trainer.verify(original, fp).fvsr == 1.0  # targets are its own predictions
    assert trainer.verify(marked, fp).fvsr >= 0.85
    assert trainer.verify(control, fp).fvsr < trainer.verify(marked, fp).fvsr
    assert trainer.test_accuracy(marked, ds) >= 0.95


def test_verify_recount(embedded):
    _, _, fp, marked, _ = embedded
    res = trainer.verify(marked, fp)
    # independent recount, one example at a time
    hits = 0
    for x, t in zip(fp.examples, fp.target_labels):
        z = engine.forward(marked, x.reshape(1, -1))[0]
        hits += int(np.argmax(z) == t)
    assert res.n_s == hits and res.n_f == len(fp)
    assert res.fvsr == hits / len(fp)
    assert [r[0] for r in res.per_example] == list(range(len(fp)))


def test_verify_class_mismatch(embedded):
    _, _, fp, _, _ = embedded
    other = engine.init_stack(mlp(16, (), 3), 0)
    with pytest.raises(ValueError, match="classes"):
        trainer.verify(other, fp)


def test_report_row_and_csv(tmp_path):
    r = ExperimentReport(0.99, 0.985, 0.97, 97, 100, dataset="mnist", k=8, epochs=16, batch=64, seed=1)
    assert r.accdrop == pytest.approx(0.005)
    row = r.row()
    assert list(row) == trainer.CSV_COLUMNS
    trainer.write_csv(tmp_path / "a.csv", [row])
    trainer.write_csv(tmp_path / "b.csv", [r.row()])
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    with open(tmp_path / "a.csv") as f:
        back = list(csv.DictReader(f))
    assert back[0]["acc_o"] == "0.990000" and back[0]["fvsr"] == "0.970000"


def test_metrics(embedded):
    ds, original, fp, marked, _ = embedded
    rep = trainer.metrics(original, marked, ds, fp, dataset="synth")
    assert rep.acc_o == trainer.test_accuracy(original, ds)
    assert rep.fvsr == trainer.verify(marked, fp).fvsr


def test_checkpoint_round_trip(embedded, tmp_path):
    _, _, _, marked, _ = embedded
    trainer.save_checkpoint(marked, tmp_path / "ck", split_index=2, epoch=30)
    back, manifest = trainer.load_checkpoint(tmp_path / "ck")
    assert engine.params_equal(back, marked)
    assert manifest["split_index"] == 2 and manifest["epoch"] == 30


def test_checkpoint_shape_mismatch(embedded, tmp_path):
    _, _, _, marked, _ = embedded
    trainer.save_checkpoint(marked, tmp_path / "ck")
    other = engine.init_stack(mlp(16, (8,), 4), 0)
    trainer.save_checkpoint(other, tmp_path / "ck2")
    (tmp_path / "ck" / "params.bin").write_bytes((tmp_path / "ck2" / "params.bin").read_bytes())
    with pytest.raises(ValueError, match="does not fit"):
        trainer.load_checkpoint(tmp_path / "ck")


def test_on_epoch_callback():
    ds = synth_dataset(5, 2, 4, seed=0)
    seen = []
    trainer.run_split_training(engine.init_stack(mlp(4, (3,), 2), 0), ds,
                               TrainConfig(epochs=3, batch_size=4, lr=0.1, split_index=1),
                               on_epoch=lambda e, s: seen.append(e))
    assert seen == [0, 1, 2]


def _constant_model(cls, classes=4, dim=16):
    stack = engine.init_stack(mlp(dim, (), classes), 0)
    W, b = stack.params
    W[...] = 0
    b[...] = 0
    b[cls] = 1
    return stack


def test_verify_trivial_models():
    fp = F.FingerprintSet(np.zeros((3, 1, 16)), [0, 0, 0], [1, 2, 3], [0.1] * 3, 0, [0, 1, 2], class_count=4)
    assert trainer.verify(_constant_model(0), fp).fvsr == 1.0
    assert trainer.verify(_constant_model(2), fp).fvsr == 0.0


def test_original_learns_blobs_and_is_deterministic():
    ds = synth_dataset(50, 4, 16, seed=1)
    cfg = TrainConfig(epochs=5, batch_size=16, lr=0.1, seed=3, split_index=2)
    a = trainer.as_stack(trainer.train_original(ds, cfg, mlp(16, (24,), 4)))
    b = trainer.as_stack(trainer.train_original(ds, cfg, mlp(16, (24,), 4)))
    assert trainer.test_accuracy(a, ds) >= 0.95
    assert engine.params_equal(a, b)


def test_accdrop_signed(embedded):
    ds, original, fp, marked, _ = embedded
    same = trainer.metrics(marked, marked, ds, fp)
    assert same.accdrop == 0.0
    r = ExperimentReport(0.97, 0.98, 1.0, 1, 1)
    assert r.accdrop == pytest.approx(-0.01) and r.row()["accdrop"] == "-0.010000"
