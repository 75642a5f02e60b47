import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splitfp import attacks, engine, fingerprint as F, trainer
from splitfp.data import BatchPlan, synth_dataset
from splitfp.models import mlp
from splitfp.protocol import TranscriptRecorder
from splitfp.trainer import TrainConfig
from splitfp.wire import MsgType, WireMessage

SPEC = mlp(16, (24,), 4)  # 0 dense, 1 relu, 2 dense, 3 softmax


@pytest.fixture(scope="module")
def victim():
    ds = synth_dataset(40, 4, 16, seed=3, sigma=0.12)
    cfg = TrainConfig(epochs=20, batch_size=16, lr=0.1, seed=0, split_index=3)
    original = trainer.as_stack(trainer.train_original(ds, cfg, SPEC))
    fp = F.build_fingerprints(original, ds, per_class=2, seed=0)
    marked = trainer.as_stack(trainer.train_fingerprinted(ds, fp, cfg, SPEC))
    return ds, cfg, fp, marked


def _intercept(ds, fp, cfg, k, topology="b"):
    rec = TranscriptRecorder(max_epochs=1)
    c = TrainConfig(**{**cfg.__dict__, "epochs": 1, "split_index": k, "topology": topology})
    trainer.train_fingerprinted(ds, fp, c, SPEC, tap=rec)
    return attacks.InterceptLog.from_messages(rec.messages, topology, SPEC, k, max_epochs=1)


# ---------------------------------------------------------------- pruning

@settings(max_examples=30)
@given(rate=st.floats(0, 0.99), seed=st.integers(0, 100))
def test_prune_count_and_order(rate, seed):
    stack = engine.init_stack(mlp(6, (5,), 3), seed)
    for layer in stack.layers:
        if layer.params:
            layer.params[1][...] = 0.5
    pruned = attacks.prune(stack, rate)
    total = attacks.prunable_count(stack)
    n = int(round(rate * total))
    w_before = np.concatenate([l.params[0].ravel() for l in stack.layers if l.params])
    w_after = np.concatenate([l.params[0].ravel() for l in pruned.layers if l.params])
    assert int(np.sum(w_after == 0)) == n
    zeroed = w_after == 0
    if n and n < total:
        assert np.abs(w_before[zeroed]).max() <= np.abs(w_before[~zeroed]).min()
    np.testing.assert_array_equal(w_after[~zeroed], w_before[~zeroed])
    for l in pruned.layers:
        if l.params:
            assert np.all(l.params[1] == 0.5)


def test_prune_leaves_input_untouched_and_rate_zero_is_identity():
    stack = engine.init_stack(SPEC, 1)
    before = stack.copy()
    attacks.prune(stack, 0.5)
    assert engine.params_equal(stack, before)
    assert engine.params_equal(attacks.prune(stack, 0.0), stack)


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_prune_rejects_bad_rate(rate):
    with pytest.raises(ValueError):
        attacks.prune(engine.init_stack(SPEC, 0), rate)


def test_pruning_curve_shape(victim):
    ds, _, fp, marked = victim
    curve = attacks.pruning_curve(marked, ds, fp, (0.0, 0.5))
    assert [r[0] for r in curve] == [0.0, 0.5]
    assert curve[0][2] == trainer.verify(marked, fp).fvsr


# ---------------------------------------------------------------- intercept parsing

def test_intercept_log_pairs_frames(victim):
    ds, cfg, fp, _ = victim
    for topology in "abc":
        lg = _intercept(ds, fp, cfg, 2, topology)
        assert len(lg) == -(-(len(ds) + len(fp)) // cfg.batch_size)
        assert all(r.smashed.shape == r.grad.shape == (len(r.smashed), 24) for r in lg.records)
        assert [r.batch_index for r in lg.records] == list(range(len(lg)))
        assert lg.head_spec().layers == SPEC.layers[2:]


def test_intercept_rejects_wrong_topology(victim):
    ds, cfg, fp, _ = victim
    rec = TranscriptRecorder(max_epochs=1)
    trainer.train_fingerprinted(ds, fp, TrainConfig(**{**cfg.__dict__, "epochs": 1, "split_index": 2,
                                                       "topology": "a"}), SPEC, tap=rec)
    with pytest.raises(ValueError, match="topology b"):
        attacks.InterceptLog.from_messages(rec.messages, "b", SPEC, 2)


def test_intercept_rejects_mid_batch_end_and_wrong_shape():
    s = WireMessage(MsgType.SMASHED, np.zeros((2, 24), np.float32))
    with pytest.raises(ValueError, match="mid-batch"):
        attacks.InterceptLog.from_messages([s, WireMessage(MsgType.END_EPOCH)], "b", SPEC, 2)
    bad = WireMessage(MsgType.SMASHED, np.zeros((2, 5), np.float32))
    with pytest.raises(ValueError, match="split shape"):
        attacks.InterceptLog.from_messages([bad, WireMessage(MsgType.GRAD, np.zeros((2, 5), np.float32))],
                                           "b", SPEC, 2)


def test_replay_stream_matches_victim_order():
    ds = synth_dataset(10, 2, 4, seed=0)
    cfg = TrainConfig(batch_size=6, seed=4)
    stream = attacks.replay_stream(ds, cfg, 6)
    expect = list(BatchPlan.for_epoch(20, 6, 4, 0).index_batches()) + \
        list(BatchPlan.for_epoch(20, 6, 4, 1).index_batches())[:2]
    assert len(stream) == 6
    for a, b in zip(stream, expect):
        np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- label inference

def test_candidate_gradient_with_true_head_reproduces_intercept(victim):
    ds, cfg, fp, _ = victim
    lg = _intercept(ds, fp, cfg, 2)
    # the head at the first batch is the freshly initialised server half
    head = engine.init_stack(SPEC, cfg.seed).split(2)[1]
    rec = lg.records[0]
    stream = attacks.replay_stream(F.inject(ds, fp), cfg, 1)[0]
    truth = F.inject(ds, fp).labels[stream]
    cand = attacks.candidate_gradients(head, rec.smashed, 4)
    assert cand.shape == (4,) + rec.smashed.shape
    rows = cand[truth, np.arange(len(truth))]
    np.testing.assert_allclose(rows, rec.grad, rtol=1e-5, atol=1e-7)


def test_softmax_only_head_recovers_every_label(victim):
    ds, cfg, fp, _ = victim
    lg = _intercept(ds, fp, cfg, 3)
    inj = F.inject(ds, fp)
    stream = attacks.replay_stream(inj, cfg, len(lg))
    truth = np.concatenate([inj.labels[i] for i in stream])
    for metric in ("l2", "cosine"):
        guess = np.concatenate(attacks.infer_labels(lg, 4, metric=metric))
        assert np.array_equal(guess, truth)


def test_two_class_toy_gradient_sign():
    # with two classes and a softmax-only head, the split gradient's first
    # coordinate is (p0 - [y == 0]) / B: negative exactly when y == 0
    spec = mlp(3, (), 2)
    z = np.array([[0.3, -0.2], [1.0, 2.0], [0.0, 0.0]], np.float32)
    y = np.array([0, 1, 1])
    p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
    g = (p - np.eye(2)[y]) / 3
    lg = attacks.InterceptLog([attacks.InterceptRecord(0, 0, z, g.astype(np.float32))], spec, 1)
    assert attacks.infer_labels(lg, 2)[0].tolist() == y.tolist()
    assert np.all((g[:, 0] < 0) == (y == 0))


def test_infer_labels_errors():
    lg = attacks.InterceptLog([], SPEC, 3)
    with pytest.raises(ValueError, match="empty"):
        attacks.infer_labels(lg, 4)


def test_attack_suite_end_to_end(victim, tmp_path):
    ds, cfg, fp, marked = victim
    lg = _intercept(ds, fp, cfg, 3)
    inj = F.inject(ds, fp)
    acfg = attacks.AttackConfig(epochs=20, batch_size=16, lr=0.1, rates=(0.1, 0.5))
    rep = attacks.run_attack_suite(marked, lg, inj, cfg, ds, fp, acfg, n_clean=len(ds))
    assert rep.label_accuracy == 1.0
    assert rep.fingerprint_rows_seen == len(fp)
    assert rep.fingerprint_rows_inferred_as_target == len(fp)
    assert rep.stolen_fvsr >= 0.75 and rep.stolen_accuracy >= 0.95
    rep.write(tmp_path)
    report = json.loads((tmp_path / "attack_report.json").read_text())
    assert report["attacker_mode"] == "oracle"
    assert (tmp_path / "pruning_curve.csv").read_text().splitlines()[0] == "rate,accuracy,fvsr"


def test_strict_mode_composes_with_client_half(victim):
    ds, cfg, fp, marked = victim
    lg = _intercept(ds, fp, cfg, 2)
    acfg = attacks.AttackConfig(mode="strict", epochs=2, batch_size=16, lr=0.1, rates=())
    rep = attacks.run_attack_suite(marked, lg, F.inject(ds, fp), cfg, ds, fp, acfg)
    assert rep.attacker_mode == "strict" and 0 <= rep.stolen_fvsr <= 1


def test_steal_model_rejects_unknown_mode(victim):
    ds, cfg, fp, _ = victim
    lg = _intercept(ds, fp, cfg, 3)
    with pytest.raises(ValueError, match="mode"):
        attacks.steal_model(lg, attacks.infer_labels(lg, 4), [], cfg, mode="x")


def test_single_class_single_record():
    spec = mlp(3, (), 1)
    rec = attacks.InterceptRecord(0, 0, np.zeros((1, 1), np.float32), np.zeros((1, 1), np.float32))
    assert attacks.infer_labels(attacks.InterceptLog([rec], spec, 1), 1)[0].tolist() == [0]


def test_inference_ignores_victim_parameters(victim):
    import inspect
    ds, cfg, fp, marked = victim
    # the attacker path takes only the log (architecture + traffic), never a model
    assert list(inspect.signature(attacks.infer_labels).parameters) == ["log_", "class_count", "seed", "metric"]
    lg = _intercept(ds, fp, cfg, 2)
    before = attacks.infer_labels(lg, 4, seed=3)
    saved = [p.copy() for p in marked.params]
    for p in marked.params:
        p += 1.0
    try:
        after = attacks.infer_labels(lg, 4, seed=3)
    finally:
        for p, v in zip(marked.params, saved):
            p[...] = v
    assert all(np.array_equal(a, b) for a, b in zip(before, after))


def test_prune_half_of_ten_weights():
    stack = engine.init_stack(mlp(5, (), 2), 0)  # 10 weights
    pruned = attacks.prune(stack, 0.5)
    assert int(np.sum(pruned.params[0] == 0)) == 5


@pytest.fixture(scope="module")
def stolen_controls(victim):
    ds, cfg, fp, marked = victim
    inj = F.inject(ds, fp)
    lg = _intercept(ds, fp, cfg, 3)
    stream = attacks.replay_stream(inj, cfg, len(lg))
    inputs = [inj.images[i] for i in stream]
    steal_cfg = TrainConfig(epochs=20, batch_size=16, lr=0.1, seed=77)
    perfect = attacks.steal_model(lg, [inj.labels[i] for i in stream], inputs, steal_cfg)
    rng = np.random.default_rng(0)
    noise = attacks.steal_model(lg, [rng.integers(0, 4, len(i)) for i in stream], inputs, steal_cfg)
    return ds, fp, marked, perfect, noise


def test_perfect_labels_steal_close_to_victim(stolen_controls):
    ds, _, marked, perfect, _ = stolen_controls
    assert trainer.test_accuracy(perfect, ds) >= trainer.test_accuracy(marked, ds) - 0.05


def test_random_labels_steal_chance_level(stolen_controls):
    ds, fp, _, _, noise = stolen_controls
    # held-out blobs from the same means
    from splitfp.data import synth_splits
    _, test = synth_splits(40, 200, 4, 16, seed=3, sigma=0.12)
    assert abs(trainer.test_accuracy(noise, test) - 0.25) <= 0.15
    assert trainer.verify(noise, fp).fvsr <= 2 * 0.25 + 0.05
