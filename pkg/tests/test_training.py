import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recgnition import tensor as T
from recgnition.errors import EmptyDataset, IndexOutOfRange, RegistryMismatch, ShapeMismatch, VersionMismatch
from recgnition.model import ArchConfig, build
from recgnition.preprocess import preprocess_record, split
from recgnition.tensor import Rng, Tape, Tensor
from recgnition.training import (AdamState, History, TrainConfig, adam_step, cross_entropy, fit, fit_arrays,
                                 load_checkpoint, lr_at, read_checkpoint_metadata, save_checkpoint,
                                 softmax_cross_entropy)
from recgnition.wfdb_io import list_records, load_record

TINY = ArchConfig.tiny()


# --- config -------------------------------------------------------------------

def test_config_defaults():
    c = TrainConfig()
    assert (c.batch_size, c.epochs, c.base_lr, c.warmup_steps, c.seed) == (32, 40, 0.01, 5, 257)
    assert (c.beta1, c.beta2, c.epsilon) == (0.9, 0.999, 1e-8)
    assert c.dropout_rates == (0.25, 0.1)


@pytest.mark.parametrize("kw", [dict(batch_size=0), dict(base_lr=0), dict(warmup_steps=40),
                                dict(dropout_rates=(1.0, 0.1)), dict(fusion="bogus"), dict(scheme="bogus")])
def test_config_invalid(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_dict_roundtrip():
    c = TrainConfig(epochs=3, warmup_steps=1, fusion="concat")
    assert TrainConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochz": 3})


# --- loss -----------------------------------------------------------------------

def test_cross_entropy_examples():
    assert cross_entropy(np.eye(10)[3], 3) <= 2.8e-11
    assert abs(cross_entropy(np.full(10, 0.1), 7) - math.log(10)) < 1e-12
    assert abs(cross_entropy(np.eye(10)[0], 1) - 27.631021115928547) < 1e-9
    assert abs(cross_entropy([[0.5, 0.5], [0.9, 0.1]], [0, 0]) - (math.log(2) - math.log(0.9)) / 2) < 1e-12


def test_cross_entropy_bad_target():
    with pytest.raises(IndexOutOfRange):
        cross_entropy(np.full(3, 1 / 3), 3)
    with pytest.raises(IndexOutOfRange):
        cross_entropy(np.full(3, 1 / 3), -1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_softmax_cross_entropy_value_and_gradient(seed):
    r = np.random.default_rng(seed)
    z = r.normal(scale=3, size=(4, 5))
    y = r.integers(0, 5, 4)
    logits = Tensor(z, requires_grad=True)
    with Tape() as tape:
        loss = softmax_cross_entropy(logits, y)
    tape.backward(loss)
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    assert abs(float(loss.data) - cross_entropy(p, y)) < 1e-10
    expect = (p - np.eye(5)[y]) / 4
    assert np.allclose(logits.grad, expect, atol=1e-12)


def test_softmax_cross_entropy_saturated_is_finite():
    logits = Tensor(np.array([[0.0, 200.0]]), requires_grad=True)
    with Tape() as tape:
        loss = softmax_cross_entropy(logits, [0])
    tape.backward(loss)
    assert abs(float(loss.data) - 27.631021115928547) < 1e-9
    assert np.allclose(logits.grad, [[-1.0, 1.0]])


# --- schedule ---------------------------------------------------------------------

def test_lr_analytic_points():
    c = TrainConfig()
    assert lr_at(0, c) == 0.0
    assert lr_at(5, c) == 0.01
    assert abs(lr_at(40, c)) < 1e-18


def test_lr_warmup_branch():
    c = TrainConfig()
    assert [lr_at(t, c) for t in range(5)] == [0.01 * t / 5 for t in range(5)]
    short = TrainConfig(warmup_steps=2, epochs=10)
    assert lr_at(1, short) == 0.01 / 5  # denominator floors at 5


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 60).flatmap(lambda e: st.tuples(st.just(e), st.integers(0, e - 1))),
       st.floats(1e-4, 1.0))
def test_lr_shape(ew, base):
    epochs, warmup = ew
    c = TrainConfig(epochs=epochs, warmup_steps=warmup, base_lr=base)
    lrs = [lr_at(t, c) for t in range(epochs + 1)]
    assert max(lrs) == lr_at(warmup, c) == base
    assert all(a <= b for a, b in zip(lrs[:warmup], lrs[1:warmup + 1]))
    assert all(a >= b - 1e-15 for a, b in zip(lrs[warmup:], lrs[warmup + 1:]))
    assert min(lrs) >= -1e-15


# --- Adam -------------------------------------------------------------------------------

def test_adam_zero_gradient_identity():
    p = {"a": Tensor(np.array([1.0, -2.0])), "b": Tensor(np.ones((2, 2)))}
    before = {k: v.data.copy() for k, v in p.items()}
    state = AdamState.zeros_like(p)
    for _ in range(3):
        adam_step(p, {"a": np.zeros(2), "b": np.zeros((2, 2))}, state, 0.1)
    assert all(np.array_equal(before[k], p[k].data) for k in p)
    assert not state.m["a"].any() and not state.v["b"].any() and state.t == 3


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10_000))
def test_adam_zero_gradient_identity_any_state(steps, seed):
    r = np.random.default_rng(seed)
    p = {"w": Tensor(r.normal(size=3))}
    state = AdamState.zeros_like(p)
    for _ in range(steps):
        adam_step(p, {"w": r.normal(size=3)}, state, 0.01)
    state.m["w"][:] = 0  # identity needs a zero first moment; v may be anything
    before = p["w"].data.copy()
    adam_step(p, {"w": np.zeros(3)}, state, 0.01)
    assert np.array_equal(before, p["w"].data)


def test_adam_first_step():
    p = [Tensor(np.array(2.0))]
    state = AdamState()
    adam_step(p, [np.array(0.5)], state, 0.1)
    assert abs(float(p[0].data) - (2.0 - 0.1 * 0.5 / (0.5 + 1e-8))) < 1e-15


def scalar_adam(theta, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    # plain-float simulation of the update equations
    m = v = 0.0
    for t in range(1, steps + 1):
        g = theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


def test_adam_quadratic_convergence():
    p = [Tensor(np.array(1.0))]
    state = AdamState()
    trace = []
    for _ in range(200):
        adam_step(p, [p[0].data.copy()], state, 0.05)
        trace.append(float(p[0].data))
    assert min(abs(x) for x in trace) < 0.05
    assert abs(trace[-1] - scalar_adam(1.0, 200, 0.05)) < 1e-12


def test_adam_one_step_decreases_quadratic():
    A = np.array([[3.0, 0.5], [0.5, 1.0]])
    x = Tensor(np.array([1.0, -2.0]))
    f = lambda v: 0.5 * v @ A @ v  # noqa: E731
    before = f(x.data)
    adam_step([x], [A @ x.data], AdamState(), 1e-3)
    assert f(x.data) < before


def test_adam_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        adam_step({"w": Tensor(np.zeros(3))}, {"w": np.zeros(4)}, AdamState(), 0.1)


# --- history -----------------------------------------------------------------------------

def test_history_csv_roundtrip(tmp_path):
    h = History()
    h.append(0, 0.0, 1.2345678901234567, float("nan"), float("nan"))
    h.append(1, 0.002, 0.5, 0.25, 0.875)
    text = h.to_csv(tmp_path / "h.csv")
    assert text.splitlines()[0] == "epoch,lr,train_loss,eval_loss,eval_accuracy"
    back = History.from_csv(tmp_path / "h.csv")
    assert back.rows[1] == h.rows[1] and back.rows[0][2] == h.rows[0][2]
    assert back.to_csv() == text


# --- fit -------------------------------------------------------------------------------------

def tiny_data(n=24, seed=0):
    r = np.random.default_rng(seed)
    labels = r.integers(0, 3, n)
    pixels = np.zeros((n, 16, 16), np.float32)
    for i, y in enumerate(labels):
        pixels[i, 4 * y:4 * y + 5] = 1  # class-dependent stripe
    pixels += (r.random(pixels.shape) > 0.95)
    meta = r.random((n, 2)).astype(np.float32)
    return np.clip(pixels, 0, 1), meta, labels


@pytest.mark.parametrize("fusion", ["sacc", "concat", "cca"])
def test_fit_deterministic(fusion):
    cfg = TrainConfig(epochs=3, warmup_steps=1, batch_size=8, fusion=fusion, base_lr=0.005)
    data = tiny_data(40) if fusion == "cca" else tiny_data()
    a, ha = fit_arrays(data, data, cfg, num_classes=3, arch=TINY)
    b, hb = fit_arrays(data, data, cfg, num_classes=3, arch=TINY)
    assert ha.to_csv() == hb.to_csv()
    assert a.checksum() == b.checksum()
    c, _ = fit_arrays(data, data, TrainConfig(**{**cfg.to_dict(), "seed": 1}), num_classes=3, arch=TINY)
    assert c.checksum() != a.checksum()


def test_fit_history_lr_column():
    cfg = TrainConfig(epochs=4, warmup_steps=2, batch_size=8)
    _, h = fit_arrays(tiny_data(), None, cfg, num_classes=3, arch=TINY)
    assert h.column("epoch") == [0, 1, 2, 3]
    assert h.column("lr") == [lr_at(t, cfg) for t in range(4)]
    assert all(math.isnan(x) for x in h.column("eval_loss"))


def test_fit_learns_tiny_problem():
    data = tiny_data(48)
    cfg = TrainConfig(epochs=15, warmup_steps=0, batch_size=8, base_lr=0.01, dropout_rates=(0, 0))
    _, h = fit_arrays(data, data, cfg, num_classes=3, arch=TINY)
    loss = h.column("train_loss")
    assert loss[-1] < loss[0]
    assert h.column("eval_accuracy")[-1] >= 0.9


def test_fit_empty():
    with pytest.raises(EmptyDataset):
        fit(None)
    with pytest.raises(EmptyDataset):
        fit_arrays((np.zeros((0, 16, 16)), np.zeros((0, 2)), np.zeros(0, int)), num_classes=3, arch=TINY)


@pytest.mark.slow
def test_fit_loss_decreases_on_500_beats(tmp_path):
    from synthetic import make_corpus
    stems = make_corpus(str(tmp_path), records=2, beats_per_record=250, seed=11)
    beats = [b for s in stems for b in preprocess_record(load_record(s))]
    assert len(beats) == 500
    _, h = fit(split(beats), TrainConfig(epochs=6, warmup_steps=0))
    loss = h.column("train_loss")
    assert loss[5] < loss[0]


# --- checkpoints ---------------------------------------------------------------------------------

@pytest.mark.parametrize("fusion", ["sacc", "concat", "cca"])
def test_checkpoint_roundtrip(tmp_path, fusion):
    p = build(10, fusion, Rng(3))
    if p.buffers:
        r = np.random.default_rng(0)
        for k in p.buffers:
            p.buffers[k] = r.normal(size=p.buffers[k].shape).astype(np.float32)
    cfg = TrainConfig(fusion=fusion)
    save_checkpoint(p, cfg, tmp_path / "m.ckpt", extra={"note": 1})
    q, cfg2 = load_checkpoint(tmp_path / "m.ckpt")
    assert cfg2 == cfg and q.class_names == p.class_names
    assert q.names() == p.names()
    for n, t in p.items():
        assert np.array_equal(t.data, q[n].data)
    for k in p.buffers:
        assert np.array_equal(p.buffers[k], q.buffers[k])
    assert q.checksum() == p.checksum()
    meta, _ = read_checkpoint_metadata(tmp_path / "m.ckpt")
    assert meta["extra"] == {"note": 1}


def test_checkpoint_layout(tmp_path):
    p = build(3, "concat", Rng(0), TINY)
    save_checkpoint(p, None, tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:5] == b"RECG2" and int.from_bytes(raw[5:9], "little") == 1
    n = int.from_bytes(raw[9:17], "little")
    payload = np.frombuffer(raw[17 + n:], "<f4")
    first = p.names()[0]
    assert np.array_equal(payload[:p[first].size], p[first].data.ravel())
    assert payload.size == sum(t.size for _, t in p.items())


def test_checkpoint_bad_magic(tmp_path):
    p = build(3, "sacc", Rng(0), TINY)
    save_checkpoint(p, None, tmp_path / "m.ckpt")
    raw = bytearray((tmp_path / "m.ckpt").read_bytes())
    raw[0] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    with pytest.raises(VersionMismatch):
        load_checkpoint(tmp_path / "bad.ckpt")
    raw[0] ^= 0xFF
    raw[5] = 9  # future version
    (tmp_path / "v9.ckpt").write_bytes(bytes(raw))
    with pytest.raises(VersionMismatch):
        load_checkpoint(tmp_path / "v9.ckpt")


def test_checkpoint_registry_mismatch(tmp_path):
    save_checkpoint(build(10, "sacc", Rng(0)), None, tmp_path / "ten.ckpt")
    with pytest.raises(RegistryMismatch):
        load_checkpoint(tmp_path / "ten.ckpt", expect_classes=3)
    with pytest.raises(RegistryMismatch):
        load_checkpoint(tmp_path / "ten.ckpt", expect_fusion="concat")
    load_checkpoint(tmp_path / "ten.ckpt", expect_classes=10, expect_fusion="sacc")


def test_checkpoint_truncated_payload(tmp_path):
    save_checkpoint(build(3, "sacc", Rng(0), TINY), None, tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(raw[:-4])
    with pytest.raises(RegistryMismatch):
        load_checkpoint(tmp_path / "cut.ckpt")


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "nope.ckpt")
