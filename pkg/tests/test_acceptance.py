"""Acceptance suite: one test per criterion, named ``test_criterion_<n>_*``.

A summary line per criterion is printed at the end of the pytest run (see
``conftest.py``). Criterion 7 trains the full-size network twice and takes
several minutes on a laptop CPU.
"""
import json
import math
import os
import time
import warnings

import numpy as np
import pytest

import desk
from conftest import MITDB_DIR, mitdb_record
from recgnition import tensor as T
from recgnition.cca import cca_fit
from recgnition.cli import main as cli_main
from recgnition.evaluation import confusion, precision_recall_f1, roc_auc_ovr
from recgnition.model import build, count_flops, count_params, format_budget, forward
from recgnition.tensor import Rng, Tensor, grad_check
from recgnition.training import AdamState, TrainConfig, adam_step, load_checkpoint, lr_at
from recgnition.wfdb_io import decode_format212, encode_format212, load_record
from synthetic import make_corpus
from test_model import AUDIT, kink_free_instance, relu_margin
from test_tensor import naive_conv, naive_depthwise, naive_pointwise

GOLDEN = os.path.join(os.path.dirname(__file__), "golden")


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def away_from_zero(r, shape, lo=0.1):
    return r.choice([-1.0, 1.0], shape) * r.uniform(lo, 1.0, shape)


def layer_cases(r):
    """(name, params, loss builder) for every layer type, each off its kinks."""
    proj = r.normal(size=256)

    def project(y):
        flat = T.flatten(y, batched=False)
        return T.sum_all(T.hadamard(flat, Tensor(proj[:flat.size])))

    x = t64(r.normal(size=(6, 6, 2)))
    cw, cb = t64(r.normal(size=(3, 3, 2, 3))), t64(r.normal(size=3))
    yield "conv2d", [x, cw, cb], lambda: project(T.conv2d(x, cw, cb, 2))
    dw = t64(r.normal(size=(3, 3, 2)))
    yield "depthwise", [x, dw], lambda: project(T.depthwise_conv2d(x, dw, 2))
    pw, pb = t64(r.normal(size=(2, 4))), t64(r.normal(size=4))
    yield "pointwise", [x, pw, pb], lambda: project(T.pointwise_conv(x, pw, pb))
    v, dwt, dbt = t64(r.normal(size=5)), t64(r.normal(size=(5, 3))), t64(r.normal(size=3))
    yield "dense", [v, dwt, dbt], lambda: project(T.dense(v, dwt, dbt))
    rx = t64(away_from_zero(r, 12))
    yield "relu", [rx], lambda: project(T.relu(rx))
    mx = t64(r.permutation(32).reshape(4, 4, 2) * 0.1)
    yield "maxpool", [mx], lambda: project(T.maxpool2d(mx))
    sx = t64(r.normal(size=6))
    yield "softmax", [sx], lambda: project(T.softmax(sx))
    a, b = t64(r.normal(size=5)), t64(r.normal(size=5))
    yield "hadamard", [a, b], lambda: project(T.hadamard(a, b))
    c1, c2 = t64(r.normal(size=3)), t64(r.normal(size=4))
    yield "concat", [c1, c2], lambda: project(T.concat(c1, c2))
    dx = t64(r.normal(size=10))
    yield "dropout", [dx], lambda: project(T.dropout(dx, 0.25, Rng(4), True))


def test_criterion_1_gradient_correctness(monkeypatch):
    """Gradient correctness: every layer type and the shrunken full network, rel. err <= 1e-4 at eps 1e-3."""
    start = time.time()
    errors = {}
    for name, params, loss in layer_cases(np.random.default_rng(0)):
        errors[name] = grad_check(loss, params, eps=1e-3)
    for fusion in ("sacc", "concat", "cca"):
        p, x, m = kink_free_instance(fusion)
        onehot = np.zeros((2, 3))
        onehot[[0, 1], [0, 2]] = 1

        def loss():
            return T.sum_all(T.hadamard(forward(x, m, p).probabilities, Tensor(onehot)))

        assert relu_margin(loss, monkeypatch) >= 0.05
        errors[f"network[{fusion}]"] = grad_check(loss, dict(p.items()), eps=1e-3)
    elapsed = time.time() - start
    print("max relative error:", {k: f"{v:.1e}" for k, v in errors.items()}, f"({elapsed:.0f}s)")
    assert max(errors.values()) <= 1e-4
    assert elapsed < 60


def test_criterion_2_kernel_correctness():
    """Kernel correctness: conv2d / depthwise / pointwise agree with naive loops to 1e-6 on >= 50 shapes each."""
    start = time.time()
    r = np.random.default_rng(2024)
    worst = 0.0
    for i in range(50):
        H, W, C, F = (int(v) for v in r.integers(3, 10, 2).tolist() + r.integers(1, 5, 2).tolist())
        K = min(int(r.choice([1, 3, 5])), H, W)
        stride = int(r.integers(1, 3))
        padding = "same" if i % 2 == 0 else "valid"
        x = r.normal(size=(H, W, C))
        w, b = r.normal(size=(K, K, C, F)), r.normal(size=F)
        worst = max(worst, np.abs(T.conv2d(x, w, b, stride, padding).data - naive_conv(x, w, b, stride, padding)).max())
        wd = r.normal(size=(K, K, C))
        worst = max(worst, np.abs(T.depthwise_conv2d(x, wd, stride, padding).data
                                  - naive_depthwise(x, wd, stride, padding)).max())
        wp = r.normal(size=(C, F))
        worst = max(worst, np.abs(T.pointwise_conv(x, wp, b).data - naive_pointwise(x, wp, b)).max())
    print(f"max abs deviation {worst:.2e}")
    assert worst <= 1e-6
    assert time.time() - start < 60


def test_criterion_3_budget():
    """Budget: params in [430k, 470k], FLOPs (2 per MAC) in [74.4M, 91.0M], audit table matches the hand sheet."""
    import csv
    p = build(10, "sacc", Rng(257))
    rep = count_flops(p)
    table = format_budget(rep)
    print(table)
    assert 430_000 <= count_params(p) <= 470_000
    assert 74_400_000 <= rep.total_flops <= 91_000_000
    assert rep.total_flops == 2 * rep.total_macs
    with open(AUDIT) as fh:
        audit = list(csv.DictReader(fh))
    assert [(r["layer"], int(r["macs"]), int(r["params"])) for r in audit] == \
        [(l.name, l.macs, l.params) for l in rep.layers]
    assert all(l.name in table for l in rep.layers)


def test_criterion_4_parser_conformance():
    """Parser conformance: exact 212 round trip on 1e5 samples; record 100 matches the reference reader."""
    s = np.random.default_rng(4).integers(-2048, 2048, size=(100_000, 1))
    raw = encode_format212(s)
    assert np.array_equal(decode_format212(raw, 100_000, 1), s)
    assert encode_format212(decode_format212(raw, 100_000, 1)) == raw
    stem = mitdb_record("100")
    if stem is None:
        warnings.warn(f"MIT-BIH record 100 not found under {MITDB_DIR}; reference comparison skipped")
        pytest.skip("record 100 not available (set RECG_MITDB_DIR)")
    with open(os.path.join(GOLDEN, "mitdb_100.json")) as fh:
        gold = json.load(fh)
    rec = load_record(stem)
    assert rec.samples.shape[0] == gold["num_samples"]
    assert len(rec.annotations) == gold["beat_annotation_count"]
    assert rec.samples[:20].tolist() == gold["first_samples"]


def test_criterion_5_cca_oracle():
    """CCA oracle: Y = XA + 0.01 noise gives top rho >= 0.99; independent X, Y give max rho < 0.1."""
    r = np.random.default_rng(5)
    X = r.normal(size=(5000, 4))
    A = r.normal(size=(4, 4))
    assert abs(np.linalg.det(A)) > 1e-3
    top = cca_fit(X, X @ A + 0.01 * r.normal(size=(5000, 4))).correlations[0]
    indep = cca_fit(r.normal(size=(5000, 4)), r.normal(size=(5000, 4))).correlations.max()
    print(f"related top rho {top:.6f}; independent max rho {indep:.4f}")
    assert top >= 0.99 and indep < 0.1


def test_criterion_6_schedule_and_optimizer():
    """Schedule/optimizer: lr_at analytic points exact; Adam zero-gradient identity; scalar quadratic convergence."""
    c = TrainConfig()
    assert lr_at(0, c) == 0.0
    assert lr_at(c.warmup_steps, c) == c.base_lr
    assert lr_at(c.epochs, c) == pytest.approx(0.0, abs=1e-18)
    p = {"w": Tensor(np.array([0.3, -1.2]))}
    state = AdamState.zeros_like(p)
    adam_step(p, {"w": np.array([0.5, 0.1])}, state, 0.1)
    state.m["w"][:] = 0
    before = p["w"].data.copy()
    adam_step(p, {"w": np.zeros(2)}, state, 0.1)
    assert np.array_equal(p["w"].data, before)
    theta = [Tensor(np.array(1.0))]
    st = AdamState()
    best = math.inf
    for _ in range(200):
        adam_step(theta, [theta[0].data.copy()], st, 0.05)
        best = min(best, abs(float(theta[0].data)))
    assert best < 0.05


def test_criterion_7_desk_training_surrogate(tmp_path):
    """Desk-scale training (synthetic five-class surrogate): accuracy >= 90%, SACC macro-F1 >= concat - 1pt, <= 20 min."""
    start = time.time()
    beats = desk.synthetic_beats(str(tmp_path))
    assert len(beats) == desk.TOTAL_BEATS
    res = desk.run(beats)
    for fusion, (acc, f1, secs) in res.items():
        print(f"{fusion}: accuracy {acc:.4f} macro-F1 {f1:.4f} ({secs:.0f}s)")
    assert res["sacc"][0] >= 0.90
    assert res["sacc"][1] >= res["concat"][1] - 0.01
    assert time.time() - start <= 20 * 60


def test_criterion_7_desk_training_mitbih():
    """Desk-scale training on MIT-BIH beats (needs records holding 400+ beats of each of N, L, R, V, /)."""
    beats = desk.balanced_beats(desk.load_beats(MITDB_DIR)) if os.path.isdir(MITDB_DIR) else None
    if beats is None:
        warnings.warn(f"{MITDB_DIR} lacks 400 beats of each of N, L, R, V, /; real-data variant skipped")
        pytest.skip("MIT-BIH records with all five classes not available")
    res = desk.run(beats)
    assert res["sacc"][0] >= 0.90
    assert res["sacc"][1] >= res["concat"][1] - 0.01


@pytest.mark.full_scale
@pytest.mark.skipif(not os.environ.get("RECG_FULL_SCALE"), reason="set RECG_FULL_SCALE=1 for the 40-epoch run")
def test_criterion_7_full_scale_optional():
    """Optional long run: full MIT-BIH, ten classes, 40 epochs; expected accuracy >= 97%."""
    from recgnition.preprocess import split
    from recgnition.training import fit, infer, split_arrays
    beats = desk.load_beats(MITDB_DIR)
    sp = split(beats)
    params, _ = fit(sp, TrainConfig())
    px, meta, labels = split_arrays(sp.test)
    pred = infer(params, px, meta)["probabilities"].argmax(-1)
    acc = float(np.mean(pred == labels))
    print(f"ten-class accuracy {acc:.4f}")
    assert acc >= 0.97


def end_to_end(root, records):
    base = ["--data-dir", records, "--cache-dir", str(root / "cache"), "--out", str(root / "run"), "--seed", "257"]
    assert cli_main(["preprocess", *base]) == 0
    assert cli_main(["train", *base, "--epochs", "2"]) == 0
    assert cli_main(["eval", *base]) == 0
    params, _ = load_checkpoint(str(root / "run" / "model.ckpt"))
    return ((root / "run" / "history.csv").read_bytes(), params.checksum(),
            (root / "run" / "report.json").read_bytes())


def test_criterion_8_determinism(tmp_path):
    """Determinism: two preprocess -> 2-epoch train -> eval runs at seed 257 give identical history and checksums."""
    start = time.time()
    records = tmp_path / "records"
    make_corpus(str(records), records=2, beats_per_record=60, seed=8)
    a = end_to_end(tmp_path / "a", str(records))
    b = end_to_end(tmp_path / "b", str(records))
    assert a[0] == b[0] and a[0].count(b"\n") == 3
    assert a[1] == b[1]
    assert json.loads(a[2])["accuracy"] == json.loads(b[2])["accuracy"]
    assert time.time() - start <= 10 * 60


def test_criterion_9_metrics():
    """Metric correctness: hand-computed 4-sample P/R/F1/accuracy/AUC fixtures and Monte Carlo AUC ~ 0.5."""
    labels, preds = [0, 0, 1, 1], [0, 1, 1, 1]
    m = precision_recall_f1(confusion(preds, labels, 2))
    assert np.allclose(m.precision, [1.0, 2 / 3])
    assert np.allclose(m.recall, [0.5, 1.0])
    assert np.allclose(m.f1, [2 / 3, 0.8])
    assert m.accuracy == 0.75
    assert roc_auc_ovr([0.1, 0.6, 0.4, 0.9], labels, 1) == 0.75
    assert roc_auc_ovr([0.1, 0.5, 0.5, 0.9], labels, 1) == 0.875
    r = np.random.default_rng(9)
    assert abs(roc_auc_ovr(r.random(10_000), r.integers(0, 2, 10_000), 1) - 0.5) <= 0.02
