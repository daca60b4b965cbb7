"""Metrics, embedding projections, saliency and feature-map exports.

Plotting is left to the user; everything here produces arrays or data files
(report JSON, embedding CSV plus binary sidecar, PGM images).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .errors import DegenerateClass, IndexOutOfRange, ShapeMismatch
from .model import dpn_branches, ecg_trunk_forward, forward
from .tensor import Tape, Tensor

SALIENCY_NOTE = "input-gradient saliency; an approximation of activation maps, not Grad-CAM"


# ---------------------------------------------------------------------------
# confusion / P R F1

@dataclass
class ConfusionMatrix:
    matrix: np.ndarray  # [label, prediction]
    class_names: list

    @property
    def total(self):
        return int(self.matrix.sum())

    @property
    def supports(self):
        return self.matrix.sum(1)

    def to_dict(self):
        return {"class_names": list(self.class_names), "matrix": self.matrix.tolist()}


def confusion(predictions, labels, num_classes, class_names=None) -> ConfusionMatrix:
    p = np.asarray(predictions, dtype=np.int64).ravel()
    y = np.asarray(labels, dtype=np.int64).ravel()
    if p.size != y.size:
        raise ShapeMismatch(f"{p.size} predictions vs {y.size} labels")
    if p.size and (min(p.min(), y.min()) < 0 or max(p.max(), y.max()) >= num_classes):
        raise IndexOutOfRange(f"class index outside [0, {num_classes})")
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (y, p), 1)
    names = list(class_names) if class_names is not None else [str(i) for i in range(num_classes)]
    return ConfusionMatrix(m, names)


@dataclass
class ClassMetrics:
    class_names: list
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    flags: list = field(default_factory=list)

    def to_dict(self):
        per_class = {
            name: {"precision": float(self.precision[i]), "recall": float(self.recall[i]),
                   "f1": float(self.f1[i]), "support": int(self.support[i])}
            for i, name in enumerate(self.class_names)
        }
        return {"per_class": per_class, "accuracy": self.accuracy,
                "macro": {"precision": self.macro_precision, "recall": self.macro_recall, "f1": self.macro_f1},
                "flags": list(self.flags)}


def _ratio(num, den):
    ok = den > 0
    return np.where(ok, num / np.where(ok, den, 1), 0.0), ~ok


def precision_recall_f1(cm: ConfusionMatrix) -> ClassMetrics:
    """Per-class P/R/F1; zero denominators give 0 and a flag.

    Macro averages run over the classes that occur in the labels or the
    predictions, so absent classes do not drag them down.
    """
    m = cm.matrix.astype(np.float64)
    tp = np.diag(m)
    predicted = m.sum(0)
    support = m.sum(1)
    precision, p_bad = _ratio(tp, predicted)
    recall, r_bad = _ratio(tp, support)
    f1, f_bad = _ratio(2 * precision * recall, precision + recall)
    flags = []
    for i, name in enumerate(cm.class_names):
        for what, bad in (("precision", p_bad), ("recall", r_bad), ("f1", f_bad)):
            if bad[i]:
                flags.append(f"{name}: {what} undefined (0/0), reported as 0")
    present = (support + predicted) > 0
    total = m.sum()
    acc = float(tp.sum() / total) if total else 0.0

    def macro(v):
        return float(v[present].mean()) if present.any() else 0.0

    return ClassMetrics(list(cm.class_names), precision, recall, f1, support.astype(np.int64), acc,
                        macro(precision), macro(recall), macro(f1), flags)


def roc_auc_ovr(scores, labels, c) -> float:
    """One-vs-rest AUC for class ``c`` via the midrank Mann-Whitney statistic."""
    s = np.asarray(scores, dtype=np.float64)
    s = s[:, c] if s.ndim == 2 else s
    pos = np.asarray(labels).ravel() == c
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClass(f"class {c} needs both positives and negatives (got {n_pos}/{n_neg})")
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_per_class(probabilities, labels, class_names):
    """AUC per class name; classes without both outcomes map to None."""
    out = {}
    for c, name in enumerate(class_names):
        try:
            out[name] = roc_auc_ovr(probabilities, labels, c)
        except DegenerateClass:
            out[name] = None
    return out


# ---------------------------------------------------------------------------
# PCA

def pca2(vectors):
    """Project onto the top two principal axes.

    Returns ``(coords [n, 2], eigenvalues [2], components [d, 2])``. Each
    component's first non-zero entry is made positive.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ShapeMismatch("pca2 needs a matrix with at least two rows")
    Xc = X - X.mean(0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")[:2]
    evals, comps = np.clip(evals[order], 0.0, None), evecs[:, order]
    if comps.shape[1] < 2:
        comps = np.pad(comps, ((0, 0), (0, 2 - comps.shape[1])))
        evals = np.pad(evals, (0, 2 - evals.size))
    for j in range(2):
        nz = np.flatnonzero(np.abs(comps[:, j]) > 1e-12)
        if nz.size and comps[nz[0], j] < 0:
            comps[:, j] *= -1
    return Xc @ comps, evals, comps


@dataclass
class EmbeddingDump:
    labels: np.ndarray
    pre_fusion: np.ndarray
    post_fusion: np.ndarray
    coords: np.ndarray
    eigenvalues: np.ndarray = None


def embedding_dump(labels, pre_fusion, post_fusion) -> EmbeddingDump:
    coords, evals, _ = pca2(post_fusion)
    return EmbeddingDump(np.asarray(labels), np.asarray(pre_fusion), np.asarray(post_fusion), coords, evals)


EMBED_MAGIC = b"RECGEMB1"


def write_embeddings(dump: EmbeddingDump, csv_path, sidecar_path=None):
    """CSV ``label,pc1,pc2``; optional sidecar of full vectors.

    Sidecar layout (little-endian): magic, u32 n, u32 d_pre, u32 d_post, then
    n i32 labels, n*d_pre f32, n*d_post f32 (row-major).
    """
    with open(csv_path, "w") as fh:
        fh.write("label,pc1,pc2\n")
        for lab, (a, b) in zip(dump.labels, dump.coords):
            fh.write(f"{int(lab)},{a!r},{b!r}\n")
    if sidecar_path:
        n, dp = dump.pre_fusion.shape
        dq = dump.post_fusion.shape[1]
        with open(sidecar_path, "wb") as fh:
            fh.write(EMBED_MAGIC + struct.pack("<III", n, dp, dq))
            fh.write(np.asarray(dump.labels, "<i4").tobytes())
            fh.write(np.ascontiguousarray(dump.pre_fusion, "<f4").tobytes())
            fh.write(np.ascontiguousarray(dump.post_fusion, "<f4").tobytes())


def read_embedding_sidecar(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != EMBED_MAGIC:
        raise ValueError(f"{path}: not an embedding sidecar")
    n, dp, dq = struct.unpack("<III", raw[8:20])
    off = 20
    labels = np.frombuffer(raw, "<i4", n, off)
    off += 4 * n
    pre = np.frombuffer(raw, "<f4", n * dp, off).reshape(n, dp)
    off += 4 * n * dp
    post = np.frombuffer(raw, "<f4", n * dq, off).reshape(n, dq)
    return labels, pre, post


# ---------------------------------------------------------------------------
# saliency

@dataclass
class LinearProbe:
    """Softmax-regression readout on pre-fusion features, folded to ``f @ w + b``."""
    w: np.ndarray
    b: np.ndarray

    def logits(self, f):
        return T.dense(f, Tensor(self.w), Tensor(self.b))


def fit_probe(features, labels, num_classes, steps=100, lr=0.5):
    """Full-batch gradient descent on standardised features, from zero weights."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    mu, sd = X.mean(0), X.std(0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    Z = (X - mu) / sd
    W = np.zeros((X.shape[1], num_classes))
    b = np.zeros(num_classes)
    onehot = np.eye(num_classes)[y]
    for _ in range(steps):
        s = Z @ W + b
        s -= s.max(1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(1, keepdims=True)
        g = (p - onehot) / len(y)
        W -= lr * Z.T @ g
        b -= lr * g.sum(0)
    w_eff = W / sd[:, None]
    return LinearProbe(w_eff, b - mu @ w_eff)


def _image_tensor(image, dtype):
    img = np.asarray(image, dtype=dtype)
    if img.ndim == 2:
        img = img[..., None]
    return Tensor(img.copy(), requires_grad=True)


def _normalize(g):
    m = np.abs(g[..., 0])
    top = m.max()
    return m / top if top > 0 else m


def saliency_map(image, meta_vector, params, target, probe: LinearProbe = None):
    """``|d logit_target / d pixel|`` normalized to max 1.

    With ``probe`` the logit comes from the linear probe on the image-trunk
    features alone (the pre-fusion path); otherwise from the full network.
    """
    x = _image_tensor(image, params.dtype)
    with Tape() as tape:
        if probe is None:
            logits = forward(x, np.asarray(meta_vector, params.dtype), params).logits
        else:
            logits = probe.logits(ecg_trunk_forward(x, params))
        picked = T.sum_all(T.hadamard(logits, Tensor(np.eye(logits.shape[-1], dtype=logits.dtype)[target])))
    saved = {n: t.grad for n, t in params.items()}
    tape.backward(picked)
    for n, t in params.items():
        t.grad = saved[n]
    return _normalize(x.grad)


@dataclass
class SaliencyMaps:
    before_fusion: np.ndarray
    after_fusion: np.ndarray
    target: int
    note: str = SALIENCY_NOTE


def saliency(image, meta_vector, params, target, probe: LinearProbe = None) -> SaliencyMaps:
    before = saliency_map(image, meta_vector, params, target, probe) if probe is not None else None
    return SaliencyMaps(before, saliency_map(image, meta_vector, params, target), int(target))


def feature_map_dump(image, params):
    """Post-ReLU DPN maps: ``{"conv3x3": [32, H, W], "conv5x5": [32, H, W]}``."""
    img = np.asarray(image, dtype=params.dtype)
    if img.ndim == 2:
        img = img[..., None]
    a, b = dpn_branches(img, params)
    return {"conv3x3": np.moveaxis(a.data, -1, 0), "conv5x5": np.moveaxis(b.data, -1, 0)}


def write_pgm(path, array):
    """8-bit binary PGM (P5, maxval 255); values are min-max scaled first."""
    a = np.asarray(array, dtype=np.float64)
    lo, hi = a.min(), a.max()
    scaled = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    data = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w), maxval


# ---------------------------------------------------------------------------
# report

def evaluate_predictions(probabilities, labels, class_names):
    probs = np.asarray(probabilities)
    labels = np.asarray(labels)
    cm = confusion(probs.argmax(-1), labels, len(class_names), class_names)
    metrics = precision_recall_f1(cm)
    return {
        **metrics.to_dict(),
        "auc": auc_per_class(probs, labels, class_names),
        "confusion": cm.to_dict(),
        "num_samples": int(labels.size),
    }


def write_report(path, report):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
