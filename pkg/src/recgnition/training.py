"""Adam + cosine-warmup training loop, loss, history log and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cca import cca_fit
from .errors import EmptyDataset, IndexOutOfRange, RegistryMismatch, ShapeMismatch, VersionMismatch
from .model import ArchConfig, ModelParams, build, forward, normalize_fusion, param_shapes, buffer_shapes
from .preprocess import DatasetSplit, get_scheme
from .tensor import Rng, Tape, Tensor

log = logging.getLogger(__name__)

LOSS_FLOOR = 1e-12
CHECKPOINT_MAGIC = b"RECG2"
CHECKPOINT_VERSION = 1
HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "eval_loss", "eval_accuracy")

# independent streams derived from the one user seed
_SHUFFLE_STREAM = 0x5348
_DROPOUT_STREAM = 0x4450


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 40
    base_lr: float = 0.01
    warmup_steps: int = 5
    num_cycles: float = 0.5
    seed: int = 257
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    dropout_rates: tuple = (0.25, 0.1)
    fusion: str = "sacc"
    scheme: str = "mitbih10"
    cca_ridge: float = 1e-4
    eval_batch_size: int = 64

    def __post_init__(self):
        self.dropout_rates = tuple(float(r) for r in self.dropout_rates)
        self.fusion = normalize_fusion(self.fusion)
        self.validate()

    def validate(self):
        if int(self.batch_size) < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be > 0")
        if int(self.epochs) < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= int(self.warmup_steps) < int(self.epochs):
            raise ValueError(f"warmup_steps ({self.warmup_steps}) must be in [0, epochs={self.epochs})")
        if len(self.dropout_rates) != 2 or not all(0 <= r < 1 for r in self.dropout_rates):
            raise ValueError("dropout_rates must be two values in [0, 1)")
        get_scheme(self.scheme)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["dropout_rates"] = list(self.dropout_rates)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# loss

def _targets(targets, num_classes):
    t = np.atleast_1d(np.asarray(targets))
    if t.dtype.kind not in "iu" or np.any(t < 0) or np.any(t >= num_classes):
        raise IndexOutOfRange(f"targets must be class indices in [0, {num_classes})")
    return t.astype(np.int64)


def cross_entropy(probabilities, targets) -> float:
    """Mean of ``-log(max(p_target, 1e-12))`` over the batch."""
    p = np.asarray(probabilities.data if isinstance(probabilities, Tensor) else probabilities, dtype=np.float64)
    p = np.atleast_2d(p)
    t = _targets(targets, p.shape[-1])
    if t.size != p.shape[0]:
        raise ShapeMismatch(f"{t.size} targets for {p.shape[0]} rows")
    picked = p[np.arange(t.size), t]
    return float(np.mean(-np.log(np.maximum(picked, LOSS_FLOOR))))


def softmax_cross_entropy(logits, targets):
    """Differentiable batch loss from logits.

    The value equals :func:`cross_entropy` of ``softmax(logits)`` (floor
    included); the gradient is the usual ``(p - onehot) / B``, which stays
    finite even where the floor is active.
    """
    logits = T.as_tensor(logits)
    z = np.atleast_2d(logits.data).astype(np.float64)
    t = _targets(targets, z.shape[-1])
    if t.size != z.shape[0]:
        raise ShapeMismatch(f"{t.size} targets for {z.shape[0]} rows")
    z = z - z.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    rows = np.arange(t.size)
    value = np.mean(-np.maximum(logp[rows, t], math.log(LOSS_FLOOR)))

    def grad_fn(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        gz = (p * (float(g) / t.size)).astype(logits.dtype)
        return (gz.reshape(logits.shape),)

    return T.record(np.asarray(value, dtype=logits.dtype), (logits,), grad_fn)


# ---------------------------------------------------------------------------
# schedule and optimizer

def lr_at(t, config: TrainConfig) -> float:
    """Epoch-indexed linear warmup followed by a cosine decay to zero at ``epochs``."""
    w, total, lr = int(config.warmup_steps), int(config.epochs), float(config.base_lr)
    if t < w:
        return lr * t / max(5, w)
    progress = (t - w) / max(1, total - w)
    return lr * 0.5 * (1.0 + math.cos(math.pi * config.num_cycles * 2.0 * progress))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        items = _named(params)
        return cls({n: np.zeros_like(p.data) for n, p in items}, {n: np.zeros_like(p.data) for n, p in items}, 0)


def _named(params):
    if isinstance(params, ModelParams):
        return list(params.items())
    if isinstance(params, dict):
        return list(params.items())
    return [(str(i), p) for i, p in enumerate(params)]


def adam_step(params, grads, state: AdamState, lr, config: TrainConfig = None):
    """One in-place Adam update; ``grads`` maps names (or positions) to arrays.

    Missing gradients count as zero. Returns ``(params, state)``.
    """
    b1 = config.beta1 if config else 0.9
    b2 = config.beta2 if config else 0.999
    eps = config.epsilon if config else 1e-8
    items = _named(params)
    if isinstance(grads, (list, tuple)):
        grads = {n: g for (n, _), g in zip(items, grads)}
    if not state.m:
        fresh = AdamState.zeros_like(params)
        state.m, state.v = fresh.m, fresh.v
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in items:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g)
        if g.shape != p.data.shape or state.m[name].shape != p.data.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
    return params, state


# ---------------------------------------------------------------------------
# history

@dataclass
class History:
    rows: list = field(default_factory=list)

    def append(self, epoch, lr, train_loss, eval_loss, eval_accuracy):
        self.rows.append((int(epoch), float(lr), float(train_loss), float(eval_loss), float(eval_accuracy)))

    def column(self, name):
        i = HISTORY_COLUMNS.index(name)
        return [r[i] for r in self.rows]

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in self.rows:
            w.writerow([r[0]] + [repr(x) for x in r[1:]])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != HISTORY_COLUMNS:
                raise ValueError(f"unexpected history header {header}")
            h = cls()
            for r in reader:
                h.append(int(r[0]), *(float(x) for x in r[1:]))
        return h


# ---------------------------------------------------------------------------
# batched inference

def _images(pixels):
    p = np.asarray(pixels, dtype=np.float32)
    return p[..., None] if p.ndim == 3 else p


def infer(params, pixels, meta, batch_size=64, keep=("probabilities",)):
    """Inference-mode forward over a dataset; returns a dict of numpy arrays."""
    imgs = _images(pixels)
    meta = np.asarray(meta, dtype=params.dtype)
    chunks = {k: [] for k in keep}
    for s in range(0, imgs.shape[0], batch_size):
        out = forward(imgs[s:s + batch_size].astype(params.dtype, copy=False), meta[s:s + batch_size], params)
        for k in keep:
            chunks[k].append(getattr(out, k).data)
    return {k: (np.concatenate(v) if v else np.zeros((0,))) for k, v in chunks.items()}


def refit_cca(params, pixels, meta, ridge=1e-4, batch_size=64):
    """Fit the classical-CCA projection buffers on (trunk, meta) embeddings."""
    emb = infer(params, pixels, meta, batch_size, keep=("f_img", "f_pat"))
    res = cca_fit(emb["f_img"], emb["f_pat"], ridge=ridge, k=params.arch.cca_k)
    dt = params.dtype
    params.buffers["cca.x_mean"] = res.x_mean.astype(dt)
    params.buffers["cca.y_mean"] = res.y_mean.astype(dt)
    params.buffers["cca.x_weights"] = res.x_weights.astype(dt)
    params.buffers["cca.y_weights"] = res.y_weights.astype(dt)
    return res


# ---------------------------------------------------------------------------
# training loop

def split_arrays(items):
    """(pixels [n,H,W], meta [n,2], labels [n]) from a list of BeatImage."""
    if not items:
        return None
    pixels = np.stack([b.pixels for b in items]).astype(np.float32)
    meta = np.stack([b.meta_vector for b in items]).astype(np.float32)
    labels = np.array([b.label for b in items], dtype=np.int64)
    return pixels, meta, labels


def train_step(params, images, meta, labels, state, lr, config, dropout_rng):
    for t in params.trainable():
        t.grad = None
    with Tape() as tape:
        out = forward(images, meta, params, training=True, rng=dropout_rng)
        loss = softmax_cross_entropy(out.logits, labels)
    tape.backward(loss)
    grads = {n: t.grad for n, t in params.items()}
    adam_step(params, grads, state, lr, config)
    return float(loss.data)


def evaluate_loss(params, pixels, meta, labels, batch_size=64):
    if pixels is None or len(labels) == 0:
        return float("nan"), float("nan")
    probs = infer(params, pixels, meta, batch_size)["probabilities"]
    return cross_entropy(probs, labels), float(np.mean(probs.argmax(-1) == labels))


def fit_arrays(train, evaluation=None, config: TrainConfig = None, num_classes=None, arch=None,
               class_names=None, params=None, on_epoch=None):
    """Train on ``train = (pixels, meta, labels)``; ``evaluation`` likewise or None."""
    config = config or TrainConfig()
    pixels, meta, labels = train
    n = len(labels)
    if n == 0:
        raise EmptyDataset("training set is empty")
    scheme = get_scheme(config.scheme)
    num_classes = num_classes or scheme.num_classes
    class_names = class_names or list(scheme.class_names)[:num_classes]
    arch = dataclasses.replace(arch or ArchConfig(), dropout_rates=tuple(config.dropout_rates))
    if params is None:
        params = build(num_classes, config.fusion, Rng(config.seed), arch, class_names=class_names)
    images = _images(pixels)
    meta = np.asarray(meta, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    shuffle_rng = Rng(config.seed ^ _SHUFFLE_STREAM)
    dropout_rng = Rng(config.seed ^ _DROPOUT_STREAM)
    state = AdamState.zeros_like(params)
    history = History()
    bs = int(config.batch_size)
    for epoch in range(int(config.epochs)):
        lr = lr_at(epoch, config)
        if params.fusion == "cca":
            refit_cca(params, images, meta, config.cca_ridge, config.eval_batch_size)
        order = shuffle_rng.permutation(n)
        total = 0.0
        for s in range(0, n, bs):
            idx = order[s:s + bs]
            total += train_step(params, images[idx], meta[idx], labels[idx], state, lr, config, dropout_rng) * idx.size
        ev = evaluation if evaluation is not None else (None, None, [])
        eval_loss, eval_acc = evaluate_loss(params, *ev, batch_size=config.eval_batch_size)
        history.append(epoch, lr, total / n, eval_loss, eval_acc)
        log.info("epoch %d lr %.6g train_loss %.5f eval_loss %.5f eval_acc %.4f", epoch, lr, total / n, eval_loss, eval_acc)
        if on_epoch is not None:
            on_epoch(epoch, history.rows[-1])
    return params, history


def fit(split: DatasetSplit, config: TrainConfig = None, arch=None, **kwargs):
    """Train from a :class:`DatasetSplit` of BeatImage lists."""
    if split is None or not split.train:
        raise EmptyDataset("training split is empty")
    return fit_arrays(split_arrays(split.train), split_arrays(split.test), config, arch=arch, **kwargs)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(params: ModelParams, config: TrainConfig, path, extra=None):
    meta = {
        "arch": params.arch.to_dict(),
        "num_classes": params.num_classes,
        "fusion": params.fusion,
        "class_names": params.class_names,
        "config": config.to_dict() if config is not None else None,
        "registry": params.manifest(),
    }
    if extra:
        meta["extra"] = extra
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in params.items():
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        for _, b in params.buffers.items():
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def read_checkpoint_metadata(path):
    with open(path, "rb") as fh:
        head = fh.read(17)
        if len(head) < 17 or head[:5] != CHECKPOINT_MAGIC:
            raise VersionMismatch(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", head[5:9])
        if version != CHECKPOINT_VERSION:
            raise VersionMismatch(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        (length,) = struct.unpack("<Q", head[9:17])
        blob = fh.read(length)
        if len(blob) != length:
            raise VersionMismatch(f"{path}: truncated metadata")
        return json.loads(blob.decode("utf-8")), fh.read()


def load_checkpoint(path, expect_classes=None, expect_fusion=None):
    """Returns ``(params, config)``.

    ``expect_classes`` (class-name list or count) and ``expect_fusion`` guard
    against loading a model trained for a different label scheme or fusion.
    """
    meta, payload = read_checkpoint_metadata(path)
    arch = ArchConfig.from_dict(meta["arch"])
    num_classes, fusion = int(meta["num_classes"]), meta["fusion"]
    if expect_classes is not None:
        want = expect_classes if isinstance(expect_classes, int) else len(expect_classes)
        if want != num_classes or (not isinstance(expect_classes, int)
                                   and list(expect_classes) != list(meta["class_names"])):
            raise RegistryMismatch(f"checkpoint has classes {meta['class_names']}, expected {expect_classes}")
    if expect_fusion is not None and normalize_fusion(expect_fusion) != fusion:
        raise RegistryMismatch(f"checkpoint fusion {fusion!r}, expected {expect_fusion!r}")
    expected = [(n, list(s)) for n, s, _ in param_shapes(arch, num_classes, fusion)]
    expected += [(n, list(s)) for n, s in buffer_shapes(arch, fusion)]
    registry = [(n, list(s)) for n, s in meta["registry"]]
    if registry != expected:
        raise RegistryMismatch("checkpoint registry does not match its declared architecture")
    sizes = [int(np.prod(s)) for _, s in registry]
    if len(payload) != 4 * sum(sizes):
        raise RegistryMismatch(f"payload holds {len(payload)} bytes, registry needs {4 * sum(sizes)}")
    flat = np.frombuffer(payload, dtype="<f4")
    arrays, off = {}, 0
    for (name, shape), size in zip(registry, sizes):
        arrays[name] = flat[off:off + size].reshape(shape).astype(np.float32)
        off += size
    n_params = len(param_shapes(arch, num_classes, fusion))
    tensors = {n: Tensor(arrays[n], requires_grad=True, name=n) for n, _ in registry[:n_params]}
    buffers = {n: arrays[n] for n, _ in registry[n_params:]}
    params = ModelParams(arch, num_classes, fusion, tensors, buffers, meta["class_names"])
    config = TrainConfig.from_dict(meta["config"]) if meta.get("config") else None
    return params, config
