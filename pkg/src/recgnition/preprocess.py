"""Records -> model-ready beat images.

Pipeline per record: millivolt lead -> Hann smoothing of the whole signal
-> R-peak-centred windows -> per-beat mean removal -> 128x128 binary
polyline raster. Patient age/sex ride along as a two-number vector.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

from .errors import EmptyDataset, InvalidWindow
from .tensor import Rng
from .wfdb_io import PatientMeta

log = logging.getLogger(__name__)

DELTA_N = 128
SMOOTHING_WINDOW = 14
IMAGE_SIZE = 128
SEED = 257


# ---------------------------------------------------------------------------
# labels

@dataclass(frozen=True)
class ClassScheme:
    name: str
    symbol_to_index: dict
    class_names: tuple

    @property
    def num_classes(self):
        return len(self.class_names)

    def index(self, symbol):
        return self.symbol_to_index.get(symbol)


_MITBIH10_ORDER = ("/", "A", "F", "L", "N", "R", "V", "a", "f", "j")
MITBIH10 = ClassScheme("mitbih10", {s: i for i, s in enumerate(_MITBIH10_ORDER)}, _MITBIH10_ORDER)

_AAMI_GROUPS = {"Normal": "NLRej", "SEB": "AaJS", "VEB": "VE"}
AAMI = ClassScheme(
    "aami",
    {s: i for i, syms in enumerate(_AAMI_GROUPS.values()) for s in syms},
    tuple(_AAMI_GROUPS),
)

SCHEMES = {"mitbih10": MITBIH10, "aami": AAMI}


def get_scheme(name) -> ClassScheme:
    if isinstance(name, ClassScheme):
        return name
    try:
        return SCHEMES[name]
    except KeyError:
        raise ValueError(f"unknown class scheme {name!r}; expected one of {sorted(SCHEMES)}") from None


def map_label(symbol, scheme):
    """Class index for ``symbol``, or None when the scheme drops it."""
    return get_scheme(scheme).index(symbol)


# ---------------------------------------------------------------------------
# signal conditioning

def hann_coefficients(window_length: int) -> np.ndarray:
    """``0.5 * (1 - cos(2 pi n / N))`` for ``n = 0..N`` (N + 1 taps)."""
    n_ = int(window_length)
    if n_ < 2 or n_ % 2:
        raise InvalidWindow(f"window length must be even and >= 2, got {window_length}")
    n = np.arange(n_ + 1)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * n / n_))


def smooth(signal, window_length=SMOOTHING_WINDOW) -> np.ndarray:
    """Same-length convolution with the unit-sum Hann window, edges replicated."""
    w = hann_coefficients(window_length)
    w = w / w.sum()
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1 or x.size < w.size - 1:
        raise InvalidWindow(f"signal of length {x.size} is shorter than the window")
    half = window_length // 2
    padded = np.pad(x, half, mode="edge")
    return np.convolve(padded, w, mode="valid")


def baseline_correct(beat_samples) -> np.ndarray:
    x = np.asarray(beat_samples, dtype=np.float64)
    return x - x.mean()


# ---------------------------------------------------------------------------
# beats

@dataclass
class Beat:
    samples: np.ndarray
    record_id: str
    r_peak_index: int
    symbol: str
    meta: PatientMeta = field(default_factory=PatientMeta)


@dataclass
class BeatImage:
    pixels: np.ndarray
    label: int
    meta_vector: np.ndarray
    record_id: str = ""
    r_peak_index: int = -1


def segment(signal, annotations, delta_n=DELTA_N, scheme=MITBIH10, record_id="", meta=None):
    """Windows ``[R - delta_n, R + delta_n)`` around each kept annotation.

    Out-of-range indices are clamped, so windows at the record edges repeat
    the boundary sample. Symbols outside ``scheme`` are dropped
    (``scheme=None`` keeps everything).
    """
    x = np.asarray(signal, dtype=np.float64)
    scheme = get_scheme(scheme) if scheme is not None else None
    offsets = np.arange(-delta_n, delta_n)
    meta = meta or PatientMeta()
    beats = []
    for ann in annotations:
        if scheme is not None and scheme.index(ann.symbol) is None:
            continue
        r = int(ann.sample_index)
        idx = np.clip(r + offsets, 0, x.size - 1)
        beats.append(Beat(x[idx], record_id, r, ann.symbol, meta))
    return beats


def rasterize_samples(samples, size=IMAGE_SIZE) -> np.ndarray:
    """Binary polyline image of a 1-D waveform (row 0 = minimum amplitude)."""
    x = np.asarray(samples, dtype=np.float64)
    cols = np.interp(np.linspace(0.0, x.size - 1, size), np.arange(x.size), x)
    lo, hi = cols.min(), cols.max()
    if hi - lo <= 1e-9 * max(1.0, abs(hi), abs(lo)):
        rows = np.full(size, size // 2, dtype=np.int64)
    else:
        rows = np.floor((cols - lo) / (hi - lo) * (size - 1) + 0.5).astype(np.int64)
    prev = np.concatenate([rows[:1], rows[:-1]])
    top = np.minimum(prev, rows)
    bottom = np.maximum(prev, rows)
    r = np.arange(size)[:, None]
    return ((r >= top[None, :]) & (r <= bottom[None, :])).astype(np.float32)


def rasterize(beat, size=IMAGE_SIZE, scheme=MITBIH10) -> BeatImage:
    samples = beat.samples if isinstance(beat, Beat) else beat
    pixels = rasterize_samples(samples, size)
    if isinstance(beat, Beat):
        label = map_label(beat.symbol, scheme)
        return BeatImage(pixels, -1 if label is None else label, encode_meta(beat.meta),
                         beat.record_id, beat.r_peak_index)
    return BeatImage(pixels, -1, encode_meta(PatientMeta()))


def encode_meta(meta: PatientMeta) -> np.ndarray:
    """(age / 100 clamped to [0, 1.3], male 1 / female 0); unknowns map to 0.5."""
    age = 0.5 if not meta.age_known else min(max(meta.age / 100.0, 0.0), 1.3)
    sex = {"male": 1.0, "female": 0.0}.get(meta.sex, 0.5)
    return np.array([age, sex], dtype=np.float32)


def preprocess_record(record, scheme=MITBIH10, delta_n=DELTA_N, smoothing_window=SMOOTHING_WINDOW,
                      channel=0, image_size=IMAGE_SIZE):
    """smooth -> segment -> baseline-correct -> rasterize, for one record."""
    scheme = get_scheme(scheme)
    mv = smooth(record.millivolts(channel), smoothing_window)
    beats = segment(mv, record.annotations, delta_n, scheme, record.name, record.meta)
    images = []
    for beat in beats:
        beat.samples = baseline_correct(beat.samples)
        images.append(rasterize(beat, image_size, scheme))
    return images


# ---------------------------------------------------------------------------
# splitting / subsetting

@dataclass
class DatasetSplit:
    train: list
    test: list
    seed: int
    train_indices: np.ndarray = None
    test_indices: np.ndarray = None


def split_indices(n, train_fraction=0.9, seed=SEED):
    if n <= 0:
        raise EmptyDataset("cannot split an empty dataset")
    order = Rng(seed).permutation(n)
    n_train = int(math.floor(n * train_fraction + 0.5))
    if n > 1:
        n_train = min(max(n_train, 1), n - 1)
    return order[:n_train], order[n_train:]


def split(items, train_fraction=0.9, seed=SEED) -> DatasetSplit:
    """Seeded shuffle followed by a prefix split."""
    items = list(items)
    tr, te = split_indices(len(items), train_fraction, seed)
    return DatasetSplit([items[i] for i in tr], [items[i] for i in te], seed, tr, te)


def balanced_subset(labels, classes, per_class, seed=SEED):
    """Indices with up to ``per_class`` random members of each listed class."""
    labels = np.asarray(labels)
    rng = Rng(seed)
    chosen = []
    for c in classes:
        members = np.flatnonzero(labels == c)
        if members.size < per_class:
            log.warning("class %s has only %d beats (wanted %d)", c, members.size, per_class)
        pick = members[rng.permutation(members.size)[:per_class]]
        chosen.append(np.sort(pick))
    return np.sort(np.concatenate(chosen)) if chosen else np.array([], dtype=np.int64)


# ---------------------------------------------------------------------------
# dataset cache

def beat_dtype(image_size=IMAGE_SIZE):
    return np.dtype([("label", "<u2"), ("meta", "<f4", (2,)), ("pixels", "<f4", (image_size, image_size))])


def write_cache(cache_dir, images, manifest):
    """Write ``beats.bin`` and ``manifest.json``; returns the manifest written."""
    os.makedirs(cache_dir, exist_ok=True)
    size = images[0].pixels.shape[0] if images else manifest.get("image_size", IMAGE_SIZE)
    arr = np.zeros(len(images), dtype=beat_dtype(size))
    for i, im in enumerate(images):
        arr[i]["label"] = im.label
        arr[i]["meta"] = im.meta_vector
        arr[i]["pixels"] = im.pixels
    payload = arr.tobytes()
    with open(os.path.join(cache_dir, "beats.bin"), "wb") as fh:
        fh.write(payload)
    manifest = dict(manifest)
    manifest["image_size"] = int(size)
    manifest["total"] = len(images)
    manifest["beats_sha256"] = hashlib.sha256(payload).hexdigest()
    with open(os.path.join(cache_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_cache(cache_dir):
    """Returns (pixels [n,H,W], labels [n], meta [n,2], manifest)."""
    with open(os.path.join(cache_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    arr = np.fromfile(os.path.join(cache_dir, "beats.bin"), dtype=beat_dtype(manifest.get("image_size", IMAGE_SIZE)))
    if arr.size != manifest.get("total", arr.size):
        raise EmptyDataset(f"beats.bin holds {arr.size} beats, manifest says {manifest['total']}")
    return arr["pixels"], arr["label"].astype(np.int64), arr["meta"], manifest


def class_counts(labels, scheme):
    scheme = get_scheme(scheme)
    labels = np.asarray(labels)
    return {name: int((labels == i).sum()) for i, name in enumerate(scheme.class_names)}


# ---------------------------------------------------------------------------
# sklearn adapter

class BeatRasterizer(TransformerMixin, BaseEstimator):
    """Turn rows of ``[beat samples..., age_enc, sex_enc]`` into flattened images.

    The output rows are ``[pixels (size*size)..., age_enc, sex_enc]``, the
    layout :class:`recgnition.estimator.RecgnitionClassifier` consumes.
    """

    def __init__(self, image_size=IMAGE_SIZE, baseline=True):
        self.image_size = image_size
        self.baseline = baseline

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        X = check_array(X, dtype=np.float64)
        out = np.empty((X.shape[0], self.image_size ** 2 + 2), dtype=np.float32)
        for i, row in enumerate(X):
            beat = baseline_correct(row[:-2]) if self.baseline else row[:-2]
            out[i, :-2] = rasterize_samples(beat, self.image_size).reshape(-1)
            out[i, -2:] = row[-2:]
        return out
