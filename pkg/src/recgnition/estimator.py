"""scikit-learn style classifier around the network and training loop."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import NotFitted, ShapeMismatch
from .model import ArchConfig
from .training import TrainConfig, fit_arrays, infer

ARCHS = {"small": ArchConfig, "medium": ArchConfig.medium, "tiny": ArchConfig.tiny}


def split_features(X, image_size):
    """Rows ``[pixels..., age_enc, sex_enc]`` -> (images [n,s,s], meta [n,2])."""
    n_pix = image_size * image_size
    if X.shape[1] != n_pix + 2:
        raise ShapeMismatch(f"expected {n_pix + 2} features for {image_size}px images, got {X.shape[1]}")
    return X[:, :n_pix].reshape(-1, image_size, image_size), X[:, n_pix:]


class RecgnitionClassifier(ClassifierMixin, BaseEstimator):
    """Beat-image + patient-metadata classifier.

    ``X`` rows are flattened beat images followed by the two encoded
    metadata values (see :class:`recgnition.preprocess.BeatRasterizer`).
    """

    def __init__(self, fusion="sacc", arch="small", epochs=40, batch_size=32, base_lr=0.01,
                 warmup_steps=5, num_cycles=0.5, dropout_rates=(0.25, 0.1), seed=257):
        self.fusion = fusion
        self.arch = arch
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.warmup_steps = warmup_steps
        self.num_cycles = num_cycles
        self.dropout_rates = dropout_rates
        self.seed = seed

    def _arch(self):
        return self.arch if isinstance(self.arch, ArchConfig) else ARCHS[self.arch]()

    def _config(self):
        return TrainConfig(batch_size=self.batch_size, epochs=self.epochs, base_lr=self.base_lr,
                           warmup_steps=self.warmup_steps, num_cycles=self.num_cycles,
                           dropout_rates=tuple(self.dropout_rates), seed=self.seed, fusion=self.fusion)

    def fit(self, X, y, eval_set=None):
        X, y = check_X_y(X, y, dtype=np.float32)
        arch = self._arch()
        self._le = LabelEncoder().fit(y)
        self.classes_ = self._le.classes_
        self.n_features_in_ = X.shape[1]
        imgs, meta = split_features(X, arch.image_size)
        ev = None
        if eval_set is not None:
            Xe, ye = check_X_y(*eval_set, dtype=np.float32)
            ev = (*split_features(Xe, arch.image_size), self._le.transform(ye))
        self.params_, self.history_ = fit_arrays(
            (imgs, meta, self._le.transform(y)), ev, self._config(), num_classes=len(self.classes_),
            arch=arch, class_names=[str(c) for c in self.classes_])
        return self

    def _check(self, X):
        try:
            check_is_fitted(self, "params_")
        except Exception as exc:
            raise NotFitted(str(exc)) from None
        X = check_array(X, dtype=np.float32)
        return split_features(X, self.params_.arch.image_size)

    def predict_proba(self, X):
        imgs, meta = self._check(X)
        return infer(self.params_, imgs, meta)["probabilities"]

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(1)]

    def embed(self, X):
        """(pre-fusion image features, fused embedding) per row."""
        imgs, meta = self._check(X)
        out = infer(self.params_, imgs, meta, keep=("f_img", "fused"))
        return out["f_img"], out["fused"]
