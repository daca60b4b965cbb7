"""Classical canonical correlation analysis (the non-learned fusion baseline)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import NotFitted, ShapeMismatch, SingularCovariance


@dataclass
class CcaResult:
    x_mean: np.ndarray
    y_mean: np.ndarray
    x_weights: np.ndarray  # [p, k]
    y_weights: np.ndarray  # [q, k]
    correlations: np.ndarray  # [k], descending

    @property
    def k(self):
        return self.correlations.size


def _inv_sqrt(c, ridge, which):
    evals, evecs = np.linalg.eigh(c)
    top = max(evals.max(), 0.0)
    if ridge == 0 and (top == 0 or evals.min() <= 1e-12 * top):
        raise SingularCovariance(f"{which} covariance is singular; use ridge > 0")
    evals = np.maximum(evals, 1e-300)
    return (evecs / np.sqrt(evals)) @ evecs.T


def cca_fit(X, Y, ridge=1e-8, k=None) -> CcaResult:
    """Top-``k`` canonical pairs of centred ``X`` [n,p] and ``Y`` [n,q].

    Covariances get ``ridge * I`` added before whitening. Each returned
    variate has unit empirical variance on the fitting data and a
    non-negative correlation with its partner.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ShapeMismatch(f"X {X.shape} and Y {Y.shape} must be 2-D with equal rows")
    n, p = X.shape
    q = Y.shape[1]
    if n <= max(p, q):
        raise ShapeMismatch(f"need more samples ({n}) than features ({max(p, q)})")
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    k = min(p, q) if k is None else min(k, p, q)

    xm, ym = X.mean(0), Y.mean(0)
    Xc, Yc = X - xm, Y - ym
    cxx = Xc.T @ Xc / (n - 1) + ridge * np.eye(p)
    cyy = Yc.T @ Yc / (n - 1) + ridge * np.eye(q)
    cxy = Xc.T @ Yc / (n - 1)
    wx = _inv_sqrt(cxx, ridge, "X")
    wy = _inv_sqrt(cyy, ridge, "Y")
    u, s, vt = np.linalg.svd(wx @ cxy @ wy)
    a = wx @ u[:, :k]
    b = wy @ vt[:k].T

    # unit empirical variance, positive correlation; variates living in a
    # rank-deficient direction keep their whitened scale instead of blowing up
    for w, Z in ((a, Xc), (b, Yc)):
        sd = (Z @ w).std(0, ddof=1)
        ok = sd > 1e-6
        w[:, ok] /= sd[ok]
    rho = np.einsum("ij,ij->j", Xc @ a, Yc @ b) / (n - 1)
    flip = rho < 0
    b[:, flip] *= -1
    rho = np.abs(rho)
    order = np.argsort(-rho, kind="stable")
    return CcaResult(xm, ym, a[:, order], b[:, order], np.clip(rho[order], 0.0, 1.0))


def cca_transform(X, Y, fitted: CcaResult | None) -> np.ndarray:
    """Concatenated canonical variates ``[u_1..u_k, v_1..v_k]`` (row or batch)."""
    if fitted is None:
        raise NotFitted("cca_transform called before cca_fit")
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    u = (X - fitted.x_mean) @ fitted.x_weights
    v = (Y - fitted.y_mean) @ fitted.y_weights
    return np.concatenate([u, v], axis=-1)


class CanonicalCorrelation(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit(X, Y)`` then ``transform(X, Y)`` -> fused variates."""

    def __init__(self, n_components=None, ridge=1e-8):
        self.n_components = n_components
        self.ridge = ridge

    def fit(self, X, Y):
        X = check_array(X)
        Y = check_array(Y)
        self.result_ = cca_fit(X, Y, self.ridge, self.n_components)
        self.correlations_ = self.result_.correlations
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X, Y):
        try:
            check_is_fitted(self, "result_")
        except Exception as exc:
            raise NotFitted(str(exc)) from None
        return cca_transform(check_array(X), check_array(Y), self.result_)

    def fit_transform(self, X, Y):
        return self.fit(X, Y).transform(X, Y)
