import numpy as np
import pytest
from sklearn.base import clone

from recgnition import BeatRasterizer, CanonicalCorrelation, RecgnitionClassifier
from recgnition.errors import NotFitted, ShapeMismatch


def stripes(n=36, seed=0):
    r = np.random.default_rng(seed)
    y = np.array(["N", "V", "L"])[r.integers(0, 3, n)]
    imgs = np.zeros((n, 16, 16), np.float32)
    for i, lab in enumerate(y):
        k = "NVL".index(lab)
        imgs[i, 5 * k:5 * k + 4] = 1
    X = np.hstack([imgs.reshape(n, -1), r.random((n, 2))])
    return X, y


def test_params_and_clone():
    est = RecgnitionClassifier(fusion="concat", arch="tiny", epochs=3)
    p = est.get_params()
    assert p["fusion"] == "concat" and p["epochs"] == 3 and p["seed"] == 257
    assert clone(est).get_params() == p
    est.set_params(epochs=5)
    assert est.epochs == 5


def test_fit_predict_tiny():
    X, y = stripes()
    est = RecgnitionClassifier(arch="tiny", epochs=15, warmup_steps=0, batch_size=8, dropout_rates=(0, 0))
    est.fit(X, y, eval_set=(X, y))
    assert list(est.classes_) == ["L", "N", "V"]
    proba = est.predict_proba(X)
    assert proba.shape == (36, 3) and np.allclose(proba.sum(1), 1, atol=1e-5)
    assert est.score(X, y) >= 0.9
    assert len(est.history_.rows) == 15
    f_img, fused = est.embed(X[:4])
    assert f_img.shape == (4, 16) and fused.shape == (4, 16)


def test_fit_is_reproducible():
    X, y = stripes(20)
    kw = dict(arch="tiny", epochs=2, warmup_steps=0, batch_size=8)
    a = RecgnitionClassifier(**kw).fit(X, y)
    b = clone(a).fit(X, y)
    assert a.params_.checksum() == b.params_.checksum()


def test_not_fitted_and_bad_width():
    X, y = stripes(6)
    with pytest.raises(NotFitted):
        RecgnitionClassifier(arch="tiny").predict(X)
    with pytest.raises(ShapeMismatch):
        RecgnitionClassifier(arch="tiny", epochs=1, warmup_steps=0).fit(X[:, :-3], y)


def test_pipeline_with_rasterizer():
    from sklearn.pipeline import make_pipeline
    r = np.random.default_rng(1)
    t = np.linspace(-1, 1, 32)
    y = r.integers(0, 2, 24)
    waves = np.array([np.exp(-(t / 0.1) ** 2) * (1 if c else -1) for c in y]) + 0.02 * r.normal(size=(24, 32))
    X = np.hstack([waves, r.random((24, 2))])
    pipe = make_pipeline(BeatRasterizer(image_size=16),
                         RecgnitionClassifier(arch="tiny", epochs=12, warmup_steps=0, batch_size=8,
                                              dropout_rates=(0, 0)))
    pipe.fit(X, y)
    assert pipe.score(X, y) >= 0.9


def test_package_exports():
    assert CanonicalCorrelation().get_params() == {"n_components": None, "ridge": 1e-8}
