"""sklearn-facing estimator wrapper: params, fit/predict, determinism."""

import numpy as np
import pytest
from sklearn.base import clone

from waterflow.errors import ContractError, ShapeError
from waterflow.estimator import WaterFlowSegmenter
from waterflow.imaging import synth_scene
from waterflow.metrics import s_measure
from waterflow.rng import SCENE, RngState


def _toy_data(n=2, size=32, seed=0, difficulty=0.3):
    root = RngState(seed)
    X, y, z = [], [], []
    for i in range(n):
        scene, _ = synth_scene(root.stream(SCENE, i), (size, size), difficulty)
        X.append(scene.I)
        y.append(scene.G)
        z.append(scene.z)
    return np.stack(X), np.stack(y), np.stack(z)


def _fast(**kv):
    kv.setdefault("epochs", 2)
    kv.setdefault("batch", 2)
    kv.setdefault("accum", 2)
    return WaterFlowSegmenter(**kv)


# ---------------------------------------------------------------------------
# sklearn plumbing


def test_get_params_round_trip():
    est = WaterFlowSegmenter(lr=1e-3, steps=4)
    params = est.get_params()
    assert params["lr"] == 1e-3 and params["steps"] == 4
    assert "stage_map" in params and "channels" in params
    rebuilt = WaterFlowSegmenter(**params)
    assert rebuilt.get_params() == params


def test_set_params_returns_self():
    est = WaterFlowSegmenter()
    out = est.set_params(epochs=5, threshold=0.3)
    assert out is est and est.epochs == 5 and est.threshold == 0.3


def test_clone_copies_params_not_state():
    X, y, z = _toy_data()
    est = _fast().fit(X, y, depth=z)
    dup = clone(est)
    assert dup.get_params() == est.get_params()
    assert not hasattr(dup, "network_")


def test_unfitted_predict_raises():
    est = WaterFlowSegmenter()
    with pytest.raises(ContractError, match="not fitted"):
        est.predict(np.zeros((1, 3, 32, 32)))


# ---------------------------------------------------------------------------
# fit mechanics


def test_fit_returns_self_and_sets_state():
    X, y, z = _toy_data()
    est = _fast()
    assert est.fit(X, y, depth=z) is est
    assert est.image_shape_ == (32, 32)
    assert est.n_steps_ == len(est.history_) == 2 * est.trainer_.steps_per_epoch


def test_fit_without_depth_disables_priors():
    X, y, _ = _toy_data()
    est = _fast(prior_dropout=0.25).fit(X, y)
    assert est.trainer_.config.prior_dropout == 1.0


def test_fit_with_depth_keeps_requested_dropout():
    X, y, z = _toy_data()
    est = _fast(prior_dropout=0.25).fit(X, y, depth=z)
    assert est.trainer_.config.prior_dropout == 0.25


def test_batch_clamps_to_dataset_size():
    X, y, z = _toy_data(n=2)
    est = WaterFlowSegmenter(epochs=1, batch=8, accum=4).fit(X, y, depth=z)
    cfg = est.trainer_.config
    assert cfg.micro_batch * cfg.accum_steps == 2
    assert est.trainer_.steps_per_epoch == 1 and est.n_steps_ == 1


def test_max_steps_caps_training():
    X, y, z = _toy_data(n=4)
    est = WaterFlowSegmenter(epochs=50, batch=2, accum=1, max_steps=3).fit(X, y, depth=z)
    assert est.n_steps_ == 3 and len(est.history_) == 3


# ---------------------------------------------------------------------------
# prediction


def test_predict_shapes_and_determinism():
    X, y, z = _toy_data()
    est = _fast().fit(X, y, depth=z)
    probs = est.predict_proba(X)
    assert probs.shape == (2, 32, 32)
    assert probs.min() >= 0.0 and probs.max() <= 1.0
    assert np.array_equal(probs, est.predict_proba(X))
    masks = est.predict(X)
    assert set(np.unique(masks)) <= {0.0, 1.0}
    assert np.array_equal(masks, (probs >= est.threshold).astype(np.float64))


def test_refit_from_clone_is_bitwise_identical():
    X, y, z = _toy_data()
    a = _fast().fit(X, y, depth=z)
    b = clone(a).fit(X, y, depth=z)
    assert np.array_equal(a.predict_proba(X), b.predict_proba(X))


def test_score_is_mean_s_measure():
    X, y, z = _toy_data()
    est = _fast().fit(X, y, depth=z)
    probs = est.predict_proba(X)
    expected = np.mean([s_measure(p, g) for p, g in zip(probs, y)])
    assert est.score(X, y) == pytest.approx(expected, abs=1e-15)


def test_multi_step_sampling_path():
    X, y, z = _toy_data()
    est = _fast(steps=4).fit(X, y, depth=z)
    probs = est.predict_proba(X)
    assert probs.shape == (2, 32, 32) and np.isfinite(probs).all()


# ---------------------------------------------------------------------------
# validation


def test_fit_rejects_bad_inputs():
    X, y, z = _toy_data()
    est = _fast()
    with pytest.raises(ShapeError):
        est.fit(X[:, :2], y, depth=z)  # not 3 channels
    with pytest.raises(ShapeError):
        est.fit(np.zeros((2, 3, 30, 30)), np.zeros((2, 30, 30)))
    with pytest.raises(ShapeError):
        est.fit(X, y[:1], depth=z)
    with pytest.raises(ContractError):
        est.fit(X, y + 0.5, depth=z)  # masks must be binary
    with pytest.raises(ShapeError):
        est.fit(X, y, depth=z[:, :16])


def test_predict_rejects_size_change():
    X, y, z = _toy_data()
    est = _fast().fit(X, y, depth=z)
    with pytest.raises(ShapeError, match="fitted for"):
        est.predict(np.zeros((1, 3, 64, 64)))
