import numpy as np
import pytest
from sklearn.base import clone

from dartlab.data import gen_two_moons_shift
from dartlab.estimators import DARTClassifier


@pytest.fixture(scope="module")
def moons():
    s, t = gen_two_moons_shift(200, 20.0, 0.1, seed=0)
    labels = np.array(["a", "b"])[s.labels]
    return s.features, labels, t.features, np.array(["a", "b"])[t.labels]


def small(**kw):
    base = dict(iterations=60, pretrain_iterations=60, checkpoint_frequency=20, batch_size=32, attack_steps=2)
    base.update(kw)
    return DARTClassifier(**base)


def test_params_round_trip_and_clone():
    est = small(lambda1=0.3)
    assert est.get_params()["lambda1"] == 0.3
    assert clone(est).get_params() == est.get_params()
    est.set_params(alpha=0.2)
    assert est.alpha == 0.2


def test_fit_predict_transform(moons):
    xs, ys, xt, yt = moons
    est = small().fit(xs, ys, X_target=xt, X_val=xt[:40], y_val=yt[:40])
    pred = est.predict(xt)
    assert set(pred) <= {"a", "b"}
    proba = est.predict_proba(xt)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert est.transform(xt).shape == (len(xt), 16)
    assert 0.0 <= est.robust_score(xt, yt) <= est.score(xt, yt) + 1e-12
    assert est.robust_score(xt, yt, alpha=0.0) == pytest.approx(est.score(xt, yt))


def test_fit_is_deterministic_and_holds_out_source_without_validation(moons):
    xs, ys, xt, _ = moons
    a = small(algorithm="natural_uda").fit(xs, ys, X_target=xt)
    b = small(algorithm="natural_uda").fit(xs, ys, X_target=xt)
    assert np.array_equal(a.decision_function(xt), b.decision_function(xt))


def test_input_validation(moons):
    xs, ys, xt, _ = moons
    with pytest.raises(ValueError):
        small().fit(xs, ys)
    with pytest.raises(ValueError):
        small().fit(xs, np.zeros(len(xs)), X_target=xt)
    with pytest.raises(ValueError):
        small().fit(xs, ys, X_target=np.zeros((5, 3)))
    est = small(algorithm="natural_uda").fit(xs, ys, X_target=xt)
    with pytest.raises(ValueError):
        est.predict(np.zeros((2, 3)))
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        small().predict(xt)
