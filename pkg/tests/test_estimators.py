import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fedora_vfl import (FedORAUnlearner, GradientAscentUnlearner, MembershipInferenceAttack, RetrainUnlearner,
                        VFLClassifier)
from fedora_vfl.data import gen_tabular
from fedora_vfl.exceptions import ValidationError


@pytest.fixture(scope="module")
def fitted():
    data = gen_tabular(3, 40, 6, 4.0, seed=0)
    X = data.matrix()
    y = np.array(["a", "b", "c"])[data.labels]
    clf = VFLClassifier(n_parties=2, embed_dim=4, bottom_hidden=(8,), top_hidden=(8,), epochs=20, lr=0.1,
                        batch_size=16).fit(X, y)
    return X, y, clf


def test_params_round_trip_and_clone():
    clf = VFLClassifier(n_parties=4, epochs=3)
    assert clf.get_params()["n_parties"] == 4
    twin = clone(clf)
    assert twin.get_params() == clf.get_params() and twin is not clf
    unl = FedORAUnlearner(iterations=7)
    assert clone(unl).get_params()["iterations"] == 7
    assert unl.set_params(gamma=-1.0).gamma == -1.0


def test_classifier_fit_predict(fitted):
    X, y, clf = fitted
    assert set(clf.predict(X)) <= {"a", "b", "c"}
    assert clf.score(X, y) >= 0.9
    np.testing.assert_allclose(clf.predict_proba(X).sum(axis=1), 1.0)
    with pytest.raises(ValidationError):
        clf.predict(X[:, :4])
    with pytest.raises(NotFittedError):
        VFLClassifier().predict(X)


def test_fedora_unlearner(fitted):
    X, y, clf = fitted
    mask = y == "a"
    unl = FedORAUnlearner(clf, iterations=30, sigma0=1e-3, sigma_max=1e-2, delta=0.2, batch_size=16).fit(X, y, mask)
    assert unl.predict_proba(X).shape == (len(X), 3)
    assert len(list(unl.trace_.rows())) == 30
    conf_before = clf.predict_proba(X[mask]).max(axis=1).mean()
    assert unl.predict_proba(X[mask]).max(axis=1).mean() < conf_before
    with pytest.raises(ValidationError):
        unl.fit(X, y, mask[:-1])


def test_retrain_unlearner_drops_class(fitted):
    X, y, clf = fitted
    mask = y == "a"
    unl = RetrainUnlearner(clf).fit(X, y, mask)
    assert np.mean(unl.predict(X[mask]) == "a") <= 0.1
    assert unl.score(X[~mask], y[~mask]) >= 0.9


def test_gradient_ascent_unlearner(fitted):
    X, y, clf = fitted
    unl = GradientAscentUnlearner(clf, iterations=3, lr=0.01).fit(X, y, y == "b")
    assert unl.predict(X).shape == (len(X),)


def test_membership_attack_estimator():
    rng = np.random.default_rng(0)
    P = np.vstack([np.eye(3)[rng.integers(0, 3, 100)] * 0.9 + 0.1 / 3, np.full((100, 3), 1 / 3)])
    member = np.repeat([1, 0], 100)
    mia = MembershipInferenceAttack().fit(P, member)
    assert mia.score(P, member) >= 0.95
    assert mia.predict_proba(P).shape == (200, 2)
