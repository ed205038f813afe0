"""scikit-learn compatible wrappers around the split-model runtime and unlearners.

    >>> clf = VFLClassifier(n_parties=3, epochs=20).fit(X, y)
    >>> unl = FedORAUnlearner(clf, iterations=50).fit(X, y, forget_mask)
    >>> unl.predict(X_test)
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .audit import ShadowAttackModel, attack_features, fit_attack
from .baselines import BaselineConfig, gradient_ascent_unlearn, retrain
from .exceptions import ValidationError
from .fedora import UnlearnConfig, fedora_unlearn
from .vfl import VerticalDataset, build_split_model, even_party_specs, predict_proba, vfl_train


def _as_dataset(X, y, specs, n_classes) -> VerticalDataset:
    blocks = tuple(X[:, s.feature_slice[0]:s.feature_slice[1]] for s in specs)
    return VerticalDataset(np.arange(len(X)), blocks, y, n_classes)


class _SplitPredictMixin:
    """``predict``/``predict_proba`` on top of a fitted ``model_``."""

    def _dataset(self, X):
        X = check_array(X, dtype=np.float64)
        specs = self.party_specs_
        if X.shape[1] != specs[-1].feature_slice[1]:
            raise ValidationError(f"expected {specs[-1].feature_slice[1]} features, got {X.shape[1]}")
        return _as_dataset(X, np.zeros(len(X), dtype=np.int64), specs, len(self.classes_))

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return predict_proba(self.model_, self._dataset(X))

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]


class VFLClassifier(_SplitPredictMixin, ClassifierMixin, BaseEstimator):
    """Vertically split MLP classifier.

    Columns of ``X`` are divided evenly across ``n_parties``; the last party is
    the active (label-holding) party.
    """

    def __init__(self, n_parties=3, embed_dim=16, bottom_hidden=(32,), top_hidden=(32,), epochs=30,
                 lr=0.05, batch_size=64, noise_std=0.0, random_state=0):
        self.n_parties = n_parties
        self.embed_dim = embed_dim
        self.bottom_hidden = bottom_hidden
        self.top_hidden = top_hidden
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.noise_std = noise_std
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.label_encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.label_encoder_.classes_
        if len(self.classes_) < 2:
            raise ValidationError("need at least two classes")
        self.party_specs_ = even_party_specs(X.shape[1], self.n_parties, self.embed_dim, self.bottom_hidden)
        data = _as_dataset(X, self.label_encoder_.transform(y), self.party_specs_, len(self.classes_))
        model = build_split_model(self.party_specs_, len(self.classes_), self.top_hidden, self.random_state)
        self.model_, self.loss_history_ = vfl_train(model, data, self.epochs, self.lr, self.batch_size,
                                                    self.random_state, noise_std=self.noise_std)
        return self


class _UnlearnerBase(_SplitPredictMixin, ClassifierMixin, BaseEstimator):
    def _prepare(self, X, y, forget_mask):
        check_is_fitted(self.estimator, "model_")
        X, y = check_X_y(X, y, dtype=np.float64)
        mask = np.asarray(forget_mask, dtype=bool)
        if mask.shape != (len(X),):
            raise ValidationError("forget_mask must have one entry per row")
        self.classes_ = self.estimator.classes_
        self.party_specs_ = self.estimator.party_specs_
        data = _as_dataset(X, self.estimator.label_encoder_.transform(y), self.party_specs_,
                           len(self.classes_))
        return data, np.flatnonzero(mask), np.flatnonzero(~mask)


class FedORAUnlearner(_UnlearnerBase):
    """Primal-dual unlearning of a fitted :class:`VFLClassifier`.

    ``fit(X, y, forget_mask)`` takes the rows the estimator was trained on and
    a boolean mask selecting the forget set; the remainder is retained.
    """

    def __init__(self, estimator=None, gamma=0.0, omega_weight=2.0, rho=0.01, delta=0.05, batch_size=128,
                 iterations=100, alpha=1.5, beta=0.5, kappa_i=1.1, kappa_d=0.7, tau0=0.01, sigma0=0.01,
                 tau_max=0.05, sigma_max=0.05, adaptive=True, random_state=0):
        self.estimator = estimator
        self.gamma = gamma
        self.omega_weight = omega_weight
        self.rho = rho
        self.delta = delta
        self.batch_size = batch_size
        self.iterations = iterations
        self.alpha = alpha
        self.beta = beta
        self.kappa_i = kappa_i
        self.kappa_d = kappa_d
        self.tau0 = tau0
        self.sigma0 = sigma0
        self.tau_max = tau_max
        self.sigma_max = sigma_max
        self.adaptive = adaptive
        self.random_state = random_state

    def unlearn_config(self) -> UnlearnConfig:
        params = self.get_params(deep=False)
        params.pop("estimator")
        params["seed"] = params.pop("random_state")
        return UnlearnConfig(**params)

    def fit(self, X, y, forget_mask):
        config = self.unlearn_config()
        data, forget, remain = self._prepare(X, y, forget_mask)
        self.model_, self.trace_ = fedora_unlearn(self.estimator.model_, data, forget, remain, config)
        return self


class RetrainUnlearner(_UnlearnerBase):
    """Train a fresh model of the same architecture on the retained rows only."""

    def __init__(self, estimator=None, epochs=None, lr=None, batch_size=None, random_state=1):
        self.estimator = estimator
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y, forget_mask):
        data, _, remain = self._prepare(X, y, forget_mask)
        est = self.estimator
        config = BaselineConfig("retrain", self.epochs if self.epochs is not None else est.epochs,
                                self.lr or est.lr, self.batch_size or est.batch_size, self.random_state)
        self.model_ = retrain(data, remain, self.party_specs_, config, est.top_hidden, est.noise_std)
        return self


class GradientAscentUnlearner(_UnlearnerBase):
    def __init__(self, estimator=None, iterations=10, lr=0.01, batch_size=64, finetune_rounds=0,
                 random_state=0):
        self.estimator = estimator
        self.iterations = iterations
        self.lr = lr
        self.batch_size = batch_size
        self.finetune_rounds = finetune_rounds
        self.random_state = random_state

    def fit(self, X, y, forget_mask):
        data, forget, remain = self._prepare(X, y, forget_mask)
        config = BaselineConfig("gradient_ascent", self.iterations, self.lr, self.batch_size,
                                self.random_state, self.finetune_rounds)
        self.model_ = gradient_ascent_unlearn(self.estimator.model_, data, forget, remain, config)
        return self


class MembershipInferenceAttack(ClassifierMixin, BaseEstimator):
    """Shadow attack over predicted probability vectors.

    ``fit(P, is_member)`` with ``P`` an ``(n, C)`` array of model outputs.
    """

    def __init__(self, balance=True, C=1.0, random_state=0):
        self.balance = balance
        self.C = C
        self.random_state = random_state

    def fit(self, P, is_member):
        P, is_member = check_X_y(P, is_member, dtype=np.float64)
        member = is_member.astype(bool)
        self.attack_: ShadowAttackModel = fit_attack(P[member], P[~member], self.random_state,
                                                     self.balance, self.C)
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, P):
        check_is_fitted(self, "attack_")
        p1 = self.attack_.predict_proba(attack_features(check_array(P, dtype=np.float64)))
        return np.column_stack([1.0 - p1, p1])

    def predict(self, P):
        return (self.predict_proba(P)[:, 1] > 0.5).astype(np.int64)
