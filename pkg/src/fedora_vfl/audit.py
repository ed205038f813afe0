"""Unlearning audits: accuracy, shadow-model membership inference, backdoor triggers."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score

from .exceptions import ValidationError
from .vfl import SplitModel, VerticalDataset, predict, predict_proba


def _nonempty(rows, what="rows") -> np.ndarray:
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        raise ValidationError(f"{what} must be non-empty")
    return rows


def accuracy(model: SplitModel, data: VerticalDataset, rows) -> float:
    rows = _nonempty(rows)
    return float(np.mean(predict(model, data, rows) == data.labels[rows]))


def attack_features(probs) -> np.ndarray:
    """Sorted probability vector, max probability and entropy per row."""
    p = np.asarray(probs, dtype=np.float64)
    sorted_p = -np.sort(-p, axis=1)
    safe = np.where(p > 0, p, 1.0)
    entropy = -(p * np.log(safe)).sum(axis=1)
    return np.column_stack([sorted_p, sorted_p[:, 0], entropy])


@dataclass(frozen=True)
class ShadowAttackModel:
    """Logistic membership classifier over :func:`attack_features`."""

    coef: np.ndarray
    intercept: float

    def predict_proba(self, features) -> np.ndarray:
        z = np.asarray(features, dtype=np.float64) @ self.coef + self.intercept
        return 1.0 / (1.0 + np.exp(-z))

    def predict(self, features) -> np.ndarray:
        return (self.predict_proba(features) > 0.5).astype(np.int64)


def fit_attack(member_probs, nonmember_probs, seed=0, balance=True, C=1.0) -> ShadowAttackModel:
    """Fit the attack on output distributions labelled member / non-member.

    With ``balance`` the larger side is subsampled (seeded) so the attack's
    prior is 50/50.
    """
    members = np.asarray(member_probs, dtype=np.float64)
    nonmembers = np.asarray(nonmember_probs, dtype=np.float64)
    if len(members) == 0 or len(nonmembers) == 0:
        raise ValidationError("attack training needs both members and non-members")
    rng = np.random.default_rng(seed)
    if balance:
        n = min(len(members), len(nonmembers))
        members = members[np.sort(rng.choice(len(members), n, replace=False))]
        nonmembers = nonmembers[np.sort(rng.choice(len(nonmembers), n, replace=False))]
    x = np.vstack([attack_features(members), attack_features(nonmembers)])
    y = np.concatenate([np.ones(len(members)), np.zeros(len(nonmembers))])
    clf = LogisticRegression(C=C, max_iter=1000, random_state=seed).fit(x, y)
    return ShadowAttackModel(clf.coef_.ravel().copy(), float(clf.intercept_[0]))


def mia_fit(original_model: SplitModel, data: VerticalDataset, train_rows, test_rows, seed=0,
            balance=True) -> ShadowAttackModel:
    train_rows = _nonempty(train_rows, "member rows")
    test_rows = _nonempty(test_rows, "non-member rows")
    return fit_attack(predict_proba(original_model, data, train_rows),
                      predict_proba(original_model, data, test_rows), seed, balance)


def mia_asr(attack: ShadowAttackModel, unlearned_model: SplitModel, data: VerticalDataset,
            unlearn_rows) -> float:
    """Fraction of forget-set rows the attack still flags as members."""
    rows = _nonempty(unlearn_rows)
    feats = attack_features(predict_proba(unlearned_model, data, rows))
    return float(np.mean(attack.predict(feats)))


def attack_auc(attack: ShadowAttackModel, member_probs, nonmember_probs) -> float:
    scores = np.concatenate([attack.predict_proba(attack_features(member_probs)),
                             attack.predict_proba(attack_features(nonmember_probs))])
    truth = np.concatenate([np.ones(len(member_probs)), np.zeros(len(nonmember_probs))])
    return float(roc_auc_score(truth, scores))


@dataclass(frozen=True)
class TriggerSpec:
    size: int = 2
    value: float = 1.0
    target_label: int = 0


def inject_backdoor(images, trigger: TriggerSpec):
    """Stamp a ``size x size`` patch in the bottom-right corner.

    ``images`` is ``(batch, H, W)``. Returns ``(stamped, targets)`` where
    ``targets`` are all ``trigger.target_label``. The input is not modified.
    """
    imgs = np.array(images, dtype=np.float64)
    if imgs.ndim != 3:
        raise ValidationError("images must have shape (batch, H, W)")
    _, h, w = imgs.shape
    k = trigger.size
    if k < 1 or k > h or k > w:
        raise ValidationError(f"{k}x{k} trigger does not fit a {h}x{w} image")
    imgs[:, h - k:, w - k:] = trigger.value
    targets = np.full(imgs.shape[0], trigger.target_label, dtype=np.int64)
    return imgs, targets


def backdoor_dataset(data: VerticalDataset, rows, trigger: TriggerSpec) -> VerticalDataset:
    """Copy of ``data`` with ``rows`` stamped and relabelled to the target class."""
    if data.image_shape is None:
        raise ValidationError("dataset carries no image shape")
    rows = np.asarray(rows, dtype=np.int64)
    full = data.matrix()
    h, w = data.image_shape
    stamped, targets = inject_backdoor(full[rows].reshape(-1, h, w), trigger)
    full[rows] = stamped.reshape(rows.size, h * w)
    labels = data.labels.copy()
    labels[rows] = targets
    widths = np.cumsum(data.widths)[:-1]
    return replace(data, features=tuple(np.split(full, widths, axis=1)), labels=labels)


def bd_asr(model: SplitModel, data: VerticalDataset, triggered_rows, target_label=0) -> float:
    """Fraction of triggered rows predicted as ``target_label``."""
    rows = _nonempty(triggered_rows, "triggered rows")
    return float(np.mean(predict(model, data, rows) == target_label))
