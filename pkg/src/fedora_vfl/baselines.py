"""Reference unlearners: retraining from scratch and gradient ascent."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .exceptions import ConfigError, DivergenceError, NumericError, ValidationError
from .grad import softmax_cross_entropy
from .vfl import PartySpec, SplitModel, VerticalDataset, backward_round, build_split_model, \
    forward_round, vfl_train


@dataclass
class BaselineConfig:
    method: str = "retrain"
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 64
    seed: int = 1
    ga_finetune_rounds: int = 0

    def __post_init__(self):
        if self.method not in ("retrain", "gradient_ascent"):
            raise ConfigError(f"unknown baseline {self.method!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 0 or self.ga_finetune_rounds < 0 or self.batch_size < 1:
            raise ConfigError("epochs/ga_finetune_rounds must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def retrain(data: VerticalDataset, remain_rows, party_specs: Sequence[PartySpec], config: BaselineConfig,
            top_hidden=(32,), noise_std=0.0) -> SplitModel:
    """Fresh seeded model trained on the retained rows only.

    The forget set is never handed to the trainer: a dataset view holding only
    ``remain_rows`` is built first.
    """
    remain_rows = np.asarray(remain_rows, dtype=np.int64)
    if remain_rows.size == 0:
        raise ValidationError("retained set is empty")
    view = data.subset(remain_rows)
    model = build_split_model(party_specs, data.n_classes, top_hidden, seed=config.seed)
    model, _ = vfl_train(model, view, config.epochs, config.lr, config.batch_size,
                         seed=config.seed, noise_std=noise_std)
    return model


def gradient_ascent_unlearn(model: SplitModel, data: VerticalDataset, unlearn_rows, remain_rows,
                            config: BaselineConfig) -> SplitModel:
    """``config.epochs`` full-batch ascent steps on forget-set cross-entropy,
    followed by ``ga_finetune_rounds`` epochs of descent on the retained rows."""
    unlearn_rows = np.asarray(unlearn_rows, dtype=np.int64)
    if unlearn_rows.size == 0:
        raise ValidationError("forget set is empty")
    params = [t.copy() for t in model.tensors()]
    current = model.with_tensors(params)
    for it in range(config.epochs):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                h, logits = forward_round(current, data, unlearn_rows)
                loss, g = softmax_cross_entropy(logits, data.labels[unlearn_rows])
                grads = backward_round(current, data, unlearn_rows, g, embedding=h)
        except NumericError as err:
            raise DivergenceError(f"gradient ascent diverged at iteration {it}: {err}", it) from err
        if not np.isfinite(loss):
            raise DivergenceError(f"gradient ascent diverged at iteration {it}", it)
        for p, gr in zip(params, grads):
            p += config.lr * gr
        if not all(np.all(np.isfinite(p)) for p in params):
            raise DivergenceError(f"gradient ascent diverged at iteration {it}", it)
        current = model.with_tensors(params)
    if config.ga_finetune_rounds:
        current, _ = vfl_train(current, data, config.ga_finetune_rounds, config.lr,
                               config.batch_size, seed=config.seed, rows=remain_rows)
    return current
