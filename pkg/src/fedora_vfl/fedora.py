"""Primal-dual unlearning for split models.

Each round does a full-batch pass over the forget set to refresh the
per-parameter dual tensors, then a handful of proximal primal substeps on
mini-batches drawn from a ``delta`` fraction of the retained data.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .exceptions import ConfigError, DimensionError, DivergenceError, ValidationError
from .grad import log_softmax
from .vfl import SplitModel, VerticalDataset, backward_round, cross_entropy_grads, forward_round


@dataclass
class UnlearnConfig:
    gamma: float = 0.0
    omega_weight: float = 2.0
    rho: float = 0.01
    delta: float = 0.05
    batch_size: int = 128
    iterations: int = 100
    alpha: float = 1.5
    beta: float = 0.5
    kappa_i: float = 1.1
    kappa_d: float = 0.7
    tau0: float = 0.01
    sigma0: float = 0.01
    tau_max: float = 0.05
    sigma_max: float = 0.05
    adaptive: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.beta < self.alpha:
            raise ConfigError("need beta < alpha")
        if not (self.kappa_d < 1.0 < self.kappa_i):
            raise ConfigError("need kappa_d < 1 < kappa_i")
        if not 0.0 < self.tau0 <= self.tau_max:
            raise ConfigError("need 0 < tau0 <= tau_max")
        if not 0.0 <= self.sigma0 <= self.sigma_max:
            raise ConfigError("need 0 <= sigma0 <= sigma_max")
        if not 0.0 <= self.delta <= 1.0:
            raise ConfigError("delta must lie in [0, 1]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.rho < 0 or self.omega_weight < 0:
            raise ConfigError("rho and omega_weight must be >= 0")

    def check_step_condition(self, lipschitz: float):
        """Raise unless ``sigma * tau * L**2 < 1`` holds at the step-size caps."""
        if self.sigma_max * self.tau_max * lipschitz ** 2 >= 1.0:
            raise ConfigError(
                f"step condition violated: sigma_max*tau_max*L^2 = "
                f"{self.sigma_max * self.tau_max * lipschitz ** 2:.4g} >= 1"
            )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DualState:
    omega: list
    tau: float
    sigma: float
    delta_theta_prev: float = 0.0
    delta_theta_curr: float = 0.0

    @classmethod
    def zeros_like(cls, tensors, config: UnlearnConfig) -> "DualState":
        return cls([np.zeros_like(t) for t in tensors], config.tau0, config.sigma0)


@dataclass
class UnlearnTrace:
    unlearn_loss: list = field(default_factory=list)
    remain_loss: list = field(default_factory=list)
    tau: list = field(default_factory=list)
    sigma: list = field(default_factory=list)
    delta_theta: list = field(default_factory=list)
    mean_max_prob: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def rows(self):
        for k in range(len(self.unlearn_loss)):
            yield {
                "round": k,
                "L_u": self.unlearn_loss[k],
                "L_r": self.remain_loss[k],
                "tau": self.tau[k],
                "sigma": self.sigma[k],
                "delta_theta": self.delta_theta[k],
            }


def _check_distribution(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise DimensionError("probs must be 2-d (batch x classes)")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValidationError("probabilities must be finite and non-negative")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValidationError("each row of probs must sum to 1")
    return p


def unlearning_loss(probs, omega_weight):
    """Summed ``omega * (H(P) - KL(P || U))`` and its gradient w.r.t. ``probs``.

    Zero entries follow the ``p log p -> 0`` limit in the loss; their gradient
    is evaluated at the smallest positive float instead of ``-inf``.
    """
    p = _check_distribution(probs)
    n_classes = p.shape[1]
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    entropy = -plogp.sum(axis=1)
    kl = plogp.sum(axis=1) + np.log(n_classes)
    loss = float(omega_weight * (entropy - kl).sum())
    log_p = np.log(np.maximum(p, np.finfo(np.float64).tiny))
    # d/dp of (H - KL) = -2 (log p + 1)
    grad = -2.0 * omega_weight * (log_p + 1.0)
    return loss, grad


def unlearning_loss_from_logits(logits, omega_weight):
    """Same loss taken through the softmax; returns ``(loss, grad_logits)``."""
    z = np.asarray(logits, dtype=np.float64)
    log_p = log_softmax(z)
    p = np.exp(log_p)
    n_classes = z.shape[1]
    neg_entropy = (p * log_p).sum(axis=1)
    loss = float(omega_weight * (-2.0 * neg_entropy - np.log(n_classes)).sum())
    grad = -2.0 * omega_weight * p * (log_p - neg_entropy[:, None])
    return loss, grad


def dual_update(omega, grad_u, gamma, sigma) -> np.ndarray:
    """Projected ascent step ``max(0, omega + sigma * (gamma - grad_u))``."""
    omega = np.asarray(omega, dtype=np.float64)
    grad_u = np.asarray(grad_u, dtype=np.float64)
    if omega.shape != grad_u.shape:
        raise DimensionError(f"dual shape {omega.shape} != gradient shape {grad_u.shape}")
    return np.maximum(0.0, omega + sigma * (gamma - grad_u))


def proximal_loss(tensors, anchor, rho):
    """``rho/2 * sum ||t - a||^2`` over tensor pairs and its gradient ``rho * (t - a)``."""
    if len(tensors) != len(anchor):
        raise DimensionError("parameter and anchor lists differ in length")
    grads, total = [], 0.0
    for t, a in zip(tensors, anchor):
        t, a = np.asarray(t, dtype=np.float64), np.asarray(a, dtype=np.float64)
        if t.shape != a.shape:
            raise DimensionError(f"parameter shape {t.shape} != anchor shape {a.shape}")
        diff = t - a
        total += float(np.sum(diff * diff))
        grads.append(rho * diff)
    return 0.5 * rho * total, grads


def primal_update(theta, grad_r, grad_u, omega, rho, theta_init, tau) -> np.ndarray:
    if tau <= 0:
        raise ValidationError("tau must be positive")
    arrays = [np.asarray(a, dtype=np.float64) for a in (theta, grad_r, grad_u, omega, theta_init)]
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise DimensionError("primal update tensors are not shape-congruent")
    theta, grad_r, grad_u, omega, theta_init = arrays
    return theta - tau * (grad_r - grad_u * omega + rho * (theta - theta_init))


def adapt_steps(state: DualState, config: UnlearnConfig):
    """Scale both step sizes by the iterate-change ratio rule, then clamp."""
    tau, sigma = state.tau, state.sigma
    if state.delta_theta_prev > 0:
        ratio = state.delta_theta_curr / state.delta_theta_prev
        if ratio < config.beta:
            factor = config.kappa_i
        elif ratio > config.alpha:
            factor = config.kappa_d
        else:
            factor = 1.0
        tau, sigma = tau * factor, sigma * factor
    return min(tau, config.tau_max), min(sigma, config.sigma_max)


def schedule_length(delta, remaining_count, batch_size) -> int:
    # rounding guards against products like 0.1 * 1280 = 128.00000000000003
    return math.ceil(round(delta * remaining_count / batch_size, 9))


def remaining_schedule(delta, remaining_count, batch_size, seed) -> list:
    """``ceil(delta * n / B)`` batches of positions into the retained set."""
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    if not 0.0 <= delta <= 1.0:
        raise ValidationError("delta must lie in [0, 1]")
    n_batches = schedule_length(delta, remaining_count, batch_size)
    if n_batches == 0:
        return []
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = rng.permutation(remaining_count)
    return [order[s * batch_size:(s + 1) * batch_size] for s in range(n_batches)]


def forget_set_gradients(model: SplitModel, data: VerticalDataset, rows, omega_weight,
                         noise_std=0.0, rng=None):
    """Full-batch unlearning loss on ``rows``; returns ``(loss, grads, probs)``."""
    h, logits = forward_round(model, data, rows, noise_std, rng)
    loss, g = unlearning_loss_from_logits(logits, omega_weight)
    probs = np.exp(log_softmax(logits))
    return loss, backward_round(model, data, rows, g, embedding=h), probs


def _global_norm(a, b) -> float:
    return math.sqrt(sum(float(np.sum((x - y) ** 2)) for x, y in zip(a, b)))


def fedora_unlearn(model: SplitModel, data: VerticalDataset, unlearn_rows, remain_rows,
                   config: UnlearnConfig, noise_std=0.0, callback=None):
    """Run ``config.iterations`` primal-dual rounds. Returns ``(model, trace)``.

    The anchor is frozen to the entry parameters unless ``model.anchor`` is
    already set. ``callback(k, model, state)`` runs after each round.
    """
    unlearn_rows = np.asarray(unlearn_rows, dtype=np.int64)
    remain_rows = np.asarray(remain_rows, dtype=np.int64)
    if unlearn_rows.size == 0:
        raise ValidationError("forget set is empty")
    if np.intersect1d(unlearn_rows, remain_rows).size:
        raise ValidationError("forget and retained rows overlap")
    if model.anchor is None:
        model = model.freeze_anchor()
    anchor = model.anchor
    theta = [t.copy() for t in model.tensors()]
    state = DualState.zeros_like(theta, config)
    trace = UnlearnTrace()
    rng = np.random.default_rng(config.seed)
    noise_rng = np.random.default_rng([config.seed, 7])
    current = model.with_tensors(theta)

    for k in range(config.iterations):
        start = time.perf_counter()
        tau, sigma = state.tau, state.sigma
        loss_u, grad_u, probs = forget_set_gradients(
            current, data, unlearn_rows, config.omega_weight, noise_std, noise_rng)
        if not np.isfinite(loss_u):
            raise DivergenceError(f"unlearning loss became non-finite at iteration {k}", k)
        state.omega = [dual_update(o, g, config.gamma, sigma) for o, g in zip(state.omega, grad_u)]
        assert all(np.all(o >= 0) for o in state.omega)

        prev = [t.copy() for t in theta]
        batches = remaining_schedule(config.delta, remain_rows.size, config.batch_size, rng)
        remain_losses = []
        if batches:
            for batch in batches:
                loss_r, grad_r = cross_entropy_grads(current, data, remain_rows[batch], noise_std, noise_rng)
                if not np.isfinite(loss_r):
                    raise DivergenceError(f"retained loss became non-finite at iteration {k}", k)
                remain_losses.append(loss_r)
                theta = [primal_update(t, gr, gu, o, config.rho, a, tau)
                         for t, gr, gu, o, a in zip(theta, grad_r, grad_u, state.omega, anchor)]
                current = model.with_tensors(theta)
        else:
            # no retained batches: one step driven by the forget-set and proximal terms only
            theta = [primal_update(t, np.zeros_like(t), gu, o, config.rho, a, tau)
                     for t, gu, o, a in zip(theta, grad_u, state.omega, anchor)]
            current = model.with_tensors(theta)
        if not all(np.all(np.isfinite(t)) for t in theta):
            raise DivergenceError(f"parameters became non-finite at iteration {k}", k)

        state.delta_theta_prev = state.delta_theta_curr
        state.delta_theta_curr = _global_norm(theta, prev)
        if config.adaptive:
            state.tau, state.sigma = adapt_steps(state, config)
        assert state.tau <= config.tau_max and state.sigma <= config.sigma_max

        trace.unlearn_loss.append(loss_u)
        trace.remain_loss.append(float(np.mean(remain_losses)) if remain_losses else float("nan"))
        trace.tau.append(tau)
        trace.sigma.append(sigma)
        trace.delta_theta.append(state.delta_theta_curr)
        trace.mean_max_prob.append(float(probs.max(axis=1).mean()))
        trace.seconds.append(time.perf_counter() - start)
        if callback is not None:
            callback(k, current, state)
    return current, trace
