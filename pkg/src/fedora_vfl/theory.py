"""Empirical check of the FedORA-vs-retraining model-difference bound.

The harness runs on ridge-regularised binary logistic regression, a
strongly convex and smooth instance, with a flat parameter vector. FedORA and
retraining are stepped in lockstep and the distance between their iterates is
compared against the closed-form bound at every iteration.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .exceptions import ConfigError, NumericError, ValidationError
from .fedora import dual_update, primal_update

CALIBRATION_MARGIN = 1.5


@dataclass(frozen=True)
class ConvexInstance:
    X: np.ndarray
    y: np.ndarray
    lam: float
    unlearn_rows: np.ndarray
    remain_rows: np.ndarray
    theta0: np.ndarray
    theta_bar0: np.ndarray
    mu: float
    L: float
    sigma_r: float
    G: Optional[float] = None
    omega_max: Optional[float] = None

    @property
    def dim(self) -> int:
        return self.X.shape[1]


def spectral_max(matrix: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(matrix)[-1])


def ridge_logistic_grad(theta, X, y, lam) -> np.ndarray:
    """Gradient of ``mean(logistic loss) + lam/2 ||theta||^2``."""
    p = expit(X @ theta)
    return X.T @ (p - y) / len(y) + lam * theta


def ridge_logistic_loss(theta, X, y, lam) -> float:
    z = X @ theta
    # log(1 + e^z) - y z, computed stably
    return float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * lam * theta @ theta)


def forget_grad(theta, X, omega_weight) -> np.ndarray:
    """Gradient of the summed entropy-minus-KL loss for a two-class logistic model.

    With ``p = sigmoid(z)`` the per-sample loss derivative is ``-2 w p (1-p) z``.
    """
    z = X @ theta
    p = expit(z)
    return X.T @ (-2.0 * omega_weight * p * (1.0 - p) * z)


def per_sample_sigma(theta, X, y) -> float:
    """``sqrt(E ||grad_j - grad||^2)`` over rows; the ridge part cancels."""
    p = expit(X @ theta)
    per = X * (p - y)[:, None]
    dev = per - per.mean(axis=0)
    return float(np.sqrt(np.mean(np.sum(dev ** 2, axis=1))))


def instance_from_data(X, y, lam, unlearn_rows, theta0=None, theta_bar0=None, seed=0) -> ConvexInstance:
    """Derive the convexity constants for given data.

    ``theta0`` defaults to the ridge-logistic fit on all rows (the model to be
    unlearned) and ``theta_bar0`` to a seeded small random initialisation.
    """
    if lam <= 0:
        raise ValidationError("lam must be positive")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    unlearn_rows = np.asarray(unlearn_rows, dtype=np.int64)
    remain_rows = np.setdiff1d(np.arange(len(y)), unlearn_rows)
    if remain_rows.size == 0:
        raise ValidationError("no retained rows")
    Xr = X[remain_rows]
    L = lam + 0.25 * spectral_max(Xr.T @ Xr) / len(remain_rows)
    if not np.isfinite(L):
        raise NumericError("smoothness constant is not finite")
    if theta0 is None:
        res = minimize(ridge_logistic_loss, np.zeros(X.shape[1]), args=(X, y, lam),
                       jac=ridge_logistic_grad, method="L-BFGS-B", options={"gtol": 1e-10})
        theta0 = res.x
    if theta_bar0 is None:
        theta_bar0 = np.random.default_rng(seed).normal(0.0, 0.1, X.shape[1])
    theta0 = np.asarray(theta0, dtype=np.float64)
    sigma_r = per_sample_sigma(theta0, Xr, y[remain_rows])
    return ConvexInstance(X, y, float(lam), unlearn_rows, remain_rows, theta0,
                          np.asarray(theta_bar0, dtype=np.float64), float(lam), float(L), sigma_r)


def build_convex_instance(n: int, d: int, lam: float, seed=0, forget_fraction=0.1) -> ConvexInstance:
    """Random logistic data with a seeded forget set of ``forget_fraction * n`` rows."""
    if lam <= 0:
        raise ValidationError("lam must be positive")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    w = rng.normal(0.0, 3.0 / math.sqrt(d), d)
    y = (rng.random(n) < expit(X @ w)).astype(np.float64)
    forget = np.sort(rng.choice(n, int(round(forget_fraction * n)), replace=False))
    return instance_from_data(X, y, lam, forget, seed=seed + 1)


def bound_value(k, tau, mu, e0, sigma_r, batch, G, omega_max) -> float:
    """``c^k e0 + sqrt(tau)/(1-c) * (sigma_r/sqrt(batch) + G*omega_max)``, ``c = sqrt(1-tau*mu)``."""
    if not 0.0 < tau * mu < 1.0:
        raise ValidationError("need 0 < tau*mu < 1")
    c = math.sqrt(1.0 - tau * mu)
    bias = math.sqrt(tau) / (1.0 - c) * (sigma_r / math.sqrt(batch) + G * omega_max)
    return c ** k * e0 + bias


def asymptotic_bias(tau, mu, sigma_r, batch, G, omega_max) -> float:
    return bound_value(0, tau, mu, 0.0, sigma_r, batch, G, omega_max)


@dataclass
class BoundTrace:
    e: list = field(default_factory=list)
    bound: list = field(default_factory=list)
    tau: list = field(default_factory=list)
    sigma: list = field(default_factory=list)
    omega_norm: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)

    @property
    def violations(self) -> int:
        return sum(e > b for e, b in zip(self.e, self.bound))

    @property
    def violated(self) -> bool:
        return self.violations > 0

    def to_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "e_k", "bound_k", "tau_k", "sigma_k"])
            for k, row in enumerate(zip(self.e, self.bound, self.tau, self.sigma)):
                writer.writerow([k, *(repr(float(v)) for v in row)])


@dataclass
class TheoryConfig:
    tau: float = 0.05
    sigma: float = 0.001
    gamma: float = 0.0
    omega_weight: float = 2.0
    batch_size: int = 128
    iterations: int = 500
    seed: int = 0
    full_batch: bool = False
    zero_dual: bool = False
    shared_batches: bool = True


def check_steps(instance: ConvexInstance, tau: float, sigma: float):
    limit = min(1.0 / (2.0 * instance.L), instance.mu / (4.0 * instance.L ** 2))
    if not 0.0 < tau <= limit:
        raise ConfigError(f"tau={tau:.4g} outside (0, {limit:.4g}] required by the bound")
    if sigma * tau * instance.L ** 2 >= 1.0:
        raise ConfigError("step condition sigma*tau*L^2 < 1 violated")


def _lockstep(instance: ConvexInstance, config: TheoryConfig, seed: int):
    """Yield ``(theta, theta_bar, omega, grad_u)`` for k = 0..K."""
    tau = config.tau
    check_steps(instance, tau, config.sigma)
    X, y, lam = instance.X, instance.y, instance.lam
    Xu = X[instance.unlearn_rows]
    Xr, yr = X[instance.remain_rows], y[instance.remain_rows]
    n_r = len(yr)
    rng = np.random.default_rng(seed)
    retrain_rng = np.random.default_rng([seed, 1])
    theta = instance.theta0.copy()
    theta_bar = instance.theta_bar0.copy()
    omega = np.zeros_like(theta)
    grad_u = forget_grad(theta, Xu, config.omega_weight)
    yield theta, theta_bar, omega, grad_u
    for _ in range(config.iterations):
        if config.full_batch or config.batch_size >= n_r:
            batch = bar_batch = np.arange(n_r)
        else:
            batch = rng.choice(n_r, config.batch_size, replace=False)
            bar_batch = batch if config.shared_batches else retrain_rng.choice(n_r, config.batch_size, replace=False)
        if not config.zero_dual:
            omega = dual_update(omega, grad_u, config.gamma, config.sigma)
        grad_r = ridge_logistic_grad(theta, Xr[batch], yr[batch], lam)
        theta = primal_update(theta, grad_r, grad_u, omega, 0.0, instance.theta0, tau)
        theta_bar = theta_bar - tau * ridge_logistic_grad(theta_bar, Xr[bar_batch], yr[bar_batch], lam)
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(theta_bar))):
            raise NumericError("lockstep iterates became non-finite")
        grad_u = forget_grad(theta, Xu, config.omega_weight)
        yield theta, theta_bar, omega, grad_u


def calibrate(instance: ConvexInstance, config: TheoryConfig, margin=CALIBRATION_MARGIN) -> ConvexInstance:
    """Fix ``G`` and ``omega_max`` as ``margin`` times their maxima over a probe run.

    The probe uses a different batch seed from the audited run.
    """
    g_max = omega_max = 0.0
    for _, _, omega, grad_u in _lockstep(instance, config, config.seed + 10_007):
        g_max = max(g_max, float(np.linalg.norm(grad_u)))
        omega_max = max(omega_max, float(np.linalg.norm(omega)))
    return replace(instance, G=margin * g_max, omega_max=margin * omega_max)


def run_bound_trace(instance: ConvexInstance, config: TheoryConfig) -> BoundTrace:
    """Trace ``||theta_k - theta_bar_k||`` against the bound for k = 0..K."""
    if instance.G is None or instance.omega_max is None:
        instance = calibrate(instance, config)
    tau = config.tau
    batch = len(instance.remain_rows) if config.full_batch else config.batch_size
    g = 0.0 if config.zero_dual else instance.G
    trace = BoundTrace()
    e0 = None
    for k, (theta, theta_bar, omega, grad_u) in enumerate(_lockstep(instance, config, config.seed)):
        e = float(np.linalg.norm(theta - theta_bar))
        if e0 is None:
            e0 = e
        sigma_r = 0.0 if config.full_batch else instance.sigma_r
        trace.e.append(e)
        trace.bound.append(bound_value(k, tau, instance.mu, e0, sigma_r, batch, g, instance.omega_max))
        trace.tau.append(tau)
        trace.sigma.append(config.sigma)
        trace.omega_norm.append(float(np.linalg.norm(omega)))
        trace.grad_norm.append(float(np.linalg.norm(grad_u)))
    return trace
