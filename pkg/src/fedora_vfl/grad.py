"""Dense forward/reverse-mode kernel for small multilayer perceptrons.

Tensors are plain ``float64`` numpy arrays in row-major layout. A layer maps
``x -> act(x @ W + b)`` with ``W`` of shape ``(d_in, d_out)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .exceptions import DimensionError, NumericError, ValidationError

ACTIVATIONS = ("relu", "identity")


def as_dense(values, name="tensor", ndim=None) -> np.ndarray:
    """Coerce ``values`` to a finite float64 array."""
    arr = np.asarray(values, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name}: non-finite values")
    return arr


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        w = as_dense(self.weight, "weight", ndim=2)
        b = as_dense(self.bias, "bias", ndim=1)
        if b.shape[0] != w.shape[1]:
            raise DimensionError(f"bias length {b.shape[0]} != weight width {w.shape[1]}")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)


@dataclass(frozen=True)
class MlpParams:
    layers: tuple

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValidationError("an MLP needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i - 1].weight.shape[1] != layers[i].weight.shape[0]:
                raise DimensionError(
                    f"layer {i}: input dim {layers[i].weight.shape[0]} does not match "
                    f"previous output dim {layers[i - 1].weight.shape[1]}"
                )
        object.__setattr__(self, "layers", layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def tensors(self) -> list:
        """Parameters as a flat list ``[W0, b0, W1, b1, ...]``."""
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def with_tensors(self, tensors: Sequence[np.ndarray]) -> "MlpParams":
        if len(tensors) != 2 * len(self.layers):
            raise DimensionError(
                f"expected {2 * len(self.layers)} tensors, got {len(tensors)}"
            )
        layers = []
        for i, layer in enumerate(self.layers):
            w, b = tensors[2 * i], tensors[2 * i + 1]
            if np.shape(w) != layer.weight.shape or np.shape(b) != layer.bias.shape:
                raise DimensionError(f"layer {i}: replacement tensor shape mismatch")
            layers.append(Layer(w, b, layer.activation))
        return MlpParams(tuple(layers))

    def copy(self) -> "MlpParams":
        return self.with_tensors([t.copy() for t in self.tensors()])


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, hidden_activation="relu",
             output_activation="identity") -> MlpParams:
    """He-initialized MLP with layer widths ``sizes`` (input first)."""
    if len(sizes) < 2:
        raise ValidationError("sizes needs an input and an output width")
    layers = []
    for i, (d_in, d_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        w = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out))
        layers.append(Layer(w, np.zeros(d_out), output_activation if last else hidden_activation))
    return MlpParams(tuple(layers))


def identity_mlp(dim: int) -> MlpParams:
    return MlpParams((Layer(np.eye(dim), np.zeros(dim), "identity"),))


def _check_inputs(params: MlpParams, inputs) -> np.ndarray:
    x = as_dense(inputs, "inputs", ndim=2)
    if x.shape[1] != params.in_dim:
        raise DimensionError(
            f"layer 0: input width {x.shape[1]} != expected {params.in_dim}"
        )
    return x


def _forward_trace(params: MlpParams, x: np.ndarray):
    # (layer input, pre-activation) per layer
    trace = []
    for layer in params.layers:
        z = x @ layer.weight + layer.bias
        trace.append((x, z))
        x = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return x, trace


def mlp_forward(params: MlpParams, inputs) -> np.ndarray:
    x = _check_inputs(params, inputs)
    out, _ = _forward_trace(params, x)
    return out


def mlp_backward(params: MlpParams, inputs, upstream_grad):
    """Reverse-mode pass. Returns ``(param_grads, input_grads)``.

    ``param_grads`` is an :class:`MlpParams` holding gradients in place of
    weights, so it lines up with ``params.tensors()``.
    """
    x = _check_inputs(params, inputs)
    out, trace = _forward_trace(params, x)
    g = as_dense(upstream_grad, "upstream_grad", ndim=2)
    if g.shape != out.shape:
        raise DimensionError(f"upstream grad shape {g.shape} != output shape {out.shape}")
    grads = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        a_in, z = trace[i]
        if layer.activation == "relu":
            g = g * (z > 0.0)
        grads[i] = Layer(a_in.T @ g, g.sum(axis=0), layer.activation)
        g = g @ layer.weight.T
    return MlpParams(tuple(grads)), g


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_labels(labels, batch: int, n_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != batch:
        raise DimensionError(f"labels shape {y.shape} does not match batch {batch}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValidationError("labels must be integer class indices")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValidationError(f"labels must lie in [0, {n_classes})")
    return y


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise DimensionError("logits must be 2-d")
    n, c = z.shape
    y = _check_labels(labels, n, c)
    logp = log_softmax(z)
    rows = np.arange(n)
    loss = -logp[rows, y].mean()
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    return float(loss), grad / n


def finite_diff_check(loss_fn: Callable, params: Sequence[np.ndarray], epsilon=1e-5,
                      floor=1e-6) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn(tensors)`` must return ``(loss, grads)`` with ``grads`` aligned to
    ``tensors``. ``floor`` keeps near-zero entries from dominating the ratio.
    """
    if epsilon <= 0:
        raise ValidationError("epsilon must be positive")
    tensors = [np.array(t, dtype=np.float64) for t in params]
    loss, analytic = loss_fn(tensors)
    if not np.isfinite(loss):
        raise NumericError("loss is not finite")
    worst = 0.0
    for t, g in zip(tensors, analytic):
        g = np.asarray(g, dtype=np.float64)
        flat = t.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            up = loss_fn(tensors)[0]
            flat[j] = orig - epsilon
            down = loss_fn(tensors)[0]
            flat[j] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError("loss is not finite under perturbation")
            num = (up - down) / (2.0 * epsilon)
            denom = max(abs(num), abs(gflat[j]), floor)
            worst = max(worst, abs(num - gflat[j]) / denom)
    return worst
