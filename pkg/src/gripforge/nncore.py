"""Minimal dense numeric core shared by every network.

Matrices are plain float64 numpy arrays (row-major), validated for shape
and finiteness at package boundaries rather than wrapped in a class.
Everything here is a pure function; the finite-difference gradient
checker is the verification oracle used by the model tests.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "relu",
    "relu_grad",
    "sigmoid",
    "sigmoid_grad_from_output",
    "tanh_grad_from_output",
    "identity",
    "ACTIVATIONS",
    "DenseLayer",
    "dense_forward",
    "init_params",
    "zeros_bias",
    "check_finite",
    "grad_check",
]


def relu(x):
    """Elementwise max(0, x)."""
    return np.maximum(x, 0.0)


def relu_grad(x):
    """Derivative of relu w.r.t. its input; defined as 0 at exactly 0."""
    return (np.asarray(x) > 0).astype(np.float64)


def sigmoid(x):
    """Elementwise 1/(1 + exp(-x)), stable for large |x|.

    Only exp of non-positive values is evaluated, so no overflow occurs;
    extreme negative inputs underflow gracefully toward 0.0.
    """
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_grad_from_output(s):
    """sigma'(x) expressed through s = sigma(x)."""
    return s * (1.0 - s)


def tanh_grad_from_output(t):
    """tanh'(x) expressed through t = tanh(x)."""
    return 1.0 - t * t


def identity(x):
    return x


# name -> (forward, grad-from-input) for the dense-layer activations
ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "relu": (relu, relu_grad),
    "sigmoid": (sigmoid, lambda x: sigmoid_grad_from_output(sigmoid(x))),
    "identity": (identity, lambda x: np.ones_like(np.asarray(x, dtype=np.float64))),
}


@dataclass
class DenseLayer:
    """Affine map plus activation: activation(weights @ x + bias).

    weights: [out, in], bias: [out].
    """

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError(f"weights must be 2-D, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"bias length {self.bias.shape} does not match weight rows "
                f"{self.weights.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    """Apply a dense layer to a vector [in] or a batch [B, in]."""
    x = np.asarray(x, dtype=np.float64)
    n_in = layer.weights.shape[1]
    if x.shape[-1] != n_in:
        raise ValueError(f"input length {x.shape[-1]} != layer fan-in {n_in}")
    if x.ndim == 1:
        z = layer.weights @ x + layer.bias
    elif x.ndim == 2:
        z = x @ layer.weights.T + layer.bias
    else:
        raise ValueError("dense_forward expects a vector or a batch of vectors")
    return ACTIVATIONS[layer.activation][0](z)


def init_params(shape, seed, scheme: str = "glorot-uniform") -> np.ndarray:
    """Draw a weight matrix, i.i.d. uniform on +-sqrt(6/(fan_in+fan_out)).

    shape is (fan_out, fan_in). Bit-reproducible for a fixed seed, which
    may be an int or a numpy SeedSequence.
    """
    if scheme != "glorot-uniform":
        raise ValueError(f"unknown init scheme {scheme!r}")
    fan_out, fan_in = shape
    if fan_out <= 0 or fan_in <= 0:
        raise ValueError(f"invalid shape {shape}")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(seed)
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def zeros_bias(n: int) -> np.ndarray:
    return np.zeros(n, dtype=np.float64)


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    """Reject NaN/Inf at a package boundary; returns the array unchanged."""
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def grad_check(
    f: Callable[[np.ndarray], float],
    analytic_grad: Callable[[np.ndarray], np.ndarray] | np.ndarray,
    theta0: np.ndarray,
    h: float = 1e-5,
) -> float:
    """Max relative error between an analytic gradient and central differences.

    Per coordinate i the numeric gradient is (f(t+h*e_i) - f(t-h*e_i))/(2h)
    and the relative error is |analytic - numeric| / max(1e-8, |analytic| +
    |numeric|). Returns the max over coordinates.
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    if callable(analytic_grad):
        grad = np.asarray(analytic_grad(theta0), dtype=np.float64)
    else:
        grad = np.asarray(analytic_grad, dtype=np.float64)
    if grad.shape != theta0.shape:
        raise ValueError(f"gradient shape {grad.shape} != theta shape {theta0.shape}")

    theta = theta0.copy()
    worst = 0.0
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + h
        f_plus = float(f(theta))
        theta[i] = orig - h
        f_minus = float(f(theta))
        theta[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(
                f"objective is non-finite near coordinate {i} (f+={f_plus}, f-={f_minus})"
            )
        numeric = (f_plus - f_minus) / (2.0 * h)
        denom = max(1e-8, abs(grad[i]) + abs(numeric))
        err = abs(grad[i] - numeric) / denom
        if err > worst:
            worst = err
    # restore exact theta for callers that passed a live view
    f(theta0)
    return worst
