"""Verifiable models and criteria: affine/MLP forward-backward in numpy.

Gradients are exact reverse-mode; every path is checked against central
finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np

from .errors import LabelOutOfRange, ShapeMismatch, StaleCache

ACTIVATIONS = ("relu", "tanh")


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


class MLPModel:
    """Affine stack with an activation between layers; no hidden layers
    makes it a plain linear model."""

    def __init__(self, input_dim: int, output_dim: int, hidden=(), activation="relu",
                 rng: np.random.Generator | None = None):
        if input_dim <= 0 or output_dim <= 0:
            raise ShapeMismatch(f"dims must be positive, got {input_dim} -> {output_dim}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
        rng = rng or np.random.default_rng(0)
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        dims = [input_dim, *self.hidden, output_dim]
        self.weights = [glorot_uniform(rng, dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
        self.biases = [np.zeros(dims[i + 1]) for i in range(len(dims) - 1)]
        self._cache = None

    @property
    def kind(self) -> str:
        return "mlp" if self.hidden else "linear"

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def set_params(self, values: list[np.ndarray]) -> None:
        current = self.params
        if len(values) != len(current):
            raise ShapeMismatch(f"expected {len(current)} parameter arrays, got {len(values)}")
        for dst, src in zip(current, values):
            if dst.shape != src.shape:
                raise ShapeMismatch(f"parameter shape {src.shape} != {dst.shape}")
            dst[...] = src

    def meta(self) -> dict:
        return {
            "kind": self.kind,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden": list(self.hidden),
            "activation": self.activation,
        }

    def _act(self, z: np.ndarray) -> np.ndarray:
        return np.maximum(z, 0.0) if self.activation == "relu" else np.tanh(z)

    def _act_grad(self, z: np.ndarray, a: np.ndarray) -> np.ndarray:
        return (z > 0).astype(np.float64) if self.activation == "relu" else 1.0 - a * a

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeMismatch(f"batch shape {x.shape} incompatible with input_dim {self.input_dim}")
        inputs = [x]
        pre = []
        a = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T + b
            pre.append(z)
            a = self._act(z) if i < last else z
            inputs.append(a)
        self._cache = (inputs, pre)
        return a

    def backward(self, grad_out: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients for the most recent forward pass."""
        if self._cache is None:
            raise StaleCache("backward() without a preceding forward()")
        inputs, pre = self._cache
        g = np.asarray(grad_out, dtype=np.float64)
        if g.shape != (inputs[0].shape[0], self.output_dim):
            raise ShapeMismatch(f"upstream gradient shape {g.shape} unexpected")
        grads: list[np.ndarray] = []
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            if i < last:
                g = g * self._act_grad(pre[i], inputs[i + 1])
            grads.append(g.sum(axis=0))      # bias
            grads.append(g.T @ inputs[i])    # weight
            if i > 0:
                g = g @ self.weights[i]
        grads.reverse()
        return grads

    def clear_cache(self) -> None:
        self._cache = None


def build_model(kind: str, input_dim: int, output_dim: int, hidden=(), activation="relu",
                rng: np.random.Generator | None = None) -> MLPModel:
    if kind == "linear":
        return MLPModel(input_dim, output_dim, hidden=(), activation=activation, rng=rng)
    if kind == "mlp":
        if not hidden:
            raise ShapeMismatch("mlp needs a non-empty 'hidden' list")
        return MLPModel(input_dim, output_dim, hidden=hidden, activation=activation, rng=rng)
    raise ValueError(f"unknown model kind {kind!r}")


# --- criteria -------------------------------------------------------------------


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log softmax likelihood and its gradient w.r.t. logits."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise ShapeMismatch(f"logits {z.shape} vs labels {y.shape}")
    n, c = z.shape
    if y.size and (y.min() < 0 or y.max() >= c):
        raise LabelOutOfRange(f"labels must lie in [0, {c})")
    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), y].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


def mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements and its gradient."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeMismatch(f"pred {p.shape} vs target {t.shape}")
    diff = p - t
    return float((diff * diff).mean()), 2.0 * diff / diff.size


CRITERIA = {"cross_entropy": cross_entropy, "mse": mse}
