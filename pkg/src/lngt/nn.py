"""Minimal fully connected network with hand-written backpropagation.

Shared by the classifier (softmax head) and the coordinate field (sigmoid
head); the head itself is applied by the caller.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError

ACTIVATIONS = ("relu", "tanh")


class MlpModel:
    """Affine layers with a hidden activation; the last layer is linear."""

    def __init__(self, layer_sizes, activation: str = "relu", rng: np.random.Generator | None = None,
                 zero: bool = False):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ParameterError("layer_sizes needs at least two positive entries")
        if activation not in ACTIVATIONS:
            raise ParameterError(f"activation must be one of {ACTIVATIONS}")
        self.layer_sizes = sizes
        self.activation = activation
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            if zero or rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                gain = 2.0 if activation == "relu" else 1.0
                w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(gain / fan_in)
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpModel":
        m = MlpModel(self.layer_sizes, self.activation, zero=True)
        m.weights = [w.copy() for w in self.weights]
        m.biases = [b.copy() for b in self.biases]
        return m

    def _act(self, z):
        return np.maximum(z, 0.0) if self.activation == "relu" else np.tanh(z)

    def _act_grad(self, z, a):
        return (z > 0).astype(z.dtype) if self.activation == "relu" else 1.0 - a * a

    def forward(self, x, keep_cache: bool = False):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None]
        if x.shape[-1] != self.layer_sizes[0]:
            raise ParameterError(f"expected {self.layer_sizes[0]} input features, got {x.shape[-1]}")
        cache = [(None, x)]
        a = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            a = z if i == last else self._act(z)
            if keep_cache:
                cache.append((z, a))
        out = a[0] if single else a
        return (out, cache) if keep_cache else out

    def backward(self, cache, grad_out) -> list[np.ndarray]:
        """Gradients of ``sum(grad_out * output)`` for every parameter.

        Returned in the order of :attr:`params` (w0, b0, w1, b1, ...). Batch
        rows are summed in index order.
        """
        g = np.asarray(grad_out, dtype=np.float64)
        if g.ndim == 1:
            g = g[None]
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            a_prev = cache[i][1]
            grads[2 * i] = a_prev.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                z_prev, a_prev_act = cache[i]
                g = (g @ self.weights[i].T) * self._act_grad(z_prev, a_prev_act)
        return grads

    def apply_update(self, steps: list[np.ndarray]) -> None:
        """In-place ``param += step`` for every parameter."""
        for i in range(len(self.weights)):
            self.weights[i] += steps[2 * i]
            self.biases[i] += steps[2 * i + 1]


class Sgd:
    def __init__(self, lr: float):
        self.lr = float(lr)

    def step(self, model: MlpModel, grads) -> None:
        model.apply_update([-self.lr * g for g in grads])


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = float(lr), beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, model: MlpModel, grads) -> None:
        if self.m is None:
            self.m = [np.zeros_like(g) for g in grads]
            self.v = [np.zeros_like(g) for g in grads]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        steps = []
        for i, g in enumerate(grads):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            steps.append(-self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        model.apply_update(steps)


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return Sgd(lr)
    if name == "adam":
        return Adam(lr)
    raise ParameterError(f"unknown optimizer {name!r}")
