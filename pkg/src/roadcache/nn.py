"""Tiny fully connected networks with hand-written backprop.

Everything is float64 numpy.  Layers cache what backward needs, backward
leaves parameter gradients on the layer, and step applies SGD with
optional momentum.  Keeping the gradients explicit is what lets the test
suite compare every analytic derivative against central finite
differences.
"""

from __future__ import annotations

import numpy as np


class Dense:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        limit = np.sqrt(6.0 / (n_in + n_out))
        self.w = rng.uniform(-limit, limit, size=(n_in, n_out))
        self.b = np.zeros(n_out)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._vw = np.zeros_like(self.w)
        self._vb = np.zeros_like(self.b)
        self._x: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.w + self.b

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        self.dw = self._x.T @ grad_y
        self.db = grad_y.sum(axis=0)
        return grad_y @ self.w.T

    def step(self, lr: float, momentum: float = 0.0) -> None:
        self._vw = momentum * self._vw + self.dw
        self._vb = momentum * self._vb + self.db
        self.w -= lr * self._vw
        self.b -= lr * self._vb

    def params(self):
        return [self.w, self.b]

    def grads(self):
        return [self.dw, self.db]


class Relu:
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad_y):
        return grad_y * self._mask

    def step(self, lr, momentum=0.0):
        pass

    def params(self):
        return []

    def grads(self):
        return []


class Sigmoid:
    def __init__(self):
        self._y = None

    def forward(self, x):
        self._y = 1.0 / (1.0 + np.exp(-np.clip(x, -500.0, 500.0)))
        return self._y

    def backward(self, grad_y):
        return grad_y * self._y * (1.0 - self._y)

    def step(self, lr, momentum=0.0):
        pass

    def params(self):
        return []

    def grads(self):
        return []


class Mlp:
    def __init__(self, layers: list):
        self.layers = layers

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad_y = layer.backward(grad_y)
        return grad_y

    def step(self, lr: float, momentum: float = 0.0) -> None:
        for layer in self.layers:
            layer.step(lr, momentum)

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def grads(self):
        out = []
        for layer in self.layers:
            out.extend(layer.grads())
        return out

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat_params(self, vec: np.ndarray) -> None:
        at = 0
        for p in self.params():
            p[...] = vec[at:at + p.size].reshape(p.shape)
            at += p.size
        if at != vec.size:
            raise ValueError(f"parameter vector length {vec.size}, expected {at}")

    def flat_grads(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads()])

    def copy(self) -> "Mlp":
        import copy as _copy

        return _copy.deepcopy(self)

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params()))


def mlp(sizes: list[int], rng: np.random.Generator, *, hidden_act=Relu, out_act=None) -> Mlp:
    """Build Dense/activation stacks like [K, 100, 16] in one call."""
    layers: list = []
    for i in range(len(sizes) - 1):
        layers.append(Dense(sizes[i], sizes[i + 1], rng))
        if i < len(sizes) - 2:
            layers.append(hidden_act())
        elif out_act is not None:
            layers.append(out_act())
    return Mlp(layers)
