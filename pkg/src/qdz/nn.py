"""A small dense network with hand-written backprop.

Weights are float64 matrices of shape ``(in, out)``; a layer's weight
vector is the row-major flattening of that matrix.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

RELU = "relu"
IDENTITY = "identity"


@dataclass
class Dense:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = IDENTITY

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


@dataclass
class Network:
    layers: list[Dense]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ValueError(
                    f"layer dimensions do not compose: {a.weight.shape} -> {b.weight.shape}")

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].weight.shape[0]] + [l.weight.shape[1] for l in self.layers]

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def weight_vectors(self) -> list[np.ndarray]:
        return [l.weight.ravel().copy() for l in self.layers]

    def with_weights(self, vectors) -> "Network":
        """A copy whose weight matrices are replaced by ``vectors`` (biases kept)."""
        layers = [Dense(np.asarray(v, dtype=np.float64).reshape(l.weight.shape), l.bias.copy(), l.activation)
                  for l, v in zip(self.layers, vectors)]
        return Network(layers)

    def checksum(self) -> int:
        import zlib
        crc = 0
        for l in self.layers:
            crc = zlib.crc32(l.weight.tobytes(), crc)
            crc = zlib.crc32(l.bias.tobytes(), crc)
        return crc


@dataclass(frozen=True)
class DistillationConfig:
    temperature: float = 5.0
    soft_weight: float = 0.5

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.soft_weight <= 1.0:
            raise ValueError("soft_weight must lie in [0, 1]")


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)


def init_network(sizes, seed: int, activation: str = RELU) -> Network:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init; last layer is linear."""
    rng = np.random.default_rng(seed)
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_in, n_out))
        b = rng.uniform(-bound, bound, size=n_out)
        act = IDENTITY if i == len(sizes) - 2 else activation
        layers.append(Dense(w, b, act))
    return Network(layers)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == RELU:
        return np.maximum(z, 0.0)
    if kind == IDENTITY:
        return z
    raise ValueError(f"unknown activation {kind!r}")


def forward(net: Network, x, cache: ForwardCache | None = None) -> np.ndarray:
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != net.layers[0].weight.shape[0]:
        raise ValueError(f"input shape {h.shape} does not match network input {net.layers[0].weight.shape[0]}")
    for layer in net.layers:
        z = h @ layer.weight + layer.bias
        if cache is not None:
            cache.inputs.append(h)
            cache.preacts.append(z)
        h = _activate(z, layer.activation)
    return h


def backward(net: Network, cache: ForwardCache, grad_logits) -> list[tuple[np.ndarray, np.ndarray]]:
    """Reverse-mode gradients ``[(dW, db), ...]`` given dLoss/dLogits."""
    g = np.asarray(grad_logits, dtype=np.float64)
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if layer.activation == RELU:
            g = g * (cache.preacts[i] > 0)
        grads[i] = (cache.inputs[i].T @ g, g.sum(axis=0))
        if i:
            g = g @ layer.weight.T
    return grads


def sgd_step(net: Network, grads, lr: float) -> Network:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for layer, (dw, db) in zip(net.layers, grads):
        layer.weight -= lr * dw
        layer.bias -= lr * db
    return net


def softmax_T(logits, T: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_T(logits, T: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / T
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> None:
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match batch of {logits.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("label out of range for the number of classes")


def cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy against integer labels and its logit gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_labels(logits, labels)
    n = logits.shape[0]
    logp = log_softmax_T(logits)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def distillation_loss(student_logits, teacher_logits, labels,
                      cfg: DistillationConfig) -> tuple[float, np.ndarray]:
    """``gamma * T^2 * CE(teacher_T, student_T) + (1 - gamma) * CE(labels, student)``.

    Batch-averaged; returns the loss and its gradient w.r.t. the student logits.
    """
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise ValueError(f"student {s.shape} and teacher {t.shape} logits differ in shape")
    T, gamma = cfg.temperature, cfg.soft_weight
    n = s.shape[0]
    q_t = softmax_T(t, T)
    logq_s = log_softmax_T(s, T)
    soft = -(q_t * logq_s).sum(axis=1).mean()
    # d/ds of T^2 * CE at temperature T is T * (q_s - q_t)
    soft_grad = T * (np.exp(logq_s) - q_t) / n
    hard, hard_grad = cross_entropy(s, labels)
    loss = gamma * T * T * soft + (1.0 - gamma) * hard
    return float(loss), gamma * soft_grad + (1.0 - gamma) * hard_grad


def squared_error(outputs, targets) -> tuple[float, np.ndarray]:
    """``0.5 * sum((y - t)^2) / n`` and its gradient."""
    y = np.asarray(outputs, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64).reshape(y.shape)
    r = y - t
    n = y.shape[0]
    return float(0.5 * (r * r).sum() / n), r / n


def predict(net: Network, x, batch: int = 4096) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = [forward(net, x[i : i + batch]).argmax(axis=1) for i in range(0, len(x), batch)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(net: Network, x, y) -> float:
    return float((predict(net, x) == np.asarray(y)).mean())
