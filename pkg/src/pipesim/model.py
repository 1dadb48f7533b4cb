"""Dense per-stage layers with hand-written forward/backward, and toy datasets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


class DimensionMismatch(ValueError):
    pass


class MissingForwardCache(LookupError):
    pass


@dataclass(frozen=True)
class StageModel:
    in_dim: int
    out_dim: int
    activation: str = "tanh"  # "tanh" | "identity"

    @property
    def n_params(self) -> int:
        return self.in_dim * self.out_dim + self.out_dim

    def unpack(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        values = np.asarray(values, dtype=float)
        if values.shape != (self.n_params,):
            raise DimensionMismatch(f"expected {self.n_params} parameters, got shape {values.shape}")
        split = self.in_dim * self.out_dim
        return values[:split].reshape(self.in_dim, self.out_dim), values[split:]

    @staticmethod
    def pack(weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
        return np.concatenate([np.ravel(weights), np.ravel(bias)])

    def init_values(self, rng: np.random.Generator) -> np.ndarray:
        scale = 1.0 / np.sqrt(self.in_dim)
        return self.pack(rng.normal(0.0, scale, (self.in_dim, self.out_dim)), np.zeros(self.out_dim))


def build_stages(features: int, hidden: int, classes: int, stages: int) -> list[StageModel]:
    dims = [features] + [hidden] * (stages - 1) + [classes]
    return [StageModel(dims[s], dims[s + 1], "identity" if s == stages - 1 else "tanh")
            for s in range(stages)]


@dataclass
class StageCache:
    inputs: np.ndarray
    outputs: np.ndarray


def _values(weights) -> np.ndarray:
    return getattr(weights, "values", weights)


def forward_stage(model: StageModel, weights, inputs: np.ndarray) -> np.ndarray:
    """Affine map followed by the stage activation. ``weights`` is ResolvedWeights or a flat vector."""
    W, b = model.unpack(_values(weights))
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 2 or inputs.shape[1] != model.in_dim:
        raise DimensionMismatch(f"expected (n, {model.in_dim}) inputs, got {inputs.shape}")
    z = inputs @ W + b
    return np.tanh(z) if model.activation == "tanh" else z


def backward_stage(model: StageModel, weights, cache: Optional[StageCache],
                   upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the loss w.r.t. this stage's parameters and its inputs.

    ``upstream`` is dLoss/d(stage output). The weights only enter through the
    gradient passed to the previous stage; parameter gradients depend on the
    cached activations.
    """
    if cache is None:
        raise MissingForwardCache("backward_stage called without a forward cache")
    W, _ = model.unpack(_values(weights))
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != cache.outputs.shape:
        raise DimensionMismatch(f"upstream {upstream.shape} vs outputs {cache.outputs.shape}")
    if model.activation == "tanh":
        dz = upstream * (1.0 - cache.outputs ** 2)
    else:
        dz = upstream
    grad = model.pack(cache.inputs.T @ dz, dz.sum(axis=0))
    return grad, dz @ W.T


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over rows and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    log_probs = shifted - np.log(exp.sum(axis=1, keepdims=True))
    loss = -float(log_probs[np.arange(n), labels].mean())
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def predict(models: list[StageModel], params: list[np.ndarray], inputs: np.ndarray) -> np.ndarray:
    x = inputs
    for model, values in zip(models, params):
        x = forward_stage(model, values, x)
    return x


def evaluate(models, params, inputs, labels) -> tuple[float, float]:
    logits = predict(models, params, inputs)
    loss, _ = softmax_cross_entropy(logits, labels)
    acc = float((logits.argmax(axis=1) == labels).mean())
    return loss, acc


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    generator: str
    seed: int

    @property
    def size(self) -> int:
        return len(self.labels)


def make_dataset(generator: str, samples: int, features: int, classes: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    labels = np.arange(samples) % classes
    rng.shuffle(labels)
    if generator == "blobs":
        centers = rng.normal(0.0, 1.5, (classes, features))
        inputs = centers[labels] + rng.normal(0.0, 1.0, (samples, features))
    elif generator == "spirals":
        if features < 2:
            raise DimensionMismatch("spirals need at least 2 features")
        r = rng.uniform(0.05, 1.0, samples)
        theta = 3.0 * np.pi * r + 2.0 * np.pi * labels / classes + rng.normal(0.0, 0.15, samples)
        inputs = np.zeros((samples, features))
        inputs[:, 0] = 2.0 * r * np.cos(theta)
        inputs[:, 1] = 2.0 * r * np.sin(theta)
        inputs[:, 2:] = rng.normal(0.0, 0.1, (samples, features - 2))
    else:
        raise ValueError(f"unknown dataset generator {generator!r}; expected 'blobs' or 'spirals'")
    return Dataset(inputs, labels.astype(np.int64), generator, seed)
