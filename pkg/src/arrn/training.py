"""Desk-scale training loop: AdamW, cosine annealing, per-batch level gates.

Everything is driven by explicit seeded generators (parameter
initialization happens at model construction; this module derives
separate streams for shuffling, level gates, and head dropout), so a
fixed config reproduces checkpoints byte for byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter
from .errors import NumericError
from .layers import TRAIN, softmax_cross_entropy
from .model import ArrnModel, DropoutConfig, DropoutMask, sample_mask


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 1e-3
    min_learning_rate: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-3
    dropout: float | None = 0.3  # per-level gate drop probability
    seed: int = 0
    dtype: str = "f32"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.dropout is not None and not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout probability must lie in [0, 1]")
        if self.dtype not in ("f32", "f64"):
            raise ValueError("dtype must be 'f32' or 'f64'")

    @property
    def numpy_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    def describe(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "min_learning_rate": self.min_learning_rate,
            "betas": list(self.betas),
            "weight_decay": self.weight_decay,
            "dropout": self.dropout,
            "seed": self.seed,
            "dtype": self.dtype,
        }


class AdamW:
    """Adam with decoupled weight decay; decay skips flagged parameters
    (biases, normalization scales and shifts)."""

    def __init__(
        self,
        params: list[Parameter],
        learning_rate: float,
        betas: tuple[float, float] = (0.9, 0.999),
        weight_decay: float = 0.0,
        eps: float = 1e-8,
    ):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1, self.beta2 = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.values) for p in params]
        self._v = [np.zeros_like(p.values) for p in params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, learning_rate: float | None = None):
        lr = self.learning_rate if learning_rate is None else learning_rate
        self.step_count += 1
        b1c = 1.0 - self.beta1**self.step_count
        b2c = 1.0 - self.beta2**self.step_count
        for i, p in enumerate(self.params):
            grad = p.grad
            if grad is None:
                grad = np.zeros_like(p.values)
            grad = grad.astype(np.float64)
            self._m[i] = self.beta1 * self._m[i] + (1 - self.beta1) * grad
            self._v[i] = self.beta2 * self._v[i] + (1 - self.beta2) * grad**2
            update = (self._m[i] / b1c) / (np.sqrt(self._v[i] / b2c) + self.eps)
            new = p.values.astype(np.float64) - lr * update
            if self.weight_decay and p.decay:
                new -= lr * self.weight_decay * p.values.astype(np.float64)
            p.assign(new.astype(p.values.dtype))


def cosine_learning_rate(config: TrainConfig, epoch: int) -> float:
    """Annealed rate for the given 0-based epoch."""
    if config.epochs == 1:
        return config.learning_rate
    progress = epoch / (config.epochs - 1)
    return config.min_learning_rate + 0.5 * (
        config.learning_rate - config.min_learning_rate
    ) * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    epoch_losses: list[float]
    learning_rates: list[float]
    final_train_accuracy: float


def train(
    model: ArrnModel,
    inputs: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
) -> TrainResult:
    """Optimize the model in place on ``(inputs, labels)``.

    ``inputs`` is ``(n, channels, *finest_extents)``. One gate mask is
    drawn per minibatch. A non-finite loss aborts immediately with
    :class:`~arrn.errors.NumericError` rather than training through it.
    """
    if model.dtype != np.dtype(config.numpy_dtype):
        raise ValueError(
            f"model dtype {model.dtype} does not match config {config.dtype}"
        )
    inputs = np.asarray(inputs, dtype=model.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    streams = np.random.SeedSequence(config.seed).spawn(3)
    shuffle_rng = np.random.default_rng(streams[0])
    gate_rng = np.random.default_rng(streams[1])
    head_rng = np.random.default_rng(streams[2])

    dropout = (
        DropoutConfig.uniform(config.dropout, len(model.residuals))
        if config.dropout is not None
        else None
    )
    optimizer = AdamW(
        model.parameters(),
        learning_rate=config.learning_rate,
        betas=config.betas,
        weight_decay=config.weight_decay,
    )

    n = inputs.shape[0]
    epoch_losses: list[float] = []
    learning_rates: list[float] = []
    for epoch in range(config.epochs):
        lr = cosine_learning_rate(config, epoch)
        order = shuffle_rng.permutation(n)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            mask = (
                sample_mask(gate_rng, dropout)
                if dropout is not None
                else DropoutMask.all_on(len(model.residuals))
            )
            logits = model.forward_graph(
                inputs[batch], mask, mode=TRAIN, rng=head_rng
            )
            loss = softmax_cross_entropy(logits, labels[batch])
            loss_value = float(loss.values)
            if not math.isfinite(loss_value):
                raise NumericError(
                    f"training diverged: non-finite loss at epoch {epoch}"
                )
            optimizer.zero_grad()
            loss.backward(np.ones_like(loss.values))
            optimizer.step(lr)
            model.bump_version()
            batch_losses.append(loss_value)
        epoch_losses.append(float(np.mean(batch_losses)))
        learning_rates.append(lr)

    predictions = predict_classes(model, inputs)
    accuracy = float(np.mean(predictions == labels))
    return TrainResult(epoch_losses, learning_rates, accuracy)


def predict_classes(
    model: ArrnModel, inputs: np.ndarray, batch_size: int = 256
) -> np.ndarray:
    """Eval-mode class predictions for finest-grid inputs, in batches."""
    from .layers import FeatureMap
    from .model import forward_full

    out = []
    for start in range(0, inputs.shape[0], batch_size):
        chunk = np.asarray(inputs[start : start + batch_size], dtype=model.dtype)
        logits = forward_full(model, FeatureMap(model.ladder[0], chunk))
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out)
