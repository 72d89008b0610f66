"""Framework-free reference model: softmax regression or a one-hidden-layer MLP.

Parameters live in one flat float64 vector so that gradients, sparsification
and aggregation all operate on plain 1-D arrays. Layout is

    logistic: W (d x K), b (K)
    mlp:      W1 (d x h), b1 (h), W2 (h x K), b2 (K)

each block flattened row-major and concatenated in that order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigurationError, InputError

GradientVector = np.ndarray


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    num_classes: int
    hidden: int = 64
    kind: str = "mlp"  # "mlp" | "logistic"

    def __post_init__(self):
        if self.kind not in ("mlp", "logistic"):
            raise ConfigurationError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ConfigurationError("model needs input_dim >= 1 and num_classes >= 2")
        if self.kind == "mlp" and self.hidden < 1:
            raise ConfigurationError("mlp hidden width must be >= 1")

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        d, k, h = self.input_dim, self.num_classes, self.hidden
        if self.kind == "logistic":
            return [(d, k), (k,)]
        return [(d, h), (h,), (h, k), (k,)]

    @property
    def dim(self) -> int:
        return int(sum(np.prod(s) for s in self.shapes))

    def unpack(self, values: np.ndarray) -> list[np.ndarray]:
        """Views of the flat vector, one per parameter block."""
        out, pos = [], 0
        for shape in self.shapes:
            n = int(np.prod(shape))
            out.append(values[pos:pos + n].reshape(shape))
            pos += n
        return out


@dataclass(frozen=True, eq=False)
class ModelParameters:
    """Flat parameter vector tied to its architecture. Treated as immutable."""

    spec: ModelSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.shape[0] != self.spec.dim:
            raise ConfigurationError(
                f"parameter vector has shape {v.shape}, expected ({self.spec.dim},)")
        if not np.all(np.isfinite(v)):
            raise InputError("model parameters must be finite")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.spec.dim

    def with_values(self, values: np.ndarray) -> "ModelParameters":
        return ModelParameters(self.spec, values)


def init_model(spec: ModelSpec, seed: int) -> ModelParameters:
    """Glorot-scaled normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    blocks = []
    for shape in spec.shapes:
        if len(shape) == 2:
            scale = np.sqrt(2.0 / (shape[0] + shape[1]))
            blocks.append(rng.normal(0.0, scale, size=shape).ravel())
        else:
            blocks.append(np.zeros(shape))
    return ModelParameters(spec, np.concatenate(blocks))


def zeros_like(model: ModelParameters) -> GradientVector:
    return np.zeros(model.dim)


def _check(model: ModelParameters, batch: Dataset) -> None:
    if len(batch) == 0:
        raise ConfigurationError("batch must be non-empty")
    if batch.features.shape[1] != model.spec.input_dim:
        raise ConfigurationError(
            f"feature dim {batch.features.shape[1]} != model input dim {model.spec.input_dim}")
    if batch.num_classes > model.spec.num_classes:
        raise ConfigurationError("dataset has more classes than the model outputs")


def _logits(model: ModelParameters, x: np.ndarray):
    p = model.spec.unpack(model.values)
    if model.spec.kind == "logistic":
        w, b = p
        return x @ w + b, None
    w1, b1, w2, b2 = p
    hidden = np.tanh(x @ w1 + b1)
    return hidden @ w2 + b2, hidden


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def predict_proba(model: ModelParameters, x: np.ndarray) -> np.ndarray:
    z, _ = _logits(model, np.asarray(x, dtype=np.float64))
    return np.exp(_log_softmax(z))


def forward_loss(model: ModelParameters, batch: Dataset) -> float:
    """Mean cross-entropy over the batch."""
    _check(model, batch)
    z, _ = _logits(model, batch.features)
    logp = _log_softmax(z)
    loss = -logp[np.arange(len(batch)), batch.labels].mean()
    # exact-probability predictions can produce -0.0
    return max(float(loss), 0.0)


def gradient(model: ModelParameters, batch: Dataset) -> GradientVector:
    """Analytic gradient of forward_loss with respect to the flat parameters."""
    _check(model, batch)
    x, y = batch.features, batch.labels
    n = len(batch)
    z, hidden = _logits(model, x)
    delta = np.exp(_log_softmax(z))
    delta[np.arange(n), y] -= 1.0
    delta /= n
    if model.spec.kind == "logistic":
        return np.concatenate([(x.T @ delta).ravel(), delta.sum(axis=0)])
    _, _, w2, _ = model.spec.unpack(model.values)
    g_w2 = hidden.T @ delta
    g_b2 = delta.sum(axis=0)
    dh = (delta @ w2.T) * (1.0 - hidden ** 2)
    g_w1 = x.T @ dh
    g_b1 = dh.sum(axis=0)
    return np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2])


def sgd_step(model: ModelParameters, g: GradientVector, lr: float) -> ModelParameters:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (model.dim,):
        raise ConfigurationError(f"gradient shape {g.shape} != ({model.dim},)")
    if not lr > 0:
        raise ConfigurationError("learning rate must be positive")
    return model.with_values(model.values - lr * g)


def predict(model: ModelParameters, x: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the smallest class index
    z, _ = _logits(model, np.asarray(x, dtype=np.float64))
    return np.argmax(z, axis=1)


def evaluate_accuracy(model: ModelParameters, test: Dataset) -> float:
    _check(model, test)
    return float(np.mean(predict(model, test.features) == test.labels))
