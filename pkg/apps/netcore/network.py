"""
Dense feed-forward classifier with exact hand-written gradients.

Parameters live in one flat float64 vector. Layer ``i`` occupies a
``fan_in * fan_out`` block of row-major weights followed by ``fan_out`` biases.
Every function here is pure: inputs are never mutated.
"""

from collections.abc import Callable, Iterator
from dataclasses import dataclass, field
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        """Backport of ``enum.StrEnum`` for Python 3.10."""

        __str__ = str.__str__
        __format__ = str.__format__

        @staticmethod
        def _generate_next_value_(name, start, count, last_values):
            return name.lower()


import numpy as np
from scipy.special import logsumexp

from .exceptions import ArgumentError, ConfigurationError, NumericError


class Activation(StrEnum):
    RELU = "relu"
    TANH = "tanh"


@dataclass(frozen=True)
class NetConfig:
    input_dim: int
    hidden_dims: tuple[int, ...]
    n_classes: int
    activation: Activation = Activation.RELU

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        try:
            object.__setattr__(self, "activation", Activation(self.activation))
        except ValueError as err:
            raise ConfigurationError(f"Unknown activation: {self.activation!r}") from err

        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigurationError("All layer dimensions must be >= 1.")
        if self.n_classes < 2:
            raise ConfigurationError("n_classes must be >= 2.")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.n_classes)

    @property
    def n_params(self) -> int:
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in zip(self.dims, self.dims[1:]))


@dataclass(frozen=True, eq=False)
class ParamSet:
    """Flat parameter vector; holds both meta (theta) and online (phi) models."""

    values: np.ndarray
    shape_spec: tuple[int, ...]

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        shape_spec = tuple(int(d) for d in self.shape_spec)
        expected = sum((a + 1) * b for a, b in zip(shape_spec, shape_spec[1:]))

        if values.ndim != 1 or values.size != expected:
            raise ConfigurationError(
                f"Parameter vector has {values.size} entries, layout {shape_spec} "
                f"needs {expected}."
            )
        if not np.all(np.isfinite(values)):
            raise NumericError("Parameter vector contains non-finite entries.")

        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "shape_spec", shape_spec)

    def __len__(self) -> int:
        return self.values.size

    def layers(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield (weights, biases) views, weights shaped (fan_in, fan_out)."""
        offset = 0
        for fan_in, fan_out in zip(self.shape_spec, self.shape_spec[1:]):
            n_w = fan_in * fan_out
            weights = self.values[offset : offset + n_w].reshape(fan_in, fan_out)
            offset += n_w
            biases = self.values[offset : offset + fan_out]
            offset += fan_out
            yield weights, biases

    def with_values(self, values: np.ndarray) -> "ParamSet":
        return ParamSet(values=values, shape_spec=self.shape_spec)

    def matches(self, cfg: NetConfig) -> bool:
        return self.shape_spec == cfg.dims


@dataclass(frozen=True, eq=False)
class LabeledBatch:
    inputs: np.ndarray
    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)

        if inputs.shape[0] < 1:
            raise ArgumentError("A batch needs at least one row.")
        if labels.size != inputs.shape[0]:
            raise ArgumentError(
                f"Batch has {inputs.shape[0]} rows but {labels.size} labels."
            )
        if np.any(labels < 0):
            raise ArgumentError("Labels must be non-negative class indices.")

        inputs.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def check(self, cfg: NetConfig):
        if self.inputs.shape[1] != cfg.input_dim:
            raise ConfigurationError(
                f"Batch has {self.inputs.shape[1]} columns, network expects {cfg.input_dim}."
            )
        if np.any(self.labels >= cfg.n_classes):
            raise ArgumentError(f"Labels must be < n_classes={cfg.n_classes}.")


def init_params(cfg: NetConfig, rng: np.random.Generator) -> ParamSet:
    """Glorot-uniform weights, zero biases."""
    chunks = []
    for fan_in, fan_out in zip(cfg.dims, cfg.dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ParamSet(values=np.concatenate(chunks), shape_spec=cfg.dims)


def zero_params(cfg: NetConfig) -> ParamSet:
    return ParamSet(values=np.zeros(cfg.n_params), shape_spec=cfg.dims)


def _activate(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.RELU:
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(z: np.ndarray, a: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.RELU:
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


def _forward_trace(params: ParamSet, cfg: NetConfig, inputs: np.ndarray):
    """Return (activations, pre-activations); the last pre-activation is the logits."""
    if not params.matches(cfg):
        raise ConfigurationError(
            f"Parameter layout {params.shape_spec} does not match network {cfg.dims}."
        )
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if x.shape[1] != cfg.input_dim:
        raise ConfigurationError(
            f"Inputs have {x.shape[1]} columns, network expects {cfg.input_dim}."
        )

    activations = [x]
    pre_activations = []
    n_layers = len(cfg.dims) - 1
    for index, (weights, biases) in enumerate(params.layers()):
        z = activations[-1] @ weights + biases
        if not np.all(np.isfinite(z)):
            raise NumericError(f"Non-finite pre-activation in layer {index}.", layer=index)
        pre_activations.append(z)
        if index < n_layers - 1:
            activations.append(_activate(z, cfg.activation))
    return activations, pre_activations


def forward(params: ParamSet, cfg: NetConfig, inputs: np.ndarray) -> np.ndarray:
    """Logits of shape (n, n_classes)."""
    _, pre_activations = _forward_trace(params, cfg, inputs)
    return pre_activations[-1]


def ce_losses(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row softmax cross-entropy via log-sum-exp."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)

    if logits.shape[0] == 0 or labels.size == 0:
        raise ArgumentError("Cross-entropy of an empty batch is undefined.")
    if labels.size != logits.shape[0]:
        raise ArgumentError(f"{logits.shape[0]} logit rows but {labels.size} labels.")
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise ArgumentError(f"Labels must lie in [0, {logits.shape[1]}).")

    lse = logsumexp(logits, axis=1)
    return lse - logits[np.arange(labels.size), labels]


def ce_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy."""
    return float(np.mean(ce_losses(logits, labels)))


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def loss_and_grad(
    params: ParamSet, cfg: NetConfig, batch: LabeledBatch
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its exact gradient with respect to ``params.values``."""
    batch.check(cfg)
    activations, pre_activations = _forward_trace(params, cfg, batch.inputs)
    logits = pre_activations[-1]
    n = len(batch)

    lse = logsumexp(logits, axis=1, keepdims=True)
    loss = float(np.mean(lse[:, 0] - logits[np.arange(n), batch.labels]))

    delta = np.exp(logits - lse)
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n

    layers = list(params.layers())
    grads: list[np.ndarray] = [np.empty(0)] * (2 * len(layers))
    for index in reversed(range(len(layers))):
        weights, _ = layers[index]
        grads[2 * index] = (activations[index].T @ delta).ravel()
        grads[2 * index + 1] = delta.sum(axis=0)
        if index > 0:
            delta = (delta @ weights.T) * _activation_grad(
                pre_activations[index - 1], activations[index], cfg.activation
            )
        if not np.all(np.isfinite(delta)):
            raise NumericError(f"Non-finite gradient in layer {index}.", layer=index)

    return loss, np.concatenate(grads)


def sgd_step(params: ParamSet, grad: np.ndarray, lr: float) -> ParamSet:
    """Return ``params - lr * grad``; the input is left untouched."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.values.shape:
        raise ArgumentError(
            f"Gradient shape {grad.shape} does not match parameters {params.values.shape}."
        )
    if not np.all(np.isfinite(grad)):
        raise NumericError("Non-finite gradient passed to sgd_step.")
    if lr < 0 or not np.isfinite(lr):
        raise ArgumentError(f"Learning rate must be finite and non-negative, got {lr}.")

    updated = params.values - lr * grad
    if not np.all(np.isfinite(updated)):
        raise NumericError("sgd_step produced non-finite parameters.")
    return params.with_values(updated)


def finite_diff_grad(
    params: ParamSet,
    cfg: NetConfig,
    batch: LabeledBatch | None,
    eps: float = 1e-5,
    objective: Callable[[np.ndarray], float] | None = None,
) -> np.ndarray:
    """
    Central-difference gradient estimate.

    When ``objective`` is given it is evaluated on raw parameter vectors and
    ``cfg``/``batch`` are ignored.
    """
    if not 0.0 < eps <= 1e-2:
        raise ArgumentError(f"eps must lie in (0, 1e-2], got {eps}.")

    if objective is None:
        if batch is None:
            raise ArgumentError("A batch is required without an explicit objective.")
        batch.check(cfg)

        def objective(values: np.ndarray) -> float:
            return ce_loss(forward(params.with_values(values), cfg, batch.inputs), batch.labels)

    base = params.values.copy()
    grad = np.empty_like(base)
    for i in range(base.size):
        original = base[i]
        base[i] = original + eps
        upper = objective(base)
        base[i] = original - eps
        lower = objective(base)
        base[i] = original
        grad[i] = (upper - lower) / (2.0 * eps)
    return grad
