"""Differentiable scalar objectives over a flat parameter vector.

Concrete objectives come in two families:

* analytic landscapes (quadratic forms, sums of Gaussian wells) whose loss
  ignores any batch and whose gradients have closed forms, and
* data-driven classifiers (softmax regression, a small dense net) whose loss
  is the mean cross-entropy over a batch.

All objectives are immutable after construction; ``loss`` and ``grad`` are
pure functions of ``(theta, batch)``. A central-difference gradient oracle
and a Hessian-vector product built on it live here as well, so every
analytic gradient in the package can be cross-checked independently.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .validation import (
    as_float_vector,
    check_param_vector,
    check_positive,
    check_same_dim,
)

VALID_ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class Batch:
    """Labeled examples with per-example domain ids.

    ``features`` is ``(n, d)``, ``labels`` and ``domain_ids`` are ``(n,)``
    integer arrays. The three lengths must agree and ``n >= 1``.
    """

    features: np.ndarray
    labels: np.ndarray
    domain_ids: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        domain_ids = np.asarray(self.domain_ids, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {features.shape}")
        if features.shape[0] == 0:
            raise ValueError("batch must contain at least one example")
        if not np.all(np.isfinite(features)):
            raise ValueError("features contain non-finite entries")
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise ValueError("labels length must equal the number of feature rows")
        if domain_ids.ndim != 1 or domain_ids.shape[0] != features.shape[0]:
            raise ValueError("domain_ids length must equal the number of feature rows")
        if np.any(labels < 0):
            raise ValueError("labels must be nonnegative class ids")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "domain_ids", domain_ids)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


def make_batch(features, labels, domain_ids=None) -> Batch:
    """Build a Batch; domain ids default to all-zero."""
    features = np.asarray(features, dtype=np.float64)
    if domain_ids is None:
        domain_ids = np.zeros(features.shape[0], dtype=np.int64)
    return Batch(features=features, labels=np.asarray(labels), domain_ids=np.asarray(domain_ids))


class Objective(ABC):
    """A deterministic scalar loss with an exact gradient.

    Subclasses set ``kind`` and ``param_dim`` and implement ``_loss`` /
    ``_grad``. Analytic kinds ignore the batch entirely; data-driven kinds
    require one and reject feature widths that disagree with their
    architecture.
    """

    kind: str
    param_dim: int

    def loss(self, theta, batch: Batch | None = None) -> float:
        theta = check_param_vector(theta, self.param_dim)
        batch = self._check_batch(batch)
        return float(self._loss(theta, batch))

    def grad(self, theta, batch: Batch | None = None) -> np.ndarray:
        theta = check_param_vector(theta, self.param_dim)
        batch = self._check_batch(batch)
        g = self._grad(theta, batch)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"{self.kind} gradient has non-finite entries")
        return g

    def initial_params(self) -> np.ndarray:
        """Deterministic starting point for this objective."""
        return np.zeros(self.param_dim)

    def _check_batch(self, batch: Batch | None) -> Batch | None:
        return batch

    @abstractmethod
    def _loss(self, theta: np.ndarray, batch: Batch | None) -> float: ...

    @abstractmethod
    def _grad(self, theta: np.ndarray, batch: Batch | None) -> np.ndarray: ...


class QuadraticObjective(Objective):
    """L(theta) = 1/2 theta^T diag(eigenvalues) theta."""

    kind = "quadratic"

    def __init__(self, eigenvalues):
        eigenvalues = as_float_vector(eigenvalues, name="eigenvalues")
        if not np.any(eigenvalues > 0):
            raise ValueError("at least one eigenvalue must be positive")
        self.eigenvalues = eigenvalues
        self.param_dim = eigenvalues.size

    def _loss(self, theta, batch):
        return 0.5 * float(np.dot(self.eigenvalues * theta, theta))

    def _grad(self, theta, batch):
        return self.eigenvalues * theta


class GaussianWellsObjective(Objective):
    """Negative sum of Gaussian bumps, offset so the loss is nonnegative.

    L(theta) = sum(depths) - sum_i depths[i] * exp(-|theta - centers[i]|^2 / (2 widths[i]^2))

    Supports 1-D and 2-D parameter spaces (kind ``analytic-1d`` /
    ``analytic-2d``). A narrow deep well next to a wide shallow one gives
    the classic sharp-vs-flat minimum pair.
    """

    def __init__(self, centers, depths, widths):
        centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        if centers.ndim != 2:
            raise ValueError("centers must be a (n_wells, dim) array")
        depths = as_float_vector(depths, name="depths")
        widths = as_float_vector(widths, name="widths")
        n_wells, dim = centers.shape
        if dim not in (1, 2):
            raise ValueError(f"only 1-D and 2-D landscapes are supported, got dim={dim}")
        if depths.size != n_wells or widths.size != n_wells:
            raise ValueError("centers, depths and widths must describe the same wells")
        if np.any(depths <= 0):
            raise ValueError("well depths must be positive")
        if np.any(widths <= 0):
            raise ValueError("well widths must be positive")
        self.centers = centers
        self.depths = depths
        self.widths = widths
        self.offset = float(np.sum(depths))
        self.param_dim = dim
        self.kind = f"analytic-{dim}d"

    def _well_terms(self, theta):
        diffs = theta[None, :] - self.centers  # (n_wells, dim)
        sq = np.sum(diffs**2, axis=1)
        return diffs, self.depths * np.exp(-sq / (2.0 * self.widths**2))

    def _loss(self, theta, batch):
        _, terms = self._well_terms(theta)
        return self.offset - float(np.sum(terms))

    def _grad(self, theta, batch):
        diffs, terms = self._well_terms(theta)
        return np.sum((terms / self.widths**2)[:, None] * diffs, axis=0)


def _stable_softmax_terms(logits: np.ndarray, labels: np.ndarray):
    """Log-sum-exp with max subtraction; returns (mean CE, softmax probs)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    rows = np.arange(logits.shape[0])
    loss = float(np.mean(lse - shifted[rows, labels]))
    probs = np.exp(shifted - lse[:, None])
    return loss, probs


class _DataDrivenObjective(Objective):
    """Shared batch checking for classifiers over (features, labels)."""

    n_features: int
    n_classes: int

    def _check_batch(self, batch):
        if batch is None:
            raise ValueError(f"{self.kind} objective requires a batch")
        if batch.n_features != self.n_features:
            raise ValueError(
                f"batch has {batch.n_features} features, objective expects {self.n_features}"
            )
        if np.any(batch.labels >= self.n_classes):
            raise ValueError(f"labels must be < n_classes ({self.n_classes})")
        return batch

    def logits(self, theta, features) -> np.ndarray:
        """Class scores for a feature matrix; used for prediction."""
        theta = check_param_vector(theta, self.param_dim)
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.n_features:
            raise ValueError(
                f"features must be (n, {self.n_features}), got shape {features.shape}"
            )
        return self._logits(theta, features)

    @abstractmethod
    def _logits(self, theta: np.ndarray, features: np.ndarray) -> np.ndarray: ...


class LogisticRegressionObjective(_DataDrivenObjective):
    """Multinomial logistic regression; theta = [W.ravel(), b]."""

    kind = "logistic-regression"

    def __init__(self, n_features: int, n_classes: int):
        if n_features < 1 or n_classes < 2:
            raise ValueError("need n_features >= 1 and n_classes >= 2")
        self.n_features = n_features
        self.n_classes = n_classes
        self.param_dim = n_features * n_classes + n_classes

    def _unpack(self, theta):
        w = theta[: self.n_features * self.n_classes].reshape(self.n_features, self.n_classes)
        b = theta[self.n_features * self.n_classes :]
        return w, b

    def _logits(self, theta, features):
        w, b = self._unpack(theta)
        return features @ w + b

    def _loss(self, theta, batch):
        loss, _ = _stable_softmax_terms(self._logits(theta, batch.features), batch.labels)
        return loss

    def _grad(self, theta, batch):
        _, probs = _stable_softmax_terms(self._logits(theta, batch.features), batch.labels)
        probs[np.arange(batch.n), batch.labels] -= 1.0
        probs /= batch.n
        dw = batch.features.T @ probs
        db = probs.sum(axis=0)
        return np.concatenate([dw.ravel(), db])


class MLPObjective(_DataDrivenObjective):
    """Fully connected net with cross-entropy loss and manual backprop.

    Weights and biases are initialized uniformly in
    ``[-1/sqrt(fan_in), +1/sqrt(fan_in)]`` from the given seed, so the same
    seed always yields the same starting parameters.
    """

    kind = "mlp"

    def __init__(self, layer_sizes: Sequence[int], activation: str = "tanh", seed: int = 0):
        layer_sizes = tuple(int(s) for s in layer_sizes)
        if len(layer_sizes) < 2:
            raise ValueError("layer_sizes needs at least input and output sizes")
        if any(s < 1 for s in layer_sizes):
            raise ValueError(f"layer sizes must be >= 1, got {layer_sizes}")
        if activation not in VALID_ACTIVATIONS:
            raise ValueError(f"activation must be one of {VALID_ACTIVATIONS}")
        self.layer_sizes = layer_sizes
        self.activation = activation
        self.seed = int(seed)
        self.n_features = layer_sizes[0]
        self.n_classes = layer_sizes[-1]
        self._shapes = [
            (layer_sizes[i], layer_sizes[i + 1]) for i in range(len(layer_sizes) - 1)
        ]
        self.param_dim = sum(fi * fo + fo for fi, fo in self._shapes)
        self._theta0 = self._init_params()

    def _init_params(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        parts = []
        for fan_in, fan_out in self._shapes:
            bound = 1.0 / np.sqrt(fan_in)
            parts.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
            parts.append(rng.uniform(-bound, bound, size=fan_out))
        return np.concatenate(parts)

    def initial_params(self) -> np.ndarray:
        return self._theta0.copy()

    def _unpack(self, theta):
        layers = []
        pos = 0
        for fan_in, fan_out in self._shapes:
            w = theta[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
            pos += fan_in * fan_out
            b = theta[pos : pos + fan_out]
            pos += fan_out
            layers.append((w, b))
        return layers

    def _activate(self, z):
        if self.activation == "tanh":
            return np.tanh(z)
        return np.maximum(z, 0.0)

    def _activate_deriv(self, z, a):
        if self.activation == "tanh":
            return 1.0 - a**2
        return (z > 0.0).astype(np.float64)

    def _forward(self, theta, features):
        layers = self._unpack(theta)
        activations = [features]
        pre_activations = []
        a = features
        for w, b in layers[:-1]:
            z = a @ w + b
            a = self._activate(z)
            pre_activations.append(z)
            activations.append(a)
        w, b = layers[-1]
        logits = a @ w + b
        return layers, activations, pre_activations, logits

    def _logits(self, theta, features):
        return self._forward(theta, features)[-1]

    def _loss(self, theta, batch):
        logits = self._logits(theta, batch.features)
        loss, _ = _stable_softmax_terms(logits, batch.labels)
        return loss

    def _grad(self, theta, batch):
        layers, activations, pre_activations, logits = self._forward(theta, batch.features)
        _, probs = _stable_softmax_terms(logits, batch.labels)
        delta = probs
        delta[np.arange(batch.n), batch.labels] -= 1.0
        delta /= batch.n

        grads_w = [None] * len(layers)
        grads_b = [None] * len(layers)
        for i in range(len(layers) - 1, -1, -1):
            grads_w[i] = activations[i].T @ delta
            grads_b[i] = delta.sum(axis=0)
            if i > 0:
                w, _ = layers[i]
                delta = (delta @ w.T) * self._activate_deriv(
                    pre_activations[i - 1], activations[i]
                )
        return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in zip(grads_w, grads_b)])


class CountingObjective(Objective):
    """Delegating wrapper that counts loss and gradient evaluations."""

    def __init__(self, inner: Objective):
        self.inner = inner
        self.kind = inner.kind
        self.param_dim = inner.param_dim
        self.loss_calls = 0
        self.grad_calls = 0

    def reset(self):
        self.loss_calls = 0
        self.grad_calls = 0

    def loss(self, theta, batch=None):
        self.loss_calls += 1
        return self.inner.loss(theta, batch)

    def grad(self, theta, batch=None):
        self.grad_calls += 1
        return self.inner.grad(theta, batch)

    def initial_params(self):
        return self.inner.initial_params()

    def _loss(self, theta, batch):  # pragma: no cover - delegation only
        return self.inner._loss(theta, batch)

    def _grad(self, theta, batch):  # pragma: no cover - delegation only
        return self.inner._grad(theta, batch)


def make_quadratic(eigenvalues) -> QuadraticObjective:
    """Quadratic bowl with the given Hessian eigenvalues."""
    return QuadraticObjective(eigenvalues)


def make_two_minima_landscape(centers, depths, widths) -> GaussianWellsObjective:
    """1-D landscape with exactly two Gaussian wells.

    Raises if fewer or more than two wells are described; single-well input
    cannot exhibit the sharp/flat contrast this landscape exists to show.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 1)
    if centers.shape[0] != 2:
        raise ValueError(f"exactly two wells required, got {centers.shape[0]}")
    return GaussianWellsObjective(centers, depths, widths)


def make_logreg(n_features: int, n_classes: int) -> LogisticRegressionObjective:
    return LogisticRegressionObjective(n_features, n_classes)


def make_mlp(layer_sizes, activation: str = "tanh", seed: int = 0) -> MLPObjective:
    return MLPObjective(layer_sizes, activation=activation, seed=seed)


# Frozen sharp/flat well pair: a narrow deep well at -1 and a wide shallow
# well at +1. Constants were tuned on a dense grid so that at rho = 0.1 the
# ball-max perturbed loss is lower at the sharp minimum while the gap is
# larger there (see tests/test_sharpness.py).
SHARP_FLAT_WELLS = {
    "centers": (-1.0, 1.0),
    "depths": (2.0, 0.4),
    "widths": (0.08, 0.6),
}


def make_sharp_flat_landscape() -> GaussianWellsObjective:
    """The frozen two-well fixture used by the landscape demo and tests."""
    return make_two_minima_landscape(**SHARP_FLAT_WELLS)


def finite_diff_grad(obj: Objective, theta, batch: Batch | None = None, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient oracle, coordinate by coordinate.

    Independent of any analytic gradient; used to cross-check ``grad``.
    """
    check_positive(step, "step")
    theta = check_param_vector(theta, obj.param_dim)
    g = np.empty_like(theta)
    for i in range(theta.size):
        bumped = theta.copy()
        bumped[i] = theta[i] + step
        up = obj.loss(bumped, batch)
        bumped[i] = theta[i] - step
        down = obj.loss(bumped, batch)
        g[i] = (up - down) / (2.0 * step)
    return g


def hessian_vector_product(
    obj: Objective, theta, v, batch: Batch | None = None, step: float = 1e-5
) -> np.ndarray:
    """Approximate H @ v by central differences of the gradient.

    Exact for quadratic objectives up to roundoff.
    """
    check_positive(step, "step")
    theta = check_param_vector(theta, obj.param_dim)
    v = as_float_vector(v, name="v")
    check_same_dim(theta, v, "theta", "v")
    if np.linalg.norm(v) == 0.0:
        raise ValueError("direction v must be nonzero")
    up = obj.grad(theta + step * v, batch)
    down = obj.grad(theta - step * v, batch)
    return (up - down) / (2.0 * step)
