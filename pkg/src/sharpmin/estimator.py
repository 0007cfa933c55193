"""Scikit-learn compatible classifier trained with sharpness-aware rules."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_random_state, check_X_y

from .objectives import Batch, make_logreg, make_mlp
from .optimizers import GRADIENT_RULES, AdamState, HyperParams, adam_step, surrogate_gap
from .sharpness import SharpnessProfile, gap_profile


class SharpnessAwareClassifier(ClassifierMixin, BaseEstimator):
    """Softmax classifier (optionally with hidden layers) trained by a
    sharpness-aware gradient rule and an Adam stepper.

    Parameters
    ----------
    rule : {'erm', 'sam', 'gsam', 'erm_sam', 'sagm'}, default='sagm'
        Effective-gradient rule used at every step.
    hidden_layer_sizes : tuple of int, default=()
        Hidden layer widths; empty means plain multinomial logistic
        regression.
    activation : {'tanh', 'relu'}, default='tanh'
        Hidden-layer nonlinearity (ignored without hidden layers).
    rho : float, default=0.05
        Perturbation radius of the ascent step.
    alpha : float, default=0.001
        Gradient-matching coefficient (sagm rule only).
    beta : float, default=0.4
        Orthogonal-descent scale (gsam rule only).
    learning_rate : float, default=0.01
        Adam learning rate.
    weight_decay : float, default=0.0
        Decoupled weight decay applied after each Adam update.
    n_iterations : int, default=300
        Number of gradient steps.
    batch_size : int, default=32
        Examples per minibatch. When ``domains`` is passed to :meth:`fit`,
        this is the number of examples drawn from *each* domain.
    random_state : int, RandomState instance or None, default=None
        Controls parameter initialization and batch sampling.

    Attributes
    ----------
    classes_ : ndarray of shape (n_classes,)
        Class labels seen during fit.
    theta_ : ndarray
        Fitted flat parameter vector.
    loss_history_ : ndarray of shape (n_iterations,)
        Minibatch training loss per step.
    n_iter_ : int
        Number of steps actually run.

    Examples
    --------
    >>> from sharpmin.data import make_rotated_domains
    >>> ds = make_rotated_domains(3, 60, 20.0, 0.3, seed=0)
    >>> batch = ds.as_batch()
    >>> clf = SharpnessAwareClassifier(rule="sagm", n_iterations=200, random_state=0)
    >>> acc = clf.fit(batch.features, batch.labels).score(batch.features, batch.labels)
    """

    def __init__(
        self,
        rule: str = "sagm",
        hidden_layer_sizes: tuple = (),
        activation: str = "tanh",
        rho: float = 0.05,
        alpha: float = 0.001,
        beta: float = 0.4,
        learning_rate: float = 0.01,
        weight_decay: float = 0.0,
        n_iterations: int = 300,
        batch_size: int = 32,
        random_state=None,
    ):
        self.rule = rule
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.rho = rho
        self.alpha = alpha
        self.beta = beta
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.n_iterations = n_iterations
        self.batch_size = batch_size
        self.random_state = random_state

    def _hyperparams(self) -> HyperParams:
        return HyperParams(
            rho=self.rho,
            alpha=self.alpha,
            beta=self.beta,
            lr=self.learning_rate,
            weight_decay=self.weight_decay,
        )

    def _build_objective(self, n_features: int, n_classes: int, seed: int):
        if self.hidden_layer_sizes:
            sizes = [n_features, *self.hidden_layer_sizes, n_classes]
            return make_mlp(sizes, activation=self.activation, seed=seed)
        return make_logreg(n_features, n_classes)

    def fit(self, X, y, domains=None):
        """Fit on (X, y); optional per-example domain ids enable
        domain-balanced minibatches.
        """
        X, y = check_X_y(X, y)
        if self.rule not in GRADIENT_RULES:
            raise ValueError(
                f"unknown rule {self.rule!r}; choose from {sorted(GRADIENT_RULES)}"
            )
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be >= 1")
        hp = self._hyperparams()
        rule_fn = GRADIENT_RULES[self.rule]

        self.classes_ = unique_labels(y)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        y_idx = np.searchsorted(self.classes_, y)
        self.n_features_in_ = X.shape[1]

        rng = check_random_state(self.random_state)
        init_seed = int(rng.randint(2**31 - 1))
        sample_rng = np.random.default_rng(int(rng.randint(2**31 - 1)))
        obj = self._build_objective(X.shape[1], self.classes_.size, init_seed)

        if domains is not None:
            domains = np.asarray(domains)
            if domains.shape != (X.shape[0],):
                raise ValueError("domains must be one id per example")
            groups = [np.flatnonzero(domains == d) for d in np.unique(domains)]
        else:
            groups = [np.arange(X.shape[0])]
        for g in groups:
            if g.size < min(self.batch_size, X.shape[0]):
                raise ValueError("every domain needs at least batch_size examples")

        theta = obj.initial_params()
        state = AdamState.initial(obj.param_dim)
        losses = np.empty(self.n_iterations)
        for t in range(self.n_iterations):
            feats, labels, ids = [], [], []
            for domain_id, g in enumerate(groups):
                take = min(self.batch_size, g.size)
                chosen = sample_rng.choice(g, size=take, replace=False)
                feats.append(X[chosen])
                labels.append(y_idx[chosen])
                ids.append(np.full(take, domain_id, dtype=np.int64))
            batch = Batch(
                features=np.concatenate(feats),
                labels=np.concatenate(labels),
                domain_ids=np.concatenate(ids),
            )
            grad, report = rule_fn(obj, theta, batch, hp)
            theta, state = adam_step(state, theta, grad, hp)
            losses[t] = report.loss
        self._objective = obj
        self.theta_ = theta
        self.loss_history_ = losses
        self.n_iter_ = self.n_iterations
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "theta_")
        X = check_array(X)
        return self._objective.logits(self.theta_, X)

    def predict(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        shifted = logits - logits.max(axis=1, keepdims=True)
        expd = np.exp(shifted)
        return expd / expd.sum(axis=1, keepdims=True)

    def surrogate_gap(self, X, y, rho: float | None = None) -> float:
        """Loss increase at the ascent-perturbed fitted parameters."""
        check_is_fitted(self, "theta_")
        X, y = check_X_y(X, y)
        batch = Batch(
            features=X,
            labels=np.searchsorted(self.classes_, y),
            domain_ids=np.zeros(X.shape[0], dtype=np.int64),
        )
        return surrogate_gap(
            self._objective, self.theta_, batch, self.rho if rho is None else rho
        )

    def sharpness_profile(self, X, y, radii) -> SharpnessProfile:
        """Gap-vs-radius curve of the fitted parameters on (X, y)."""
        check_is_fitted(self, "theta_")
        X, y = check_X_y(X, y)
        batch = Batch(
            features=X,
            labels=np.searchsorted(self.classes_, y),
            domain_ids=np.zeros(X.shape[0], dtype=np.int64),
        )
        return gap_profile(self._objective, self.theta_, batch, radii)
