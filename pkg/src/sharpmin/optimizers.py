"""Effective-gradient rules and the Adam base stepper.

Five rules share one calling convention ``rule(obj, theta, batch, hp) ->
(gradient, StepReport)``:

* ``erm``      descend the plain loss gradient
* ``sam``      descend the gradient taken at the ascent-perturbed point
* ``gsam``     sam plus a step against the component of the plain gradient
               orthogonal to the perturbed gradient
* ``erm_sam``  sum of the plain and perturbed gradients
* ``sagm``     plain gradient plus the gradient at
               theta + (rho/|g| - alpha) g, which implicitly rewards
               alignment between the two

No gradient flows through the perturbation itself: each rule evaluates the
objective's gradient at a displaced point and treats the displacement as a
constant. When the gradient norm falls below ``DEGENERATE_GRAD_NORM`` the
perturbation is taken to be zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .objectives import Batch, Objective
from .validation import (
    as_float_vector,
    check_nonnegative,
    check_open_unit,
    check_positive,
    check_same_dim,
)

DEGENERATE_GRAD_NORM = 1e-12


@dataclass(frozen=True)
class HyperParams:
    """Hyperparameters shared by the gradient rules and the Adam stepper.

    ``rho`` is the perturbation radius, ``alpha`` the gradient-matching
    coefficient of the sagm rule, ``beta`` the orthogonal-descent scale of
    the gsam rule, ``lr`` the Adam learning rate.
    """

    rho: float = 0.05
    alpha: float = 0.001
    beta: float = 0.4
    lr: float = 0.01
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        check_nonnegative(self.rho, "rho")
        check_nonnegative(self.alpha, "alpha")
        check_nonnegative(self.beta, "beta")
        check_positive(self.lr, "lr")
        check_nonnegative(self.weight_decay, "weight_decay")
        check_open_unit(self.adam_beta1, "adam_beta1")
        check_open_unit(self.adam_beta2, "adam_beta2")
        check_positive(self.adam_eps, "adam_eps")


@dataclass(frozen=True)
class StepReport:
    """Per-step diagnostics.

    ``perturbed_loss`` is the loss at the displaced point the rule actually
    evaluated (for sagm that point is ``theta + (rho/|g| - alpha) g``), and
    ``gap = perturbed_loss - loss`` exactly as computed. ``effective_radius``
    is the scalar multiplying the plain gradient in the displacement.
    """

    loss: float
    perturbed_loss: float
    gap: float
    grad_norm: float
    perturbed_grad_norm: float
    cos_alignment: float
    effective_radius: float


@dataclass(frozen=True)
class AdamState:
    """First/second moment vectors and the step counter."""

    m: np.ndarray
    v: np.ndarray
    step_count: int

    @classmethod
    def initial(cls, dim: int) -> "AdamState":
        return cls(m=np.zeros(dim), v=np.zeros(dim), step_count=0)


def gradient_alignment(g1, g2) -> float:
    """Cosine of the angle between two gradients; 0 if either is degenerate."""
    g1 = as_float_vector(g1, name="g1")
    g2 = as_float_vector(g2, name="g2")
    check_same_dim(g1, g2, "g1", "g2")
    n1 = np.linalg.norm(g1)
    n2 = np.linalg.norm(g2)
    if n1 < DEGENERATE_GRAD_NORM or n2 < DEGENERATE_GRAD_NORM:
        return 0.0
    return float(np.clip(np.dot(g1, g2) / (n1 * n2), -1.0, 1.0))


def perturbation(g, rho: float) -> np.ndarray:
    """Ascent perturbation rho * g / |g|; zero when |g| is degenerate."""
    g = as_float_vector(g, name="g")
    check_nonnegative(rho, "rho")
    norm = np.linalg.norm(g)
    scale = rho / norm if norm >= DEGENERATE_GRAD_NORM else 0.0
    return scale * g


def orthogonal_decomposition(v, onto):
    """Split ``v`` into components parallel and orthogonal to ``onto``."""
    v = as_float_vector(v, name="v")
    onto = as_float_vector(onto, name="onto")
    check_same_dim(v, onto, "v", "onto")
    parallel = (np.dot(v, onto) / np.dot(onto, onto)) * onto
    return parallel, v - parallel


def _report(loss, perturbed_loss, g, g_p, effective_radius) -> StepReport:
    return StepReport(
        loss=loss,
        perturbed_loss=perturbed_loss,
        gap=perturbed_loss - loss,
        grad_norm=float(np.linalg.norm(g)),
        perturbed_grad_norm=float(np.linalg.norm(g_p)),
        cos_alignment=gradient_alignment(g, g_p),
        effective_radius=float(effective_radius),
    )


def erm_gradient(obj: Objective, theta, batch: Batch | None = None):
    """Plain loss gradient; the report's perturbed quantities equal the plain ones."""
    value = obj.loss(theta, batch)
    g = obj.grad(theta, batch)
    return g, _report(value, value, g, g, 0.0)


def _ascent_scale(g, rho):
    norm = np.linalg.norm(g)
    return rho / norm if norm >= DEGENERATE_GRAD_NORM else 0.0


def sam_gradient(obj: Objective, theta, batch: Batch | None, rho: float):
    """Gradient at the ascent-perturbed point theta + rho * g / |g|."""
    check_nonnegative(rho, "rho")
    theta = as_float_vector(theta, name="theta")
    g0 = obj.grad(theta, batch)
    scale = _ascent_scale(g0, rho)
    value = obj.loss(theta, batch)
    displaced = theta + scale * g0
    value_p = obj.loss(displaced, batch)
    g_p = obj.grad(displaced, batch)
    return g_p, _report(value, value_p, g0, g_p, scale)


def gsam_gradient(obj: Objective, theta, batch: Batch | None, rho: float, beta: float):
    """sam gradient minus beta times the plain gradient's orthogonal part.

    Falls back to the sam gradient when the perturbed gradient is degenerate
    and the decomposition is undefined.
    """
    check_nonnegative(rho, "rho")
    check_nonnegative(beta, "beta")
    theta = as_float_vector(theta, name="theta")
    g0 = obj.grad(theta, batch)
    scale = _ascent_scale(g0, rho)
    value = obj.loss(theta, batch)
    displaced = theta + scale * g0
    value_p = obj.loss(displaced, batch)
    g_p = obj.grad(displaced, batch)
    report = _report(value, value_p, g0, g_p, scale)
    if np.linalg.norm(g_p) < DEGENERATE_GRAD_NORM:
        return g_p, report
    _, g_perp = orthogonal_decomposition(g0, g_p)
    return g_p - beta * g_perp, report


def erm_sam_gradient(obj: Objective, theta, batch: Batch | None, rho: float):
    """Sum of the plain gradient and the sam gradient."""
    check_nonnegative(rho, "rho")
    theta = as_float_vector(theta, name="theta")
    g0 = obj.grad(theta, batch)
    scale = _ascent_scale(g0, rho)
    value = obj.loss(theta, batch)
    displaced = theta + scale * g0
    value_p = obj.loss(displaced, batch)
    g_p = obj.grad(displaced, batch)
    return g0 + g_p, _report(value, value_p, g0, g_p, scale)


def sagm_gradient(obj: Objective, theta, batch: Batch | None, rho: float, alpha: float):
    """Plain gradient plus the gradient at theta + (rho/|g| - alpha) g.

    The displacement scalar is used exactly as written, without clamping;
    it can go negative when the gradient norm exceeds rho/alpha, which the
    report's ``effective_radius`` makes observable.
    """
    check_nonnegative(rho, "rho")
    check_nonnegative(alpha, "alpha")
    theta = as_float_vector(theta, name="theta")
    g0 = obj.grad(theta, batch)
    norm = np.linalg.norm(g0)
    scale = rho / norm - alpha if norm >= DEGENERATE_GRAD_NORM else 0.0
    value = obj.loss(theta, batch)
    displaced = theta + scale * g0
    value_p = obj.loss(displaced, batch)
    g_p = obj.grad(displaced, batch)
    return g0 + g_p, _report(value, value_p, g0, g_p, scale)


def surrogate_gap(obj: Objective, theta, batch: Batch | None, rho: float) -> float:
    """Loss increase at the ascent-perturbed point: L(theta + rho g/|g|) - L(theta)."""
    theta = as_float_vector(theta, name="theta")
    g = obj.grad(theta, batch)
    return obj.loss(theta + perturbation(g, rho), batch) - obj.loss(theta, batch)


def adam_step(state: AdamState, theta, g, hp: HyperParams):
    """One Adam update with bias correction and decoupled weight decay.

    Weight decay is applied to the pre-step parameters, after the Adam
    update: theta' = adam(theta) - lr * weight_decay * theta.
    """
    theta = as_float_vector(theta, name="theta")
    g = as_float_vector(g, name="g")
    check_same_dim(theta, g, "theta", "g")
    check_same_dim(state.m, g, "state.m", "g")
    t = state.step_count + 1
    m = hp.adam_beta1 * state.m + (1.0 - hp.adam_beta1) * g
    v = hp.adam_beta2 * state.v + (1.0 - hp.adam_beta2) * g**2
    m_hat = m / (1.0 - hp.adam_beta1**t)
    v_hat = v / (1.0 - hp.adam_beta2**t)
    theta_new = theta - hp.lr * m_hat / (np.sqrt(v_hat) + hp.adam_eps)
    if hp.weight_decay != 0.0:
        theta_new = theta_new - hp.lr * hp.weight_decay * theta
    return theta_new, AdamState(m=m, v=v, step_count=t)


def taylor_alignment_errors(obj: Objective, theta, batch: Batch | None, rho: float, alphas):
    """First-order check that stepping along -g flattens the perturbed loss.

    With the perturbation frozen at theta, the directional derivative of the
    perturbed loss along -grad equals -g_p . g, so the error
    ``|(L_p(theta) - L_p(theta - a g)) / a - g_p . g|`` should shrink
    linearly in ``a``. Returns one error per entry of ``alphas``.
    """
    theta = as_float_vector(theta, name="theta")
    g = obj.grad(theta, batch)
    eps = perturbation(g, rho)
    displaced = theta + eps
    value_p = obj.loss(displaced, batch)
    g_p = obj.grad(displaced, batch)
    inner = float(np.dot(g_p, g))
    errors = []
    for a in alphas:
        check_positive(a, "alpha")
        stepped = obj.loss(displaced - a * g, batch)
        errors.append(abs((value_p - stepped) / a - inner))
    return np.asarray(errors)


GRADIENT_RULES = {
    "erm": lambda obj, theta, batch, hp: erm_gradient(obj, theta, batch),
    "sam": lambda obj, theta, batch, hp: sam_gradient(obj, theta, batch, hp.rho),
    "gsam": lambda obj, theta, batch, hp: gsam_gradient(obj, theta, batch, hp.rho, hp.beta),
    "erm_sam": lambda obj, theta, batch, hp: erm_sam_gradient(obj, theta, batch, hp.rho),
    "sagm": lambda obj, theta, batch, hp: sagm_gradient(obj, theta, batch, hp.rho, hp.alpha),
}
