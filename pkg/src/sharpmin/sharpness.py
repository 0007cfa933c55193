"""Local-sharpness diagnostics for trained parameters.

Two probes are implemented:

* the gradient-direction gap ``h_rho = L(theta + rho g/|g|) - L(theta)``
  sampled over a grid of radii (for trained models), and
* the exact ball-max gap for quadratics at their minimum,
  ``max_{|e| <= rho} L(e) - L(0) = rho^2 lambda_max / 2``, which makes the
  gap-to-eigenvalue relation ``lambda_max = 2 h / rho^2`` checkable to
  machine precision.

The dominant Hessian eigenvalue itself is estimated by power iteration on
finite-difference Hessian-vector products.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .objectives import Batch, Objective, QuadraticObjective, hessian_vector_product
from .optimizers import DEGENERATE_GRAD_NORM
from .validation import as_float_vector, check_positive

logger = logging.getLogger(__name__)

PROFILE_CSV_HEADER = ("rho", "gap", "lambda_max_estimate")


@dataclass(frozen=True)
class SharpnessProfile:
    """Gap-vs-radius curve plus the estimated dominant Hessian eigenvalue.

    ``eq7_estimate`` is ``2 * gaps[0] / radii[0]**2``, the eigenvalue implied
    by the smallest-radius gap. ``degenerate`` marks profiles taken where the
    gradient norm was below the degeneracy cutoff (all gaps reported as 0).
    """

    radii: np.ndarray
    gaps: np.ndarray
    lambda_max: float
    eq7_estimate: float
    degenerate: bool = False

    def __post_init__(self):
        radii = as_float_vector(self.radii, name="radii")
        gaps = as_float_vector(np.asarray(self.gaps, dtype=np.float64), name="gaps")
        if radii.size != gaps.size:
            raise ValueError("radii and gaps must have the same length")
        if np.any(radii <= 0) or np.any(np.diff(radii) <= 0):
            raise ValueError("radii must be positive and strictly increasing")
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "gaps", gaps)

    def write_csv(self, path) -> None:
        """Serialize as rho,gap,lambda_max_estimate rows with one header line."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(PROFILE_CSV_HEADER)
            for rho, gap in zip(self.radii, self.gaps):
                writer.writerow([f"{rho:.17g}", f"{gap:.17g}", f"{self.lambda_max:.17g}"])


class PowerIterationResult(NamedTuple):
    value: float
    iterations: int
    converged: bool


def power_iteration(
    matvec: Callable[[np.ndarray], np.ndarray],
    dim: int,
    max_iters: int = 200,
    tol: float = 1e-10,
    seed: int = 0,
) -> PowerIterationResult:
    """Rayleigh-quotient power iteration from a seeded random unit vector.

    Stops when successive eigenvalue estimates change by less than ``tol``.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    check_positive(tol, "tol")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    estimate = 0.0
    for iteration in range(1, max_iters + 1):
        w = matvec(v)
        new_estimate = float(np.dot(v, w))
        w_norm = np.linalg.norm(w)
        if w_norm < DEGENERATE_GRAD_NORM:
            return PowerIterationResult(0.0, iteration, True)
        v = w / w_norm
        if iteration > 1 and abs(new_estimate - estimate) < tol:
            return PowerIterationResult(new_estimate, iteration, True)
        estimate = new_estimate
    return PowerIterationResult(estimate, max_iters, False)


def dominant_eigenvalue(
    obj: Objective,
    theta,
    data: Batch | None = None,
    max_iters: int = 200,
    tol: float = 1e-10,
    seed: int = 0,
    step: float = 1e-5,
) -> float:
    """Dominant Hessian eigenvalue at theta via power iteration on HVPs.

    Non-convergence is logged with the last estimate and iteration count
    rather than raised; the last estimate is returned either way.
    """
    theta = as_float_vector(theta, name="theta")
    result = power_iteration(
        lambda v: hessian_vector_product(obj, theta, v, data, step=step),
        dim=theta.size,
        max_iters=max_iters,
        tol=tol,
        seed=seed,
    )
    if not result.converged:
        logger.warning(
            "power iteration did not converge: last estimate %.6g after %d iterations",
            result.value,
            result.iterations,
        )
    return result.value


def gap_profile(
    obj: Objective,
    theta,
    data: Batch | None,
    radii,
    eig_max_iters: int = 200,
    eig_tol: float = 1e-10,
    eig_seed: int = 0,
) -> SharpnessProfile:
    """Gradient-direction gap over a radius grid, on the full provided data.

    Every gap is evaluated against the same base loss and the same
    normalized gradient direction, so repeated calls are bit-identical.
    """
    radii = as_float_vector(radii, name="radii")
    if np.any(radii <= 0) or np.any(np.diff(radii) <= 0):
        raise ValueError("radii must be positive and strictly increasing")
    theta = as_float_vector(theta, name="theta")
    g = obj.grad(theta, data)
    norm = np.linalg.norm(g)
    lam = dominant_eigenvalue(
        obj, theta, data, max_iters=eig_max_iters, tol=eig_tol, seed=eig_seed
    )
    if norm < DEGENERATE_GRAD_NORM:
        gaps = np.zeros_like(radii)
        return SharpnessProfile(radii, gaps, lam, 0.0, degenerate=True)
    direction = g / norm
    base = obj.loss(theta, data)
    gaps = np.array([obj.loss(theta + rho * direction, data) - base for rho in radii])
    eq7 = 2.0 * gaps[0] / radii[0] ** 2
    return SharpnessProfile(radii, gaps, lam, float(eq7))


def exact_quadratic_gap(eigenvalues, rho: float) -> float:
    """Exact worst-case gap of a quadratic at its minimum: rho^2 lambda_max / 2."""
    eigenvalues = as_float_vector(eigenvalues, name="eigenvalues")
    check_positive(rho, "rho")
    return 0.5 * rho**2 * float(np.max(eigenvalues))


@dataclass(frozen=True)
class GapEigenvalueRow:
    rho: float
    gap_ratio: float  # 2 * gap / rho^2
    lambda_max: float
    relative_error: float


def eq7_check(obj: Objective, rho_grid) -> list[GapEigenvalueRow]:
    """Verify 2 * gap / rho^2 == lambda_max on a quadratic, per radius.

    Only quadratic objectives are accepted; there the ball-max gap is
    analytic and the relation is exact rather than approximate.
    """
    if not isinstance(obj, QuadraticObjective):
        raise TypeError("eq7_check requires a quadratic objective")
    rho_grid = as_float_vector(rho_grid, name="rho_grid")
    lam = float(np.max(obj.eigenvalues))
    rows = []
    for rho in rho_grid:
        gap = exact_quadratic_gap(obj.eigenvalues, rho)
        ratio = 2.0 * gap / rho**2
        rows.append(
            GapEigenvalueRow(
                rho=float(rho),
                gap_ratio=ratio,
                lambda_max=lam,
                relative_error=abs(ratio - lam) / abs(lam),
            )
        )
    return rows


def interval_max_gap(obj: Objective, theta, rho: float, n_grid: int = 4001) -> float:
    """Worst-case gap of a 1-D objective over [theta - rho, theta + rho].

    Dense-grid evaluation of the true inner maximum; well-defined even at
    exact minima, where the gradient-direction probe degenerates.
    """
    check_positive(rho, "rho")
    if obj.param_dim != 1:
        raise ValueError("interval_max_gap only applies to 1-D objectives")
    theta = as_float_vector(theta, name="theta")
    center = float(theta[0])
    base = obj.loss(theta)
    grid = np.linspace(center - rho, center + rho, n_grid)
    worst = max(obj.loss(np.array([x])) for x in grid)
    return worst - base


def write_profiles_csv(path, rows) -> None:
    """Write (rule, target_domain, rho, gap) rows for cross-run comparison."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rule", "target_domain", "rho", "gap"])
        for rule, target, rho, gap in rows:
            writer.writerow([rule, target, f"{rho:.17g}", f"{gap:.17g}"])
