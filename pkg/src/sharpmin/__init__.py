"""Sharpness-aware optimization rules, diagnostics, and experiment harness."""

from .data import (
    Domain,
    MultiDomainDataset,
    balanced_minibatch,
    in_domain_split,
    leave_one_out_split,
    make_rotated_domains,
)
from .estimator import SharpnessAwareClassifier
from .objectives import (
    Batch,
    CountingObjective,
    GaussianWellsObjective,
    LogisticRegressionObjective,
    MLPObjective,
    Objective,
    QuadraticObjective,
    SHARP_FLAT_WELLS,
    finite_diff_grad,
    hessian_vector_product,
    make_batch,
    make_logreg,
    make_mlp,
    make_quadratic,
    make_sharp_flat_landscape,
    make_two_minima_landscape,
)
from .optimizers import (
    GRADIENT_RULES,
    AdamState,
    HyperParams,
    StepReport,
    adam_step,
    erm_gradient,
    erm_sam_gradient,
    gradient_alignment,
    gsam_gradient,
    orthogonal_decomposition,
    perturbation,
    sagm_gradient,
    sam_gradient,
    surrogate_gap,
    taylor_alignment_errors,
)
from .sharpness import (
    SharpnessProfile,
    dominant_eigenvalue,
    eq7_check,
    exact_quadratic_gap,
    gap_profile,
    interval_max_gap,
    power_iteration,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "Batch",
    "CountingObjective",
    "Domain",
    "GaussianWellsObjective",
    "GRADIENT_RULES",
    "HyperParams",
    "LogisticRegressionObjective",
    "MLPObjective",
    "MultiDomainDataset",
    "Objective",
    "QuadraticObjective",
    "SHARP_FLAT_WELLS",
    "SharpnessAwareClassifier",
    "SharpnessProfile",
    "StepReport",
    "adam_step",
    "balanced_minibatch",
    "dominant_eigenvalue",
    "eq7_check",
    "erm_gradient",
    "erm_sam_gradient",
    "exact_quadratic_gap",
    "finite_diff_grad",
    "gap_profile",
    "gradient_alignment",
    "gsam_gradient",
    "hessian_vector_product",
    "in_domain_split",
    "interval_max_gap",
    "leave_one_out_split",
    "make_batch",
    "make_logreg",
    "make_mlp",
    "make_quadratic",
    "make_rotated_domains",
    "make_sharp_flat_landscape",
    "make_two_minima_landscape",
    "orthogonal_decomposition",
    "perturbation",
    "power_iteration",
    "sagm_gradient",
    "sam_gradient",
    "surrogate_gap",
    "taylor_alignment_errors",
]
