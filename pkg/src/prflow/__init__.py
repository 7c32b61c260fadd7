"""Precision-recall divergences and adversarially trained normalizing flows.

Modules
-------
divergences   exact f-divergence calculus on discrete distributions
autodiff      reverse-mode differentiation on numpy arrays
models        coupling flows, discriminators, checkpoint I/O
trainer       MLE, adversarial (dual/primal) and AUC training loops
evaluation    PR curves, AUC, the gap experiment and the theorem suite
data          mixture fixtures and seeded batching
estimators    scikit-learn style wrappers
cli           the ``prflow`` command
"""

__version__ = "0.1.0"

from .divergences import (  # noqa: E402
    LAMBDA_INF,
    DiscreteDistribution,
    GeneratorFunction,
    Kind,
    decompose_as_pr_integral,
    exact_divergence,
    make_generator,
    pr_alpha_beta,
)
from .estimators import FlowDensityEstimator, RatioEstimator  # noqa: E402

__all__ = [
    "LAMBDA_INF",
    "DiscreteDistribution",
    "FlowDensityEstimator",
    "GeneratorFunction",
    "Kind",
    "RatioEstimator",
    "__version__",
    "decompose_as_pr_integral",
    "exact_divergence",
    "make_generator",
    "pr_alpha_beta",
]
