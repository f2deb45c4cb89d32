"""Nearest neural-ODE weights with a prescribed worst-case logarithmic 2-norm.

For a weight matrix ``A`` and activation slopes in ``[m, 1]`` the package
finds the smallest Frobenius perturbation ``Delta`` such that
``max_D mu2(D (A + Delta)) = delta`` over diagonal ``D`` with entries in
``[m, 1]``.  The result certifies ``exp(delta T)`` growth of initial-value
perturbations for ``x' = sigma(A x + b)``.
"""

from .errors import (
    CapacityError,
    ConfigError,
    ContractViolation,
    DimensionError,
    DivergenceError,
    LogstabError,
    NonConvergenceError,
)
from .extremal import ExtremizerReport, diag_gradient, find_extremizer, max_lognorm, vertex_oracle
from .inner import PenaltyFunctional, eval_functional, free_gradient, minimize
from .linalg import mu2, read_matrix, symmetric_eig, write_matrix
from .node import NeuralOdeModel, SmoothedLeakyReLU, forward, read_manifest, verify_bound, write_manifest
from .outer import StabilizationResult, certify, read_result, stabilize, write_result
from .two_layer import TwoLayerInstance, double_vertex_oracle, joint_extremizer, two_layer_stabilize

__version__ = "0.1.0"

__all__ = [
    "CapacityError",
    "ConfigError",
    "ContractViolation",
    "DimensionError",
    "DivergenceError",
    "LogstabError",
    "NonConvergenceError",
    "ExtremizerReport",
    "diag_gradient",
    "find_extremizer",
    "max_lognorm",
    "vertex_oracle",
    "PenaltyFunctional",
    "eval_functional",
    "free_gradient",
    "minimize",
    "mu2",
    "read_matrix",
    "symmetric_eig",
    "write_matrix",
    "NeuralOdeModel",
    "SmoothedLeakyReLU",
    "forward",
    "read_manifest",
    "verify_bound",
    "write_manifest",
    "StabilizationResult",
    "certify",
    "read_result",
    "stabilize",
    "write_result",
    "TwoLayerInstance",
    "double_vertex_oracle",
    "joint_extremizer",
    "two_layer_stabilize",
]
