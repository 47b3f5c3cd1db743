"""Mechanical kernel regression: Hamiltonian flows of data points in RKHS."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DimensionMismatch,
    Divergence,
    NonFiniteInput,
    SingularSystem,
    UnsupportedKernel,
)
from .kernels import (
    ActivationSpec,
    FeatureMapSpec,
    KernelSpec,
    activation_identity_features,
    activation_kernel,
    feature_adjoint_apply,
    feature_apply,
    gaussian_kernel,
    gram,
    gram_quadratic_grad,
    random_features,
    scalar_gram,
)

__all__ = [
    "ActivationSpec",
    "ConfigError",
    "DimensionMismatch",
    "Divergence",
    "FeatureMapSpec",
    "KernelSpec",
    "NonFiniteInput",
    "SingularSystem",
    "UnsupportedKernel",
    "activation_identity_features",
    "activation_kernel",
    "feature_adjoint_apply",
    "feature_apply",
    "gaussian_kernel",
    "gram",
    "gram_quadratic_grad",
    "random_features",
    "scalar_gram",
    "__version__",
]
