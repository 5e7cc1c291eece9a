"""Dense reverse-mode differentiation, Cholesky utilities and small MLPs."""

from pacmeta.autodiff.kernels import SingularMatrixError
from pacmeta.autodiff.linalg import cholesky_logdet, mvn_logpdf
from pacmeta.autodiff.nn import FEATURE_NET, MEAN_NET, MlpSpec, init_mlp, mlp_forward
from pacmeta.autodiff.tensor import (
    NumericFailure,
    Tape,
    Tensor,
    grad,
    gradients,
    no_grad,
    value_and_grad,
    variable,
)

__all__ = [
    "FEATURE_NET",
    "MEAN_NET",
    "MlpSpec",
    "NumericFailure",
    "SingularMatrixError",
    "Tape",
    "Tensor",
    "cholesky_logdet",
    "grad",
    "gradients",
    "init_mlp",
    "mlp_forward",
    "mvn_logpdf",
    "no_grad",
    "value_and_grad",
    "variable",
]
