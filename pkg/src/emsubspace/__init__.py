"""EM-based principal subspace estimation and pel-recursive motion estimation."""
from ._backend import BACKEND
from .dataset import DataMatrix, SyntheticSpec, generate_synthetic, read_matrix
from .errors import (
    CollapseError,
    ConvergenceError,
    DataError,
    EmSubspaceError,
    PerfectRegistrationError,
    SingularityError,
)
from .kpca import KernelSpec, incomplete_cholesky, kpca_fit, kpca_project, mcem_eigs
from .pca import EmConfig, SubspaceModel, pca_covariance, pca_em, pca_svd
from .spca import SpcaModel, spca_em, spca_log_likelihood

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CollapseError",
    "ConvergenceError",
    "DataError",
    "DataMatrix",
    "EmConfig",
    "EmSubspaceError",
    "KernelSpec",
    "PerfectRegistrationError",
    "SingularityError",
    "SpcaModel",
    "SubspaceModel",
    "SyntheticSpec",
    "generate_synthetic",
    "incomplete_cholesky",
    "kpca_fit",
    "kpca_project",
    "mcem_eigs",
    "pca_covariance",
    "pca_em",
    "pca_svd",
    "read_matrix",
    "spca_em",
    "spca_log_likelihood",
]
