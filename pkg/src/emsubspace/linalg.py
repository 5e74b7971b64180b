"""Small dense linear-algebra helpers shared by the subspace routines.

The symmetric eigensolver is cyclic Jacobi.  It is used for every dense
diagonalization in the package: the covariance route, the k x k ordering step
of the EM routes, and the oracles in the test-suite.
"""
import numpy as np

from ._backend import kernels
from .errors import ConvergenceError, DimensionError

JACOBI_MAX_SWEEPS = 100
JACOBI_TOL = 1e-14


def sign_normalize(basis):
    """Flip columns so the largest-magnitude entry of each is positive.

    Ties go to the lowest row index (``argmax`` semantics).
    """
    basis = np.array(basis, dtype=float, copy=True)
    if basis.ndim == 1:
        basis = basis[:, None]
    for j in range(basis.shape[1]):
        i = int(np.argmax(np.abs(basis[:, j])))
        if basis[i, j] < 0:
            basis[:, j] = -basis[:, j]
    return basis


def jacobi_eigh(s, max_sweeps=JACOBI_MAX_SWEEPS, tol=JACOBI_TOL):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues in descending
    order and sign-normalized eigenvector columns.
    """
    s = np.asarray(s, dtype=float)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {s.shape}")
    n = s.shape[0]
    a = np.ascontiguousarray(0.5 * (s + s.T))
    v = np.eye(n)
    sweeps = kernels.jacobi_sweeps(a, v, int(max_sweeps), float(tol))
    if sweeps < 0:
        raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps")
    evals = np.diag(a).copy()
    order = np.argsort(-evals, kind="stable")
    return evals[order], sign_normalize(v[:, order])


def orthonormalize(a):
    """Orthonormal basis for the column span of ``a`` (thin QR)."""
    q, r = np.linalg.qr(np.asarray(a, dtype=float))
    # fix the QR sign ambiguity so results are reproducible across LAPACKs
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def principal_angle(a, b):
    """Largest principal angle (radians) between the spans of ``a`` and ``b``.

    Both inputs must have orthonormal columns and the same shape.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    sv = np.linalg.svd(a.T @ b, compute_uv=False)
    smallest = float(np.clip(sv.min(), 0.0, 1.0))
    # arccos loses accuracy near 0; measure the residual of projecting b onto a
    resid = b - a @ (a.T @ b)
    sin_angle = float(np.clip(np.linalg.norm(resid, 2), 0.0, 1.0))
    if smallest > np.sqrt(0.5):
        return float(np.arcsin(sin_angle))
    return float(np.arccos(smallest))
