import numpy as np
import pytest

from emsubspace.dataset import DataMatrix, random_orthonormal


def dense_eigh(s):
    """Independent oracle: LAPACK symmetric eigensolver, descending, sign-fixed."""
    w, v = np.linalg.eigh(0.5 * (s + s.T))
    order = np.argsort(-w)
    w, v = w[order], v[:, order]
    for j in range(v.shape[1]):
        i = np.argmax(np.abs(v[:, j]))
        if v[i, j] < 0:
            v[:, j] *= -1
    return w, v


def planted_data(p, n, eigenvalues, seed, noise=0.0):
    """y = B diag(sqrt(eig)) x + noise; returns (values, B)."""
    rng = np.random.default_rng(seed)
    k = len(eigenvalues)
    b = random_orthonormal(rng, p, k)
    y = b @ (np.sqrt(np.asarray(eigenvalues, dtype=float))[:, None] * rng.standard_normal((k, n)))
    if noise:
        y = y + noise * rng.standard_normal((p, n))
    return y, b


def random_psd(n, seed, rank=None):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, rank or n))
    return a @ a.T


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_matrix():
    y, b = planted_data(8, 60, (6.0, 2.0, 0.7), seed=3, noise=0.05)
    return DataMatrix(y), b
