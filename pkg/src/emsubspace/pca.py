"""Three routes to the principal subspace: covariance eigenvectors, SVD, and EM.

All routes return a :class:`SubspaceModel` whose basis columns are orthonormal,
ordered by decreasing variance and sign-normalized (largest-magnitude entry of
each column positive).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .dataset import DataMatrix, ensure_centered, random_orthonormal, sample_covariance
from .errors import ConvergenceError, DimensionError, MissingDataError, SingularityError
from .linalg import jacobi_eigh, orthonormalize, principal_angle, sign_normalize

COND_LIMIT = 1e12


@dataclass
class EmConfig:
    k: int
    max_iterations: int = 1000
    tolerance: float = 1e-7
    seed: int = 0

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k}")
        if int(self.max_iterations) != self.max_iterations or self.max_iterations < 1:
            raise ValueError("max_iterations must be a positive integer")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        self.k = int(self.k)
        self.max_iterations = int(self.max_iterations)
        self.seed = int(self.seed)

    def check_dims(self, p, n):
        if self.k > min(p, n):
            raise DimensionError(f"k={self.k} exceeds min(p, n)={min(p, n)}")


@dataclass
class SubspaceModel:
    basis: np.ndarray
    eigenvalues: np.ndarray
    mean: np.ndarray
    iterations: int = 0
    converged: bool = True
    algorithm: str = ""
    diagnostics: dict = field(default_factory=dict)

    @property
    def k(self):
        return self.basis.shape[1]

    def scores(self, m: DataMatrix):
        """Project the samples of ``m`` (after removing the model mean)."""
        return self.basis.T @ _deviations(m, self.mean)

    def to_dict(self):
        return {
            "algorithm": self.algorithm,
            "basis": self.basis.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "mean": self.mean.tolist(),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "diagnostics": {k: _jsonable(v) for k, v in self.diagnostics.items()},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            basis=np.array(d["basis"], dtype=float).reshape(len(d["mean"]), -1),
            eigenvalues=np.array(d["eigenvalues"], dtype=float),
            mean=np.array(d["mean"], dtype=float),
            iterations=int(d["iterations"]),
            converged=bool(d["converged"]),
            algorithm=d.get("algorithm", ""),
            diagnostics=dict(d.get("diagnostics", {})),
        )

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def _deviations(m, mean):
    # a centered matrix carries its removed mean; restore it before subtracting ours
    raw = np.asarray(m.values)
    if m.column_mean is not None:
        raw = raw + m.column_mean[:, None]
    return raw - mean[:, None]


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def _mean_of(m):
    return m.column_mean if m.column_mean is not None else np.zeros(m.p)


def _check_complete(m, k):
    if m.has_missing:
        raise MissingDataError("this route needs complete data; use pca_em")
    if not 1 <= k <= m.p:
        raise DimensionError(f"k={k} must lie in [1, p={m.p}]")


def pca_covariance(m: DataMatrix, k: int) -> SubspaceModel:
    """Top-k eigenvectors of the sample covariance (dense Jacobi)."""
    m = ensure_centered(m)
    _check_complete(m, k)
    evals, evecs = jacobi_eigh(sample_covariance(m))
    return SubspaceModel(
        basis=evecs[:, :k].copy(),
        eigenvalues=evals[:k].copy(),
        mean=_mean_of(m),
        algorithm="cov",
    )


def pca_svd(m: DataMatrix, k: int) -> SubspaceModel:
    """Right singular vectors of Y = X^T / sqrt(n - 1)."""
    m = ensure_centered(m)
    _check_complete(m, k)
    y = np.asarray(m.values).T / np.sqrt(m.n - 1)
    full = k > min(y.shape)
    _, s, vt = np.linalg.svd(y, full_matrices=full)
    evals = np.zeros(k)
    r = min(k, s.size)
    evals[:r] = s[:r] ** 2
    return SubspaceModel(
        basis=sign_normalize(vt[:k].T),
        eigenvalues=evals,
        mean=_mean_of(m),
        algorithm="svd",
    )


def _cond_sym(a):
    ev = np.linalg.eigvalsh(a)
    if ev[-1] <= 0:
        return np.inf
    if ev[0] <= 0:
        return np.inf
    return ev[-1] / ev[0]


def _estep_complete(c, y):
    ctc = c.T @ c
    if _cond_sym(ctc) > COND_LIMIT:
        raise SingularityError("C^T C is numerically singular")
    return np.linalg.solve(ctc, c.T @ y)


def _mask_groups(mask):
    """Group column indices by their missing pattern."""
    patterns, inverse = np.unique(mask.T, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    return [(patterns[g], np.flatnonzero(inverse == g)) for g in range(len(patterns))]


def _estep_missing(c, y, groups):
    """Generalized E-step: joint least squares over x* and the unknown y*.

    For a column with observed rows O and missing rows M the residual on M can
    always be made zero by setting y*_M = C_M x*, so x* solves the reduced
    problem min ||C_O x - y_O|| (QR of C_O) and y*_M is filled from it.
    ``y`` is updated in place; returns X (k x n).
    """
    k = c.shape[1]
    x = np.empty((k, y.shape[1]))
    for miss, cols in groups:
        obs = ~miss
        c_obs = c[obs]
        if obs.sum() >= k:
            q, r = np.linalg.qr(c_obs)
            diag = np.abs(np.diag(r))
            if diag.min() <= 1e-12 * max(diag.max(), 1e-300):
                xs = np.linalg.lstsq(c_obs, y[np.ix_(obs, cols)], rcond=None)[0]
            else:
                xs = solve_triangular(r, q.T @ y[np.ix_(obs, cols)])
        else:
            xs = np.linalg.lstsq(c_obs, y[np.ix_(obs, cols)], rcond=None)[0]
        x[:, cols] = xs
        if miss.any():
            y[np.ix_(miss, cols)] = c[miss] @ xs
    return x


def _mstep(y, x, completion):
    """C = Y X^T (X X^T)^-1, completing the span when X X^T is rank deficient."""
    xxt = x @ x.T
    yxt = y @ x.T
    ev = np.linalg.eigvalsh(xxt)
    if ev[-1] > 0 and ev[0] > ev[-1] / COND_LIMIT:
        return np.linalg.solve(xxt, yxt.T).T, False
    c = yxt @ np.linalg.pinv(xxt, rcond=1e-12, hermitian=True)
    u, s, _ = np.linalg.svd(c, full_matrices=False)
    r = int(np.sum(s > 1e-10 * max(s.max(), 1e-300))) if s.size else 0
    u_r = u[:, :r]
    extra = completion[:, : c.shape[1] - r]
    extra = extra - u_r @ (u_r.T @ extra)
    q = orthonormalize(np.hstack([u_r * s[:r], extra]))
    scale = np.ones(c.shape[1])
    scale[:r] = s[:r]
    return q * scale, True


def _sq_residual(y_sq, x, cty):
    # ||Y - C X||_F^2 with X the least-squares projection: ||Y||^2 - <X, C^T Y>
    return max(y_sq - float(np.sum(x * cty)), 0.0)


def pca_em(m: DataMatrix, cfg: EmConfig, raise_on_failure=True) -> SubspaceModel:
    """EM for PCA in the zero-noise limit, with the missing-data E-step.

    Never forms a p x p matrix.  Iterates until the largest principal angle
    between successive column spans drops below ``cfg.tolerance``, then
    diagonalizes the k x k covariance of the data projected on the span.
    """
    m = ensure_centered(m)
    p, n = m.shape
    cfg.check_dims(p, n)
    k = cfg.k
    rng = np.random.default_rng(cfg.seed)
    completion = random_orthonormal(rng, p, k)
    groups = _mask_groups(m.missing_mask) if m.has_missing else None
    attempts = 0
    while True:
        attempts += 1
        c0 = random_orthonormal(rng, p, k)
        try:
            result = _em_loop(m, cfg, c0, groups, completion)
            break
        except SingularityError:
            if attempts >= 2:
                raise
    c, y, it, converged, errors, angles, completed = result
    q = orthonormalize(c)
    z = q.T @ y
    cov = (z @ z.T) / (n - 1)
    evals, rot = jacobi_eigh(cov)
    model = SubspaceModel(
        basis=sign_normalize(q @ rot),
        eigenvalues=evals,
        mean=_mean_of(m),
        iterations=it,
        converged=converged,
        algorithm="em",
        diagnostics={
            "reconstruction_error": errors,
            "subspace_change": angles,
            "restarts": attempts - 1,
            "rank_completed": completed,
        },
    )
    if not converged and raise_on_failure:
        raise ConvergenceError(
            f"pca_em: no convergence in {cfg.max_iterations} iterations", partial=model
        )
    return model


def _em_loop(m, cfg, c, groups, completion):
    if groups is None:
        y = m.values
        y_sq = float(np.sum(y * y))
    else:
        y = np.array(m.values, dtype=float, order="F")
        y_sq = None
    prev_q = orthonormalize(c)
    errors, angles = [], []
    converged = False
    completed = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        if groups is None:
            ctc = c.T @ c
            if _cond_sym(ctc) > COND_LIMIT:
                raise SingularityError("C^T C is numerically singular")
            cty = c.T @ y
            x = np.linalg.solve(ctc, cty)
            errors.append(np.sqrt(_sq_residual(y_sq, x, cty)))
        else:
            if _cond_sym(c.T @ c) > COND_LIMIT:
                raise SingularityError("C^T C is numerically singular")
            x = _estep_missing(c, y, groups)
            cty = c.T @ y
            errors.append(np.sqrt(_sq_residual(float(np.sum(y * y)), x, cty)))
        c, was_completed = _mstep(y, x, completion)
        completed = completed or was_completed
        q = orthonormalize(c)
        angle = principal_angle(q, prev_q)
        angles.append(angle)
        prev_q = q
        if angle < cfg.tolerance:
            converged = True
            break
    if groups is not None:
        _estep_missing(c, y, groups)
    return c, y, it, converged, errors, angles, completed


def impute_mean(m: DataMatrix) -> DataMatrix:
    """Baseline: fill each missing entry with its row's observed mean."""
    obs = m.observed
    means = np.where(obs, m.values, 0.0).sum(axis=1) / obs.sum(axis=1)
    filled = np.where(obs, m.values, means[:, None])
    return DataMatrix(filled, None, m.column_mean)


def reconstruction_error(model: SubspaceModel, m: DataMatrix):
    """Frobenius norm of the residual after projecting onto the model span."""
    y = _deviations(m, model.mean)
    b = model.basis
    r = y - b @ (b.T @ y)
    if m.has_missing:
        r = np.where(m.observed, r, 0.0)
    return float(np.linalg.norm(r))


__all__ = [
    "EmConfig",
    "SubspaceModel",
    "pca_covariance",
    "pca_svd",
    "pca_em",
    "principal_angle",
    "impute_mean",
    "reconstruction_error",
]
