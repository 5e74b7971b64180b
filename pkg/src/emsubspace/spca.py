"""EM for sensible PCA: a k-factor model with one global isotropic noise level.

The model density is y ~ N(mean, C C^T + eps I).  Every inverse of the p x p
model covariance goes through the matrix inversion lemma, so fitting and
likelihood evaluation stay at O(knp) and never allocate a p x p array.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .dataset import DataMatrix, ensure_centered, random_orthonormal
from .errors import CollapseError, ConvergenceError, DimensionError, MissingDataError, SingularityError
from .linalg import jacobi_eigh, orthonormalize, sign_normalize
from .pca import EmConfig, SubspaceModel

LOG_2PI = float(np.log(2.0 * np.pi))
COND_LIMIT = 1e12
COLLAPSE_RATIO = 1e-12


class WoodburyInverse:
    """(C C^T + eps I)^-1 as an operator, via the matrix inversion lemma.

    ``apply`` costs O(pk) per vector after an O(pk^2 + k^3) setup.
    """

    def __init__(self, c, eps):
        c = np.asarray(c, dtype=float)
        if c.ndim == 1:
            c = c[:, None]
        if not eps > 0:
            raise ValueError("eps must be positive")
        self.c = c
        self.eps = float(eps)
        k = c.shape[1]
        inner = c.T @ c + self.eps * np.eye(k)
        ev = np.linalg.eigvalsh(inner)
        if ev[0] <= 0 or ev[-1] / ev[0] > COND_LIMIT:
            raise SingularityError("I + C^T C / eps is ill-conditioned")
        self._chol = cho_factor(inner, lower=True)
        self._inner = inner

    @property
    def shape(self):
        p = self.c.shape[0]
        return (p, p)

    def apply(self, v):
        """Multiply a vector or a p x m block by the inverse."""
        v = np.asarray(v, dtype=float)
        ctv = self.c.T @ v
        return (v - self.c @ cho_solve(self._chol, ctv)) / self.eps

    __matmul__ = apply

    def quad(self, v):
        """Column-wise quadratic forms v_j^T (C C^T + eps I)^-1 v_j."""
        v = np.asarray(v, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        ctv = self.c.T @ v
        inner = np.sum(ctv * cho_solve(self._chol, ctv), axis=0)
        return (np.sum(v * v, axis=0) - inner) / self.eps

    def logdet(self):
        """log det(C C^T + eps I) = (p - k) log eps + log det(eps I + C^T C)."""
        p, k = self.c.shape
        chol_diag = np.diag(self._chol[0])
        return (p - k) * np.log(self.eps) + 2.0 * float(np.sum(np.log(chol_diag)))

    def dense(self):
        """Materialize the p x p inverse (testing only)."""
        return self.apply(np.eye(self.c.shape[0]))


def woodbury_inverse(c, eps) -> WoodburyInverse:
    return WoodburyInverse(c, eps)


@dataclass
class SpcaModel:
    subspace: SubspaceModel
    noise_level: float
    log_likelihood_trace: list = field(default_factory=list)
    loading: np.ndarray | None = None

    @property
    def model_eigenvalues(self):
        """Eigenvalues of C C^T (descending, length k)."""
        s = np.linalg.svd(self.loading, compute_uv=False)
        return s ** 2

    def covariance_operator(self):
        return WoodburyInverse(self.loading, self.noise_level)

    def log_likelihood(self, y):
        return spca_log_likelihood(self, y)

    def to_dict(self):
        d = self.subspace.to_dict()
        d["noise_level"] = float(self.noise_level)
        d["log_likelihood_trace"] = [float(v) for v in self.log_likelihood_trace]
        d["loading"] = self.loading.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            subspace=SubspaceModel.from_dict(d),
            noise_level=float(d["noise_level"]),
            log_likelihood_trace=list(d.get("log_likelihood_trace", [])),
            loading=np.array(d["loading"], dtype=float).reshape(len(d["mean"]), -1),
        )

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def _total_log_likelihood(y, y_sq, c, eps, n):
    op = WoodburyInverse(c, eps)
    p = y.shape[0]
    cty = c.T @ y
    quad = (y_sq - float(np.sum(cty * cho_solve(op._chol, cty)))) / eps
    return -0.5 * (n * (p * LOG_2PI + op.logdet()) + quad)


def spca_em(m: DataMatrix, cfg: EmConfig, raise_on_failure=True) -> SpcaModel:
    """Fit C and eps by EM, stopping on relative log-likelihood change.

    E-step: beta = C^T (C C^T + eps I)^-1, mu = beta Y,
    Sigma = n (I - beta C) + mu mu^T.
    M-step: C = Y mu^T Sigma^-1, eps = (tr Y Y^T - tr C mu Y^T) / (n p).
    Only per-coordinate sums of squares of Y are needed for the traces.
    """
    m = ensure_centered(m)
    if m.has_missing:
        raise MissingDataError("spca_em needs complete data")
    p, n = m.shape
    k = cfg.k
    cfg.check_dims(p, n)
    if k >= p:
        raise DimensionError(f"spca needs k < p, got k={k}, p={p}")
    y = m.values
    y_sq = float(np.sum(y * y))
    total_var = y_sq / n
    rng = np.random.default_rng(cfg.seed)
    q0 = random_orthonormal(rng, p, k)
    proj = q0.T @ y
    proj_sq = np.sum(proj * proj, axis=1)
    c = q0 * np.sqrt(np.maximum(proj_sq / n, 1e-12 * total_var / p))
    eps = max((y_sq - float(proj_sq.sum())) / (n * (p - k)), 1e-6 * total_var / p)

    trace = [_total_log_likelihood(y, y_sq, c, eps, n)]
    converged = False
    collapsed = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        beta = WoodburyInverse(c, eps).apply(c).T
        mu = beta @ y
        sigma = n * (np.eye(k) - beta @ c) + mu @ mu.T
        ymu = y @ mu.T
        c = np.linalg.solve(sigma.T, ymu.T).T
        eps = (y_sq - float(np.sum(c * ymu))) / (n * p)
        if eps < COLLAPSE_RATIO * total_var:
            collapsed = True
            break
        trace.append(_total_log_likelihood(y, y_sq, c, eps, n))
        change = abs(trace[-1] - trace[-2]) / max(abs(trace[-1]), 1e-300)
        if change < cfg.tolerance:
            converged = True
            break

    model = _finish(m, y, c, max(eps, 0.0), trace, it, converged)
    if collapsed:
        raise CollapseError(
            "noise level collapsed to the zero-noise limit; use pca_em", partial=model
        )
    if not converged and raise_on_failure:
        raise ConvergenceError(
            f"spca_em: no convergence in {cfg.max_iterations} iterations", partial=model
        )
    return model


def _finish(m, y, c, eps, trace, it, converged):
    n = m.n
    q = orthonormalize(c)
    z = q.T @ y
    evals, rot = jacobi_eigh((z @ z.T) / (n - 1))
    subspace = SubspaceModel(
        basis=sign_normalize(q @ rot),
        eigenvalues=evals,
        mean=m.column_mean.copy(),
        iterations=it,
        converged=converged,
        algorithm="spca",
        diagnostics={},
    )
    return SpcaModel(subspace, float(eps), list(trace), c.copy())


def spca_log_likelihood(model: SpcaModel, y):
    """Log-density of y (a p-vector, or p x m block of columns) under the model."""
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    if single:
        y = y[:, None]
    p = model.loading.shape[0]
    if y.shape[0] != p:
        raise DimensionError(f"expected {p}-vectors, got {y.shape[0]}")
    op = model.covariance_operator()
    d = y - model.subspace.mean[:, None]
    ll = -0.5 * (p * LOG_2PI + op.logdet() + op.quad(d))
    return float(ll[0]) if single else ll


__all__ = ["SpcaModel", "WoodburyInverse", "woodbury_inverse", "spca_em", "spca_log_likelihood"]
