"""Constrained EM eigen-extraction for PSD matrices and its kernel-PCA use.

The constrained iteration replaces the k x k inverses of plain EM by
triangular ones: the E-step inverts the lower-triangular part of W^T W and
the M-step the upper-triangular part of Z S Z^T.  That pins each column of W
to an individual eigenvector instead of an arbitrary rotation of the leading
eigenspace.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .dataset import DataMatrix, random_orthonormal
from .errors import ConvergenceError, DimensionError, MissingDataError, NotPsdError, SingularityError
from .linalg import principal_angle
from .pca import EmConfig

PIVOT_FLOOR = 1e-14


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "linear"
    degree: int = 2
    offset: float = 0.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("linear", "polynomial", "rbf"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "rbf" and not self.gamma > 0:
            raise ValueError("rbf kernel needs gamma > 0")
        if self.kind == "polynomial" and (int(self.degree) != self.degree or self.degree < 1):
            raise ValueError("polynomial kernel needs an integer degree >= 1")

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind == "polynomial":
            d.update(degree=int(self.degree), offset=float(self.offset))
        elif self.kind == "rbf":
            d["gamma"] = float(self.gamma)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def cross(self, a, b):
        """Kernel values between the columns of ``a`` (p x N) and ``b`` (p x M)."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if a.shape[0] != b.shape[0]:
            raise DimensionError("kernel arguments have different dimension")
        g = a.T @ b
        if self.kind == "linear":
            return g
        if self.kind == "polynomial":
            return (g + self.offset) ** int(self.degree)
        sq = np.sum(a * a, axis=0)[:, None] + np.sum(b * b, axis=0)[None, :] - 2.0 * g
        return np.exp(-self.gamma * np.maximum(sq, 0.0))


def median_gamma(m: DataMatrix):
    """1 / median squared pairwise distance; a starting point for rbf gamma."""
    y = np.asarray(m.values)
    sq = np.sum(y * y, axis=0)
    d = sq[:, None] + sq[None, :] - 2.0 * (y.T @ y)
    iu = np.triu_indices(m.n, 1)
    med = float(np.median(np.maximum(d[iu], 0.0)))
    return 1.0 / med if med > 0 else 1.0


def center_kernel(k):
    """Feature-space centering (I - 1/N) K (I - 1/N).  Not applied by default."""
    row = k.mean(axis=0)
    return k - row[None, :] - row[:, None] + row.mean()


def kernel_matrix(m: DataMatrix, spec: KernelSpec, centered=False):
    """Gram matrix K_ij = k(y_i, y_j) over the samples (columns) of ``m``."""
    if m.has_missing:
        raise MissingDataError("kernel matrix needs complete data")
    y = np.asarray(m.values)
    k = spec.cross(y, y)
    k = 0.5 * (k + k.T)
    if centered:
        k = center_kernel(k)
    return k


def _lower(a):
    return np.tril(a)


def _upper(a):
    return np.triu(a)


def _tri_solve(t, b, lower, scale):
    d = np.abs(np.diag(t))
    if d.min() < PIVOT_FLOOR * scale:
        raise SingularityError("triangular pivot below floor")
    return solve_triangular(t, b, lower=lower)


def _normalize_columns(w):
    norms = np.linalg.norm(w, axis=0)
    norms[norms == 0] = 1.0
    return w / norms


def _check_psd_input(s):
    s = np.asarray(s, dtype=float)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError(f"expected a square matrix, got {s.shape}")
    scale = max(float(np.abs(s).max()), 1e-300)
    if np.abs(s - s.T).max() > 1e-8 * scale:
        raise NotPsdError("matrix is not symmetric")
    # necessary condition only; a full spectrum check would cost O(N^3)
    if np.diag(s).min() < -1e-8 * scale:
        raise NotPsdError("negative diagonal entry")
    return 0.5 * (s + s.T)


def mcem_step(s, w):
    """One constrained E/M update; returns the new (unnormalized) W."""
    scale = max(float(np.linalg.norm(w)), 1e-300)
    wtw = w.T @ w
    # E-step: Z = {L(W^T W)}^-1 W^T
    z = _tri_solve(_lower(wtw), w.T, lower=True, scale=scale ** 2)
    szt = s @ z.T
    u = _upper(z @ szt)
    # M-step: W = S Z^T {U(Z S Z^T)}^-1, i.e. solve W U = S Z^T
    return _tri_solve(u.T, szt.T, lower=True, scale=max(float(np.abs(u).max()), 1e-300)).T


def em_step_unconstrained(s, w):
    """Plain EM update W = S Z^T (Z S Z^T)^-1 with Z = (W^T W)^-1 W^T."""
    z = np.linalg.solve(w.T @ w, w.T)
    szt = s @ z.T
    return np.linalg.solve((z @ szt).T, szt.T).T


def _column_change(a, b):
    # chord between unit columns, sign-aligned; about the angle, with no cancellation
    sign = np.where(np.sum(a * b, axis=0) < 0, -1.0, 1.0)
    return float(np.max(np.linalg.norm(a - b * sign, axis=0)))


def mcem_eigs(s, q, cfg: EmConfig, raise_on_failure=True, return_info=False):
    """Leading ``q`` eigenpairs of a PSD matrix by constrained EM.

    Stops once every normalized column moved by less than ``cfg.tolerance``
    (chord length, about the angle in radians).  Returns ``(W, eigenvalues)`` with unit-norm, sign-normalized
    columns in descending eigenvalue order; eigenvalues are diag(W^T S W).
    """
    s = _check_psd_input(s)
    n = s.shape[0]
    if not 1 <= q <= n:
        raise DimensionError(f"q={q} must lie in [1, {n}]")
    rng = np.random.default_rng(cfg.seed)
    w = random_orthonormal(rng, n, q)
    prev = _normalize_columns(w)
    converged = False
    it = 0
    changes = []
    for it in range(1, cfg.max_iterations + 1):
        w = mcem_step(s, w)
        cur = _normalize_columns(w)
        changes.append(_column_change(cur, prev))
        prev = cur
        if changes[-1] < cfg.tolerance:
            converged = True
            break
    vecs = _sign_fix(prev)
    evals = np.einsum("ij,ij->j", vecs, s @ vecs)
    order = np.argsort(-evals, kind="stable")
    vecs, evals = vecs[:, order], evals[order]
    info = {"iterations": it, "converged": converged, "column_change": changes}
    if not converged and raise_on_failure:
        raise ConvergenceError(
            f"mcem_eigs: no convergence in {cfg.max_iterations} iterations",
            partial=(vecs, evals, info),
        )
    if return_info:
        return vecs, evals, info
    return vecs, evals


def em_eigs_unconstrained(s, q, cfg: EmConfig):
    """Plain (rotation-ambiguous) EM on a PSD matrix; returns raw normalized W.

    Only the span of the result is meaningful.
    """
    s = _check_psd_input(s)
    rng = np.random.default_rng(cfg.seed)
    w = random_orthonormal(rng, s.shape[0], q)
    prev = _orth(w)
    for _ in range(cfg.max_iterations):
        w = em_step_unconstrained(s, w)
        cur = _orth(w)
        moved = principal_angle(cur, prev)
        prev = cur
        if moved < cfg.tolerance:
            break
    return _normalize_columns(w)


def _orth(w):
    q, _ = np.linalg.qr(w)
    return q


def fixed_point_residual(s, w):
    """Relative Frobenius gap of W against the combined E/M map of plain EM."""
    wtw_inv = np.linalg.inv(w.T @ w)
    sw = s @ w
    inner = wtw_inv @ (w.T @ sw) @ wtw_inv
    rhs = sw @ wtw_inv @ np.linalg.inv(inner)
    return float(np.linalg.norm(rhs - w) / np.linalg.norm(w))


def _sign_fix(w):
    from .linalg import sign_normalize

    return sign_normalize(w)


@dataclass
class PsdFactor:
    L: np.ndarray
    rank: int
    pivot_order: np.ndarray
    residual_trace: float
    residual_history: tuple = ()

    def reconstruct(self):
        return self.L @ self.L.T

    def summary(self):
        return {
            "rank": int(self.rank),
            "residual_trace": float(self.residual_trace),
            "pivot_order": [int(i) for i in self.pivot_order],
            "residual_history": [float(v) for v in self.residual_history],
        }


def incomplete_cholesky(s, tol=1e-6) -> PsdFactor:
    """Pivoted outer-product Cholesky, stopping at residual trace < tol * trace(S)."""
    s = _check_psd_input(s)
    n = s.shape[0]
    total = float(np.trace(s))
    diag = np.diag(s).copy()
    if diag.min(initial=0.0) < -1e-10 * abs(total):
        raise NotPsdError("negative diagonal entry")
    cols = []
    pivots = []
    history = [float(np.sum(diag))]
    stop = tol * total
    while len(cols) < n and history[-1] > stop and history[-1] > 0:
        j = int(np.argmax(diag))
        d = diag[j]
        if d < -1e-10 * abs(total):
            raise NotPsdError(f"pivot {d:g} below floor")
        if d <= 0:
            break
        col = s[:, j].copy()
        for prev in cols:
            col -= prev * prev[j]
        col /= np.sqrt(d)
        col[pivots] = 0.0
        cols.append(col)
        pivots.append(j)
        diag = diag - col * col
        diag[pivots] = 0.0
        if diag.min() < -1e-10 * abs(total):
            raise NotPsdError("residual diagonal went negative; input is not PSD")
        history.append(float(np.sum(np.maximum(diag, 0.0))))
    L = np.column_stack(cols) if cols else np.zeros((n, 0))
    return PsdFactor(L, len(cols), np.array(pivots, dtype=int), history[-1], tuple(history))


@dataclass
class KernelModel:
    spec: KernelSpec
    training_data: DataMatrix
    dual_basis: np.ndarray
    eigenvalues: np.ndarray
    normalizers: np.ndarray
    iterations: int = 0
    converged: bool = True
    centered: bool = False

    @property
    def q(self):
        return self.dual_basis.shape[1]

    def normalized_basis(self):
        return self.dual_basis / self.normalizers[None, :]

    def training_scores(self):
        """q x N scores of the training points."""
        k = kernel_matrix(self.training_data, self.spec, centered=self.centered)
        return self.normalized_basis().T @ k

    def to_dict(self):
        return {
            "spec": self.spec.to_dict(),
            "eigenvalues": self.eigenvalues.tolist(),
            "normalizers": self.normalizers.tolist(),
            "dual_basis": self.dual_basis.tolist(),
            "data_fingerprint": self.training_data.fingerprint(),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "centered": bool(self.centered),
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d, training_data: DataMatrix):
        if training_data.fingerprint() != d["data_fingerprint"]:
            raise DimensionError("training data does not match the model fingerprint")
        return cls(
            spec=KernelSpec.from_dict(d["spec"]),
            training_data=training_data,
            dual_basis=np.array(d["dual_basis"], dtype=float).reshape(training_data.n, -1),
            eigenvalues=np.array(d["eigenvalues"], dtype=float),
            normalizers=np.array(d["normalizers"], dtype=float),
            iterations=int(d.get("iterations", 0)),
            converged=bool(d.get("converged", True)),
            centered=bool(d.get("centered", False)),
        )


def kpca_fit(m: DataMatrix, spec: KernelSpec, q: int, cfg: EmConfig, centered=False,
             raise_on_failure=True) -> KernelModel:
    """Kernel PCA: constrained EM on the kernel matrix, O(qN^2) per iteration."""
    k = kernel_matrix(m, spec, centered=centered)
    if not 1 <= q <= m.n:
        raise DimensionError(f"q={q} must lie in [1, N={m.n}]")
    w, evals, info = mcem_eigs(k, q, cfg, raise_on_failure=raise_on_failure, return_info=True)
    norms = np.sqrt(np.maximum(np.einsum("ij,ij->j", w, k @ w), 0.0))
    if np.any(norms <= 0):
        raise SingularityError("zero-variance kernel component; lower q")
    w = np.ascontiguousarray(w)
    return KernelModel(spec, m, w, evals, norms, info["iterations"], info["converged"], centered)


def kpca_project(model: KernelModel, y):
    """Scores of one p-vector (or the columns of a p x M block)."""
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    if single:
        y = y[:, None]
    train = np.asarray(model.training_data.values)
    if y.shape[0] != train.shape[0]:
        raise DimensionError(f"expected {train.shape[0]}-vectors, got {y.shape[0]}")
    ky = model.spec.cross(train, y)
    if model.centered:
        kt = model.spec.cross(train, train)
        col = kt.mean(axis=0)
        ky = ky - ky.mean(axis=0)[None, :] - col[:, None] + col.mean()
    out = model.normalized_basis().T @ ky
    return out[:, 0] if single else out


__all__ = [
    "KernelSpec",
    "KernelModel",
    "PsdFactor",
    "kernel_matrix",
    "center_kernel",
    "median_gamma",
    "mcem_eigs",
    "mcem_step",
    "em_eigs_unconstrained",
    "fixed_point_residual",
    "incomplete_cholesky",
    "kpca_fit",
    "kpca_project",
]
