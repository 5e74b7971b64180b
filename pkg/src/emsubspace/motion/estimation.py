"""Pel-recursive displacement estimation with OLS, RLS and two PCR solvers.

Around each working point the displaced frame differences of a small causal
neighbourhood are linearized into z = G u + n, where row i of G is the
spatial gradient of the previous frame at r_i - d and z_i = -DFD(r_i; d).
The solved update u refines the estimate, d <- d + u.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .. import _pykernels
from .._backend import BACKEND, kernels
from ..errors import DegenerateSystemError, DimensionError, OutOfBoundsError, SingularityError
from .frames import DisplacementField, Frame

BORDER_POLICIES = ("clamp", "error")


@dataclass(frozen=True)
class MaskSpec:
    """Neighbourhood offsets (dx, dy) relative to the working point."""

    offsets: tuple = ((-1, -1), (0, -1), (1, -1), (-1, 0), (0, 0))

    def __post_init__(self):
        offs = tuple((int(dx), int(dy)) for dx, dy in self.offsets)
        if len(offs) < 2:
            raise ValueError("a mask needs at least two points")
        if len(set(offs)) != len(offs):
            raise ValueError("mask offsets must be distinct")
        object.__setattr__(self, "offsets", offs)

    @property
    def N(self):
        return len(self.offsets)

    @classmethod
    def causal(cls):
        """3x3 half-plane above and left of the working point, plus the point."""
        return cls()

    @classmethod
    def square(cls, size):
        if size < 2:
            raise ValueError("square mask needs size >= 2")
        lo = -(size // 2)
        return cls(tuple((dx, dy) for dy in range(lo, lo + size) for dx in range(lo, lo + size)))

    def as_array(self):
        return np.ascontiguousarray(np.array(self.offsets, dtype=np.int64).reshape(-1, 2))


_KIND_CODES = {"ols": _pykernels.OLS, "rls": _pykernels.RLS, "pcr1": _pykernels.PCR1, "pcr2": _pykernels.PCR2}


def _as_2x2(value, name):
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        if a < 0:
            raise ValueError(f"{name} must be nonnegative")
        return float(a) * np.eye(2)
    a = a.reshape(2, 2)
    if np.abs(a - a.T).max() > 1e-12 * max(np.abs(a).max(), 1.0):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(a).min() < 0:
        raise ValueError(f"{name} must be positive semi-definite")
    return a


@dataclass(frozen=True)
class SolverSpec:
    """Update estimator.

    kind: ``ols``, ``rls`` (regularizer ``lam``: scalar or 2x2 PSD),
    ``pcr1`` (keep 1 or 2 components; ``keep=None`` keeps the second one
    only when lambda2/lambda1 > ``ratio``) or ``pcr2`` (PC-domain diagonal
    regularizer ``xi``: scalar or pair).
    """

    kind: str = "rls"
    lam: object = 100.0
    keep: int | None = None
    ratio: float = 0.01
    xi: object = 100.0

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown solver {self.kind!r}")
        _as_2x2(self.lam, "lam")
        xi = np.broadcast_to(np.asarray(self.xi, dtype=float), (2,))
        if np.any(xi < 0):
            raise ValueError("xi entries must be nonnegative")
        if self.keep not in (None, 1, 2):
            raise ValueError("keep must be None, 1 or 2")
        if not self.ratio >= 0:
            raise ValueError("ratio must be nonnegative")

    def kernel_args(self):
        lam = np.ascontiguousarray(_as_2x2(self.lam, "lam"))
        xi = np.ascontiguousarray(np.broadcast_to(np.asarray(self.xi, dtype=float), (2,)).copy())
        return _KIND_CODES[self.kind], lam, xi, int(self.keep or 0), float(self.ratio)

    def to_dict(self):
        lam = np.asarray(self.lam, dtype=float)
        xi = np.asarray(self.xi, dtype=float)
        return {
            "kind": self.kind,
            "lam": lam.tolist(),
            "keep": self.keep,
            "ratio": float(self.ratio),
            "xi": xi.tolist(),
        }


def _frame_array(f):
    return f.intensities if isinstance(f, Frame) else np.asarray(f, dtype=float)


def _check_inside(img, x, y, border):
    h, w = img.shape
    if border not in BORDER_POLICIES:
        raise ValueError(f"unknown border policy {border!r}")
    if border == "error" and not (0.0 <= x <= w - 1 and 0.0 <= y <= h - 1):
        raise OutOfBoundsError(f"position ({x:g}, {y:g}) outside {w}x{h} frame")


def bilinear_sample(f, r, border="clamp"):
    """Bilinear value and gradient at the real position r = (x, y).

    With corners f00 = I(x0, y0), f10 = I(x0+1, y0), f01 = I(x0, y0+1),
    f11 = I(x0+1, y0+1) and fractions (tx, ty):
    g_x = (1-ty)(f10-f00) + ty(f11-f01), g_y = (1-tx)(f01-f00) + tx(f11-f10).
    At integer positions these are forward differences (backward on the last
    row/column).
    """
    img = _frame_array(f)
    x, y = float(r[0]), float(r[1])
    _check_inside(img, x, y, border)
    h, w = img.shape
    val, gx, gy = _pykernels.bilinear(img, w, h, x, y)
    return float(val), np.array([gx, gy], dtype=float)


def dfd(prev, cur, r, d, border="clamp"):
    """Displaced frame difference I_k(r) - I_{k-1}(r - d)."""
    c = _frame_array(cur)
    x, y = int(r[0]), int(r[1])
    if not (0 <= x < c.shape[1] and 0 <= y < c.shape[0]):
        raise OutOfBoundsError(f"working point {r} outside current frame")
    val, _ = bilinear_sample(prev, (x - d[0], y - d[1]), border)
    return float(c[y, x]) - val


def build_system(prev, cur, r, d, mask: MaskSpec | None = None, border="clamp"):
    """Stack the linearized observation equations z = G u for one working point.

    Returns ``(G, z)`` with one row per mask point in mask order.
    """
    mask = mask or MaskSpec()
    c = _frame_array(cur)
    h, w = c.shape
    G = np.empty((mask.N, 2))
    z = np.empty(mask.N)
    for i, (ox, oy) in enumerate(mask.offsets):
        rx, ry = int(r[0]) + ox, int(r[1]) + oy
        if not (0 <= rx < w and 0 <= ry < h):
            raise OutOfBoundsError(f"mask point ({rx}, {ry}) outside current frame")
        val, grad = bilinear_sample(prev, (rx - d[0], ry - d[1]), border)
        G[i] = grad
        z[i] = val - float(c[ry, rx])
    if np.all(np.hypot(G[:, 0], G[:, 1]) < 1e-12):
        raise DegenerateSystemError("no spatial gradient in the neighbourhood")
    return G, z


def pc_factor(G):
    """Scores T, loadings P and eigenvalues of G^T G, with G = T P^T."""
    G = np.asarray(G, dtype=float)
    a11, a12, a22 = _normal_sums(G)
    l1, l2, c, s = _pykernels.eig2(a11, a12, a22)
    P = np.array([[c, -s], [s, c]])
    return G @ P, P, np.array([l1, l2])


def _normal_sums(G):
    a11 = a12 = a22 = 0.0
    for gx, gy in G:
        a11 += gx * gx
        a12 += gx * gy
        a22 += gy * gy
    return a11, a12, a22


def solve_update(G, z, spec: SolverSpec | None = None):
    """Update vector u for z = G u under the chosen estimator."""
    spec = spec or SolverSpec()
    G = np.asarray(G, dtype=float)
    z = np.asarray(z, dtype=float).ravel()
    if G.ndim != 2 or G.shape[1] != 2 or G.shape[0] != z.size:
        raise DimensionError(f"G must be N x 2 matching z, got {G.shape} and {z.shape}")
    a11, a12, a22 = _normal_sums(G)
    g1 = g2 = 0.0
    for (gx, gy), zi in zip(G, z):
        g1 += gx * zi
        g2 += gy * zi
    kind, lam, xi, keep, ratio = spec.kernel_args()
    u = _pykernels.solve2(a11, a12, a22, g1, g2, kind, tuple(lam.ravel()), tuple(xi), keep, ratio)
    if u is None:
        raise SingularityError(f"{spec.kind}: normal equations are singular")
    return np.array(u)


def estimate_field(prev, cur, mask: MaskSpec | None = None, spec: SolverSpec | None = None,
                   max_iter=5, clamp=15.0, stop_tol=0.01, causal=True, safeguard=True,
                   workers=1, backend=None) -> DisplacementField:
    """Raster-scan pel-recursive estimation of the displacement field.

    Each pixel starts from the previous pixel's final estimate (``causal``)
    or from zero, then iterates d <- d + u until |u| < ``stop_tol`` or
    ``max_iter`` updates.  With ``safeguard`` a pixel starts from zero when
    that has lower neighbourhood DFD energy than the causal prediction, and
    keeps whichever visited estimate has the lowest energy, so a diverging
    linearized step cannot leave it worse off than its starting prediction.
    Mask points falling outside the frame are dropped for that pixel.
    Row-parallel execution (``workers > 1``) is only allowed with
    ``causal=False``; results are identical to the serial scan.
    """
    mask = mask or MaskSpec()
    spec = spec or SolverSpec()
    p = np.ascontiguousarray(_frame_array(prev), dtype=float)
    c = np.ascontiguousarray(_frame_array(cur), dtype=float)
    if p.shape != c.shape:
        raise DimensionError(f"frame shapes differ: {p.shape} vs {c.shape}")
    if max_iter < 1:
        raise ValueError("max_iter must be positive")
    if not clamp > 0:
        raise ValueError("clamp must be positive")
    if workers > 1 and causal:
        raise ValueError("row-parallel estimation requires causal=False")
    impl = kernels if backend is None else _pick(backend)
    h, w = p.shape
    d = np.zeros((h, w, 2))
    iters = np.zeros((h, w), dtype=np.int32)
    status = np.zeros((h, w), dtype=np.int8)
    kind, lam, xi, keep, ratio = spec.kernel_args()
    offs = mask.as_array()

    def run(r0, r1):
        impl.estimate_rows(p, c, offs, kind, lam, xi, keep, ratio, int(max_iter),
                           float(clamp), float(stop_tol), bool(causal), bool(safeguard), r0, r1, d, iters, status)

    if workers > 1:
        bounds = np.linspace(0, h, min(workers, h) + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda b: run(int(b[0]), int(b[1])), zip(bounds[:-1], bounds[1:])))
    else:
        run(0, h)
    meta = {"solver": spec.to_dict(), "mask": [list(o) for o in mask.offsets],
            "max_iter": int(max_iter), "clamp": float(clamp), "stop_tol": float(stop_tol),
            "causal": bool(causal), "safeguard": bool(safeguard), "backend": impl.__name__.rsplit(".", 1)[-1]}
    return DisplacementField(d, iters, status, meta)


def _pick(name):
    if name == "python":
        return _pykernels
    if name == "cython":
        from .. import _ckernels
        return _ckernels
    raise ValueError(f"unknown backend {name!r}")


__all__ = [
    "BACKEND",
    "MaskSpec",
    "SolverSpec",
    "bilinear_sample",
    "dfd",
    "build_system",
    "pc_factor",
    "solve_update",
    "estimate_field",
]
