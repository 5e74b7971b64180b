"""Motion-compensation quality (IMC) and score-space class membership."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError, PerfectRegistrationError, SingularityError
from .frames import DisplacementField, Frame, warp_bilinear


def _interior(shape, margin):
    h, w = shape
    if 2 * margin >= min(h, w):
        raise ValueError(f"margin {margin} leaves no interior in a {h}x{w} frame")
    return slice(margin, h - margin), slice(margin, w - margin)


def compensated_errors(prev: Frame, cur: Frame, fld: DisplacementField, margin=0):
    """Sums of squares (uncompensated, compensated, current energy) over the interior."""
    if prev.shape != cur.shape or fld.shape != cur.shape:
        raise DimensionError("frames and field must share a shape")
    h, w = cur.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    pred = warp_bilinear(prev.intensities, xs - fld.vectors[..., 0], ys - fld.vectors[..., 1])
    sl = _interior(cur.shape, margin)
    a = cur.intensities[sl]
    raw = float(np.sum((a - prev.intensities[sl]) ** 2))
    comp = float(np.sum((a - pred[sl]) ** 2))
    return raw, comp, float(np.sum(a * a))


def imc_terms(frames, fields, margin=0):
    """Per-pair (uncompensated SSD, compensated SSD) lists."""
    if len(frames) < 2:
        raise ValueError("IMC needs at least two frames")
    if len(fields) != len(frames) - 1:
        raise ValueError(f"need {len(frames) - 1} fields, got {len(fields)}")
    out = []
    for k in range(1, len(frames)):
        raw, comp, energy = compensated_errors(frames[k - 1], frames[k], fields[k - 1], margin)
        out.append((raw, comp, energy))
    return out


def imc(frames, fields, margin=0):
    """Average improvement in motion compensation, in dB.

    fields[k-1] compensates frames[k-1] -> frames[k].  Raises
    PerfectRegistrationError when the compensated error vanishes.
    """
    terms = imc_terms(frames, fields, margin)
    raw = sum(t[0] for t in terms)
    comp = sum(t[1] for t in terms)
    energy = sum(t[2] for t in terms)
    if comp < 1e-12 * max(energy, 1e-300):
        raise PerfectRegistrationError("compensated error is zero: IMC is infinite")
    if raw == comp:
        return 0.0
    return float(10.0 * np.log10(raw / comp))


def imc_pair_db(raw, comp, energy):
    """IMC of one frame pair; ``inf`` on perfect registration."""
    if comp < 1e-12 * max(energy, 1e-300):
        return float("inf")
    if raw == comp:
        return 0.0
    if raw == 0.0:
        return float("-inf")
    return float(10.0 * np.log10(raw / comp))


# ------------------------------------------------------------ classification

@dataclass(frozen=True)
class ScoreClass:
    """Gaussian class in PC-score space with a Mahalanobis membership radius."""

    mean: np.ndarray
    covariance: np.ndarray
    radius: float

    @classmethod
    def fit(cls, points, radius):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise DimensionError("fit needs at least two 2-D score points")
        return cls(pts.mean(axis=0), np.cov(pts, rowvar=False), float(radius))


@dataclass(frozen=True)
class Membership:
    """``kind`` is 'class', 'outlier' or 'ambiguous'; ``classes`` lists candidates."""

    kind: str
    classes: tuple = ()

    @property
    def label(self):
        return self.classes[0] if self.kind == "class" else self.kind


def _precision(cov):
    cov = np.asarray(cov, dtype=float).reshape(2, 2)
    if abs(np.linalg.det(cov)) > 1e-12 * max(np.trace(cov) ** 2, 1e-300) and np.linalg.eigvalsh(cov).min() > 0:
        return np.linalg.inv(cov)
    tr = float(np.trace(cov))
    if tr <= 0:
        raise SingularityError("class covariance has zero trace")
    reg = cov + 1e-8 * tr * np.eye(2)
    if np.linalg.eigvalsh(reg).min() <= 0:
        raise SingularityError("class covariance is singular")
    return np.linalg.inv(reg)


def mahalanobis(point, cls: ScoreClass):
    d = np.asarray(point, dtype=float) - cls.mean
    return float(np.sqrt(max(d @ _precision(cls.covariance) @ d, 0.0)))


def classify_scores(scores, classes, residual_limit, residuals=None):
    """Assign each score point to the classes whose ellipse contains it.

    A point qualifies for a class when its Mahalanobis distance is within the
    class radius and its residual norm is within ``residual_limit``.
    """
    pts = np.atleast_2d(np.asarray(scores, dtype=float))
    if pts.shape[1] != 2:
        raise DimensionError("scores must be 2-vectors")
    if not classes:
        raise ValueError("need at least one fitted class")
    res = np.zeros(len(pts)) if residuals is None else np.asarray(residuals, dtype=float).ravel()
    if res.size != len(pts):
        raise DimensionError("one residual norm per point")
    precs = [_precision(c.covariance) for c in classes]
    out = []
    for pt, r in zip(pts, res):
        hits = []
        if r <= residual_limit:
            for i, (c, prec) in enumerate(zip(classes, precs)):
                d = pt - c.mean
                if np.sqrt(max(d @ prec @ d, 0.0)) <= c.radius:
                    hits.append(i)
        if not hits:
            out.append(Membership("outlier"))
        elif len(hits) == 1:
            out.append(Membership("class", (hits[0],)))
        else:
            out.append(Membership("ambiguous", tuple(hits)))
    return out


def neighbourhood_scores(G, z):
    """PC scores of the rows of G and the residual norm of the full PC fit."""
    from .estimation import pc_factor

    T, P, ev = pc_factor(G)
    z = np.asarray(z, dtype=float)
    coef = np.zeros(2)
    for j in range(2):
        if ev[j] > 0:
            coef[j] = T[:, j] @ z / ev[j]
    resid = float(np.linalg.norm(z - T @ coef))
    return T, resid
