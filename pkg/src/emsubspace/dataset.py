"""Observation matrices, centering, synthetic generators and matrix file I/O.

A :class:`DataMatrix` is p x n: rows are measurement types and columns are
samples.  Values are kept column-major so that a single sample is contiguous.
Unobserved entries are flagged by an explicit boolean mask; their slots in
``values`` hold 0 and are never read.
"""
from __future__ import annotations

import csv
import hashlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError, MissingDataError

EMSS_MAGIC = b"EMSS"


@dataclass(frozen=True, eq=False)
class DataMatrix:
    values: np.ndarray
    missing_mask: np.ndarray | None = None
    column_mean: np.ndarray | None = None

    def __post_init__(self):
        values = np.asfortranarray(np.array(self.values, dtype=float))
        if values.ndim != 2:
            raise DimensionError(f"values must be 2-D, got {values.ndim}-D")
        p, n = values.shape
        if p < 1 or n < 2:
            raise DimensionError(f"need p >= 1 and n >= 2, got {p}x{n}")
        mask = self.missing_mask
        if mask is not None:
            mask = np.asfortranarray(np.array(mask, dtype=bool))
            if mask.shape != values.shape:
                raise DimensionError("missing_mask shape differs from values")
            if mask.all(axis=0).any():
                raise DataError("every column needs at least one observed entry")
            if not mask.any():
                mask = None
            else:
                values[mask] = 0.0
        if mask is None and not np.all(np.isfinite(values)):
            raise DataError("non-finite values; flag unobserved entries in missing_mask")
        if mask is not None and not np.all(np.isfinite(values[~mask])):
            raise DataError("non-finite observed values")
        mean = self.column_mean
        if mean is not None:
            mean = np.array(mean, dtype=float).reshape(p)
        values.setflags(write=False)
        if mask is not None:
            mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "missing_mask", mask)
        object.__setattr__(self, "column_mean", mean)

    @property
    def shape(self):
        return self.values.shape

    @property
    def p(self):
        return self.values.shape[0]

    @property
    def n(self):
        return self.values.shape[1]

    @property
    def has_missing(self):
        return self.missing_mask is not None

    @property
    def observed(self):
        """Boolean p x n matrix, True where a value was observed."""
        if self.missing_mask is None:
            return np.ones(self.shape, dtype=bool)
        return ~self.missing_mask

    def with_nan(self):
        """Copy of ``values`` with NaN in unobserved slots."""
        out = np.array(self.values, dtype=float)
        if self.missing_mask is not None:
            out[self.missing_mask] = np.nan
        return out

    def fingerprint(self):
        """SHA-256 over shape, values and mask."""
        h = hashlib.sha256()
        h.update(struct.pack("<II", *self.shape))
        h.update(np.ascontiguousarray(self.values).tobytes())
        if self.missing_mask is not None:
            h.update(np.ascontiguousarray(self.missing_mask).tobytes())
        return h.hexdigest()

    @classmethod
    def from_nan(cls, values):
        """Build from an array that marks unobserved entries with NaN."""
        values = np.array(values, dtype=float)
        mask = np.isnan(values)
        return cls(np.where(mask, 0.0, values), mask if mask.any() else None)


@dataclass(frozen=True)
class SyntheticSpec:
    p: int
    n: int
    true_rank: int
    eigenvalues: tuple
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.p < 1 or self.n < 2:
            raise DimensionError("need p >= 1 and n >= 2")
        if self.true_rank < 1:
            raise DimensionError("true_rank must be positive")
        if self.true_rank > self.p:
            raise DimensionError(f"true_rank {self.true_rank} exceeds p={self.p}")
        ev = tuple(float(e) for e in self.eigenvalues)
        if len(ev) != self.true_rank:
            raise DimensionError("need one eigenvalue per latent dimension")
        if any(e <= 0 for e in ev):
            raise ValueError("eigenvalues must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        object.__setattr__(self, "eigenvalues", ev)


def center(m: DataMatrix) -> DataMatrix:
    """Subtract each row's mean over its observed entries.

    The removed mean is cached in ``column_mean``; centering an already
    centered matrix keeps the originally cached mean.
    """
    obs = m.observed
    counts = obs.sum(axis=1)
    sums = np.where(obs, m.values, 0.0).sum(axis=1)
    # a row with no observed entry keeps mean 0
    mean = np.divide(sums, counts, out=np.zeros(m.p), where=counts > 0)
    values = np.where(obs, m.values - mean[:, None], 0.0)
    total = mean if m.column_mean is None else m.column_mean + mean
    return DataMatrix(values, m.missing_mask, total)


def is_centered(m: DataMatrix, atol=1e-12) -> bool:
    obs = m.observed
    counts = obs.sum(axis=1)
    sums = np.where(obs, m.values, 0.0).sum(axis=1)
    means = np.divide(sums, counts, out=np.zeros(m.p), where=counts > 0)
    return bool(np.all(np.abs(means) <= atol * max(1.0, float(np.abs(m.values).max()))))


def ensure_centered(m: DataMatrix) -> DataMatrix:
    """Center ``m`` unless it already carries a cached mean."""
    return m if m.column_mean is not None else center(m)


def sample_covariance(m: DataMatrix) -> np.ndarray:
    """(1/(n-1)) X X^T for a complete, centered matrix."""
    if m.has_missing:
        raise MissingDataError("sample covariance needs complete data")
    x = m.values
    cov = (x @ x.T) / (m.n - 1)
    return 0.5 * (cov + cov.T)


def random_orthonormal(rng, p, k):
    """Seeded p x k matrix with orthonormal columns (QR of a Gaussian draw)."""
    q, r = np.linalg.qr(rng.standard_normal((p, k)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def generate_synthetic(spec: SyntheticSpec):
    """Draw y = B diag(sqrt(eig)) x + sigma v for n samples.

    Returns ``(DataMatrix, B)``; B is the planted orthonormal p x k basis.
    """
    rng = np.random.default_rng(spec.seed)
    basis = random_orthonormal(rng, spec.p, spec.true_rank)
    latent = rng.standard_normal((spec.true_rank, spec.n))
    scale = np.sqrt(np.asarray(spec.eigenvalues))[:, None]
    y = basis @ (scale * latent)
    if spec.noise_sigma > 0:
        y = y + spec.noise_sigma * rng.standard_normal((spec.p, spec.n))
    return DataMatrix(y), basis


def mask_random(m: DataMatrix, fraction, seed) -> DataMatrix:
    """Hide a random ``fraction`` of entries, keeping one observed per column."""
    rng = np.random.default_rng(seed)
    mask = rng.random(m.shape) < fraction
    full = mask.all(axis=0)
    if full.any():
        keep = rng.integers(0, m.p, size=int(full.sum()))
        mask[keep, np.flatnonzero(full)] = False
    if m.missing_mask is not None:
        mask |= m.missing_mask
    return DataMatrix(m.values, mask)


# ---------------------------------------------------------------- file I/O

def _parse_cell(cell):
    cell = cell.strip()
    if cell == "":
        return None
    return float(cell)


def read_csv(path) -> DataMatrix:
    """Read a CSV matrix (rows = measurement types, empty cell = missing).

    A first row that does not parse as numbers is treated as a header.
    """
    text = Path(path).read_text()
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: empty matrix file")
    try:
        [_parse_cell(c) for c in rows[0]]
    except ValueError:
        rows = rows[1:]
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise DataError(f"{path}: ragged rows")
    try:
        cells = [[_parse_cell(c) for c in r] for r in rows]
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    values = np.array([[np.nan if c is None else c for c in r] for r in cells])
    return DataMatrix.from_nan(values)


def write_csv(path, m, fmt="%.17g"):
    """Write a DataMatrix or plain 2-D array; missing entries become empty cells."""
    if isinstance(m, DataMatrix):
        values, mask = np.asarray(m.values), m.missing_mask
    else:
        values, mask = np.atleast_2d(np.asarray(m, dtype=float)), None
    with open(path, "w", newline="") as fh:
        for i in range(values.shape[0]):
            cells = []
            for j in range(values.shape[1]):
                cells.append("" if mask is not None and mask[i, j] else fmt % values[i, j])
            fh.write(",".join(cells) + "\n")


def write_emss(path, m):
    """Binary container: magic, u32 p, u32 n, f64 LE row-major, optional mask bytes."""
    if isinstance(m, DataMatrix):
        values, mask = np.asarray(m.values), m.missing_mask
    else:
        values, mask = np.atleast_2d(np.asarray(m, dtype=float)), None
    p, n = values.shape
    with open(path, "wb") as fh:
        fh.write(EMSS_MAGIC)
        fh.write(struct.pack("<II", p, n))
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())
        if mask is not None:
            fh.write(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())


def read_emss_array(path):
    """Return ``(values, mask_or_None)`` from an EMSS file."""
    raw = Path(path).read_bytes()
    if raw[:4] != EMSS_MAGIC or len(raw) < 12:
        raise DataError(f"{path}: not an EMSS file")
    p, n = struct.unpack("<II", raw[4:12])
    nbytes = 8 * p * n
    body = raw[12:12 + nbytes]
    if len(body) != nbytes:
        raise DataError(f"{path}: truncated EMSS payload")
    values = np.frombuffer(body, dtype="<f8").reshape(p, n).astype(float)
    rest = raw[12 + nbytes:]
    mask = None
    if rest:
        if len(rest) != p * n:
            raise DataError(f"{path}: mask block has {len(rest)} bytes, expected {p * n}")
        mask = np.frombuffer(rest, dtype=np.uint8).reshape(p, n).astype(bool)
    return values, mask


def read_emss(path) -> DataMatrix:
    values, mask = read_emss_array(path)
    return DataMatrix(values, mask)


def read_matrix(path) -> DataMatrix:
    """Dispatch on content: EMSS magic, otherwise CSV."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == EMSS_MAGIC:
        return read_emss(path)
    return read_csv(path)
