"""Frames, displacement fields, synthetic sequences and their file formats."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .._backend import CONVERGED
from ..dataset import read_emss_array, write_emss
from ..errors import DataError, DimensionError


@dataclass(frozen=True, eq=False)
class Frame:
    intensities: np.ndarray

    def __post_init__(self):
        a = np.ascontiguousarray(np.array(self.intensities, dtype=float))
        if a.ndim != 2:
            raise DimensionError("frame must be 2-D (height x width)")
        if a.shape[0] < 2 or a.shape[1] < 2:
            raise DimensionError(f"frame must be at least 2x2, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise DataError("frame has non-finite intensities")
        a.setflags(write=False)
        object.__setattr__(self, "intensities", a)

    @property
    def height(self):
        return self.intensities.shape[0]

    @property
    def width(self):
        return self.intensities.shape[1]

    @property
    def shape(self):
        return self.intensities.shape


@dataclass
class DisplacementField:
    """Per-pixel displacement d(r) = (d_x, d_y) with iteration bookkeeping.

    ``vectors`` is height x width x 2.  ``status`` holds the kernel codes
    (0 iteration cap, 1 converged, 2 flat neighbourhood, 3 singular system,
    4 reverted to a lower-energy earlier estimate).
    """

    vectors: np.ndarray
    iterations: np.ndarray = None
    status: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=float)
        if self.vectors.ndim != 3 or self.vectors.shape[2] != 2:
            raise DimensionError("field vectors must be height x width x 2")
        h, w, _ = self.vectors.shape
        if self.iterations is None:
            self.iterations = np.zeros((h, w), dtype=np.int32)
        if self.status is None:
            self.status = np.full((h, w), CONVERGED, dtype=np.int8)

    @property
    def shape(self):
        return self.vectors.shape[:2]

    @property
    def converged(self):
        return self.status == CONVERGED

    @classmethod
    def zeros(cls, height, width):
        return cls(np.zeros((height, width, 2)))

    @classmethod
    def constant(cls, height, width, d):
        v = np.empty((height, width, 2))
        v[..., 0] = d[0]
        v[..., 1] = d[1]
        return cls(v)


# ------------------------------------------------------------ synthetic data

@dataclass(frozen=True)
class SmoothPattern:
    """Sum of plane-wave sinusoids; evaluable at any real position."""

    freqs: np.ndarray
    phases: np.ndarray
    amps: np.ndarray
    offset: float = 128.0

    @classmethod
    def random(cls, seed, waves=6, min_wavelength=8.0, max_wavelength=24.0, contrast=100.0):
        rng = np.random.default_rng(seed)
        lengths = rng.uniform(min_wavelength, max_wavelength, waves)
        angles = rng.uniform(0.0, np.pi, waves)
        freqs = (2 * np.pi / lengths)[:, None] * np.column_stack([np.cos(angles), np.sin(angles)])
        phases = rng.uniform(0.0, 2 * np.pi, waves)
        amps = rng.uniform(0.5, 1.0, waves)
        amps = amps * (contrast / amps.sum())
        return cls(freqs, phases, amps)

    def evaluate(self, xs, ys):
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        out = np.full(np.broadcast(xs, ys).shape, self.offset)
        for (fx, fy), ph, a in zip(self.freqs, self.phases, self.amps):
            out = out + a * np.sin(fx * xs + fy * ys + ph)
        return out

    def frame(self, height, width, shift=(0.0, 0.0)):
        """Frame whose pixel r holds pattern(r - shift)."""
        ys, xs = np.mgrid[0:height, 0:width].astype(float)
        return Frame(self.evaluate(xs - shift[0], ys - shift[1]))


def warp_bilinear(img, xs, ys):
    """Vectorized clamp-to-edge bilinear lookup of ``img`` at (xs, ys)."""
    img = np.asarray(img, dtype=float)
    h, w = img.shape
    x = np.clip(np.asarray(xs, dtype=float), 0.0, w - 1)
    y = np.clip(np.asarray(ys, dtype=float), 0.0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(y).astype(np.intp), h - 2)
    tx = x - x0
    ty = y - y0
    f00 = img[y0, x0]
    f10 = img[y0, x0 + 1]
    f01 = img[y0 + 1, x0]
    f11 = img[y0 + 1, x0 + 1]
    return (1.0 - ty) * ((1.0 - tx) * f00 + tx * f10) + ty * ((1.0 - tx) * f01 + tx * f11)


def add_noise(frame: Frame, snr_db, rng) -> Frame:
    """Additive white Gaussian noise at SNR = var(signal) / var(noise) in dB."""
    signal_var = float(np.var(frame.intensities))
    sigma = np.sqrt(signal_var / 10.0 ** (snr_db / 10.0))
    return Frame(frame.intensities + sigma * rng.standard_normal(frame.shape))


def textured_canvas(height, width, seed, smoothness=3.0, contrast=40.0):
    """Gaussian-smoothed white noise rescaled to mean 128 and std ``contrast``.

    Aperiodic, so a translated copy matches itself at one displacement only.
    """
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    a = gaussian_filter(rng.standard_normal((height, width)), smoothness, mode="wrap")
    a = (a - a.mean()) / a.std()
    return 128.0 + contrast * a


def shifted_sequence(shift, n_frames=2, height=64, width=64, seed=0, snr_db=None,
                     method="crop", smoothness=3.0, pattern=None):
    """Frames translated by ``shift`` per step, plus the true per-pair field.

    ``method="crop"`` cuts windows out of a larger textured canvas and needs
    integer shifts; ``"bilinear"`` warps the canvas with bilinear
    interpolation (any real shift); ``"analytic"`` samples a
    :class:`SmoothPattern`.  In every case frame k at r equals frame k-1 at
    r - shift away from the borders.
    """
    if n_frames < 2:
        raise ValueError("need at least two frames")
    sx, sy = float(shift[0]), float(shift[1])
    if method == "analytic":
        if pattern is None:
            pattern = SmoothPattern.random(seed)
        clean = [pattern.frame(height, width, (k * sx, k * sy)) for k in range(n_frames)]
    else:
        pad = int(np.ceil(max(abs(sx), abs(sy)) * (n_frames - 1))) + 4
        canvas = textured_canvas(height + 2 * pad, width + 2 * pad, seed, smoothness)
        window = (slice(pad, pad + height), slice(pad, pad + width))
        if method == "crop":
            if sx != round(sx) or sy != round(sy):
                raise ValueError("crop method needs integer shifts")
            clean = []
            for k in range(n_frames):
                ox, oy = int(round(k * sx)), int(round(k * sy))
                clean.append(Frame(canvas[pad - oy:pad - oy + height, pad - ox:pad - ox + width]))
        elif method == "bilinear":
            ys, xs = np.mgrid[0:canvas.shape[0], 0:canvas.shape[1]].astype(float)
            clean = [Frame(canvas[window])]
            cur = canvas
            for _ in range(1, n_frames):
                cur = warp_bilinear(cur, xs - sx, ys - sy)
                clean.append(Frame(cur[window]))
        else:
            raise ValueError(f"unknown method {method!r}")
    if snr_db is not None:
        rng = np.random.default_rng([seed, 0x5EED])
        frames = [add_noise(f, snr_db, rng) for f in clean]
    else:
        frames = clean
    truth = DisplacementField.constant(height, width, (sx, sy))
    return frames, truth


# ----------------------------------------------------------------- file I/O

def _pgm_tokens(data, count, pos):
    out = []
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PGM header")
        out.append(data[start:pos])
    return out, pos


def read_pgm(path) -> Frame:
    """Binary (P5) or ASCII (P2) greyscale PGM."""
    data = Path(path).read_bytes()
    (magic,), pos = _pgm_tokens(data, 1, 0)
    if magic not in (b"P5", b"P2"):
        raise DataError(f"{path}: not a P5/P2 PGM file")
    (w, h, maxval), pos = _pgm_tokens(data, 3, pos)
    w, h, maxval = int(w), int(h), int(maxval)
    if magic == b"P2":
        vals, _ = _pgm_tokens(data, w * h, pos)
        return Frame(np.array([int(v) for v in vals], dtype=float).reshape(h, w))
    if not 0 < maxval < 65536:
        raise DataError(f"{path}: bad maxval {maxval}")
    pos += 1  # single whitespace before raster
    dtype = np.uint8 if maxval < 256 else ">u2"
    itemsize = 1 if maxval < 256 else 2
    raster = data[pos:pos + w * h * itemsize]
    if len(raster) != w * h * itemsize:
        raise DataError(f"{path}: truncated PGM raster")
    return Frame(np.frombuffer(raster, dtype=dtype).reshape(h, w).astype(float))


def write_pgm(path, frame: Frame):
    """P5, maxval 255; intensities are rounded and clipped to [0, 255]."""
    a = np.clip(np.rint(frame.intensities), 0, 255).astype(np.uint8)
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(a.tobytes())


def read_frame(path) -> Frame:
    """PGM or EMSS raw f64 grid (p = height, n = width)."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == b"EMSS":
        values, _ = read_emss_array(path)
        return Frame(values)
    return read_pgm(path)


def write_frame_emss(path, frame: Frame):
    write_emss(path, frame.intensities)


FIELD_COLUMNS = ("x", "y", "d_x", "d_y", "iterations", "converged")


def write_field_csv(path_or_buf, fld: DisplacementField):
    own = isinstance(path_or_buf, (str, Path))
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        fh.write(",".join(FIELD_COLUMNS) + "\n")
        h, w = fld.shape
        conv = fld.converged
        for y in range(h):
            for x in range(w):
                fh.write("%d,%d,%.17g,%.17g,%d,%d\n" % (
                    x, y, fld.vectors[y, x, 0], fld.vectors[y, x, 1],
                    fld.iterations[y, x], int(conv[y, x])))
    finally:
        if own:
            fh.close()


def read_field_csv(path, shape=None) -> DisplacementField:
    """Read the x,y,d_x,d_y,iterations,converged schema into a dense field."""
    text = Path(path).read_text()
    reader = csv.DictReader(io.StringIO(text))
    missing = {"x", "y", "d_x", "d_y"} - set(reader.fieldnames or ())
    if missing:
        raise DataError(f"{path}: missing columns {sorted(missing)}")
    rows = list(reader)
    if not rows:
        raise DataError(f"{path}: empty field file")
    xs = np.array([int(r["x"]) for r in rows])
    ys = np.array([int(r["y"]) for r in rows])
    if shape is None:
        shape = (int(ys.max()) + 1, int(xs.max()) + 1)
    h, w = shape
    if xs.min() < 0 or ys.min() < 0 or xs.max() >= w or ys.max() >= h:
        raise DataError(f"{path}: positions outside a {h}x{w} grid")
    vec = np.zeros((h, w, 2))
    it = np.zeros((h, w), dtype=np.int32)
    status = np.full((h, w), CONVERGED, dtype=np.int8)
    for r, x, y in zip(rows, xs, ys):
        vec[y, x, 0] = float(r["d_x"])
        vec[y, x, 1] = float(r["d_y"])
        if r.get("iterations") not in (None, ""):
            it[y, x] = int(r["iterations"])
        if r.get("converged") not in (None, ""):
            status[y, x] = CONVERGED if int(r["converged"]) else 0
    return DisplacementField(vec, it, status)
