"""Command-line interface: ``emss <group> <action> [options]``.

Every run resolves its settings (flags > ``--config`` file > defaults),
validates them before touching any data, computes its artifacts in memory
and only then writes them together with ``manifest.json``.

Exit codes: 0 ok, 2 invalid configuration, 3 data error, 4 convergence
failure (partial artifacts written and flagged in the manifest).
"""
from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from ._backend import BACKEND
from .dataset import DataMatrix, SyntheticSpec, generate_synthetic, mask_random, read_matrix, write_emss
from .errors import ConvergenceError, DataError, SingularityError
from .kpca import KernelModel, KernelSpec, incomplete_cholesky, kernel_matrix, kpca_fit, kpca_project, median_gamma
from .motion.estimation import MaskSpec, SolverSpec, estimate_field
from .motion.frames import (
    FIELD_COLUMNS,
    DisplacementField,
    read_field_csv,
    read_frame,
    shifted_sequence,
    write_field_csv,
    write_frame_emss,
    write_pgm,
)
from .motion.metrics import imc_pair_db, imc_terms
from .pca import EmConfig, pca_covariance, pca_em, pca_svd
from .spca import spca_em

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CONVERGENCE = 4

FRAME_SUFFIXES = (".pgm", ".pnm", ".emss")
BUNDLED_PREFIX = "bundled:"

log = logging.getLogger("emsubspace.cli")


class ConfigError(Exception):
    """Invalid run configuration (exit 2)."""


# ------------------------------------------------------------------ options

def _bool(text):
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _opt_float(text):
    if text is None or str(text).strip().lower() in ("", "none"):
        return None
    return float(text)


def _keep(text):
    t = str(text).strip().lower()
    if t in ("auto", "none", ""):
        return None
    return int(t)


@dataclass
class Opt:
    flags: tuple
    dest: str
    type: object = str
    default: object = None
    help: str = ""
    choices: tuple | None = None
    positional: bool = False
    boolean: bool = False


def _o(*flags, dest=None, **kw):
    if dest is None:
        dest = flags[-1].lstrip("-").replace("-", "_")
    return Opt(flags, dest, **kw)


COMMON = [
    _o("--out", type=str, default="emss_out", help="output directory"),
    _o("--config", type=str, default=None, help="key=value settings file"),
    _o("--seed", type=int, default=None, help="RNG seed (falls back to EMSS_SEED, then 0)"),
    _o("--format", dest="format", type=str, default="csv", choices=("csv", "json"),
       help="format of tabular outputs"),
    _o("-v", "--verbose", type=int, default=0, help="repeat for more log output"),
]

EM_OPTS = [
    _o("--max-iter", type=int, default=1000),
    _o("--tol", type=float, default=1e-7),
]

KERNEL_OPTS = [
    _o("--kernel", type=str, default="linear", choices=("linear", "polynomial", "rbf")),
    _o("--degree", type=int, default=2),
    _o("--offset", type=float, default=0.0),
    _o("--gamma", type=str, default="1.0", help="RBF width, or 'median' for the median heuristic"),
]

MOTION_OPTS = [
    _o("--solver", type=str, default="rls", choices=("ols", "rls", "pcr1", "pcr2")),
    _o("--lam", type=_floats, default=[100.0], help="RLS regularizer: scalar or 4 entries"),
    _o("--xi", type=_floats, default=[100.0], help="PCR2 regularizer: scalar or pair"),
    _o("--keep", type=_keep, default=None, help="PCR1 components: auto, 1 or 2"),
    _o("--ratio", type=float, default=0.01, help="PCR1 eigenvalue ratio threshold"),
    _o("--mask", type=str, default="causal", help="causal, or squareN for an N x N window"),
    _o("--iterations", dest="max_iter", type=int, default=5, help="updates per pixel"),
    _o("--clamp", type=float, default=15.0),
    _o("--stop-tol", type=float, default=0.01),
    _o("--causal", type=_bool, default=True, boolean=True),
    _o("--safeguard", type=_bool, default=True, boolean=True),
    _o("--workers", type=int, default=1),
    _o("--backend", type=str, default="auto", choices=("auto", "python", "cython")),
    _o("--margin", type=int, default=0, help="border excluded from metrics"),
]

COMMANDS = {
    "pca fit": [
        _o("input", positional=True, help="matrix file (CSV or EMSS)"),
        _o("--algo", type=str, default="em", choices=("cov", "svd", "em")),
        _o("-k", dest="k", type=int, default=2),
        *EM_OPTS,
    ],
    "spca fit": [
        _o("input", positional=True),
        _o("-k", dest="k", type=int, default=2),
        *EM_OPTS,
    ],
    "kpca fit": [
        _o("input", positional=True),
        _o("-q", dest="q", type=int, default=2),
        *KERNEL_OPTS,
        _o("--centered", type=_bool, default=False, boolean=True),
        _o("--max-iter", type=int, default=5000),
        _o("--tol", type=float, default=1e-10),
    ],
    "kpca project": [
        _o("--model", type=str, default=None, help="KernelModel JSON"),
        _o("--train", type=str, default=None, help="training matrix the model was fitted on"),
        _o("--input", type=str, default=None, help="matrix whose columns are projected"),
    ],
    "kpca ichol": [
        _o("input", positional=True),
        *KERNEL_OPTS,
        _o("--tol", type=float, default=1e-6),
    ],
    "motion estimate": [
        _o("prev", positional=True, help="previous frame (PGM or EMSS)"),
        _o("cur", positional=True, help="current frame"),
        *MOTION_OPTS,
        _o("--truth", type=str, default=None, help="ground-truth field CSV"),
        _o("--truth-shift", type=_floats, default=None, help="constant true displacement dx,dy"),
    ],
    "motion imc": [
        _o("frames", positional=True, help="directory of frames, processed in name order"),
        _o("--fields", type=str, default=None,
           help="directory (or comma list) of field CSVs; estimated on the fly when absent"),
        *MOTION_OPTS,
    ],
    "synth make": [
        _o("--kind", type=str, default="matrix", choices=("matrix", "sequence")),
        _o("-p", dest="p", type=int, default=10),
        _o("-n", dest="n", type=int, default=200),
        _o("-k", dest="k", type=int, default=2),
        _o("--eigenvalues", type=_floats, default=None, help="latent variances (default k..1)"),
        _o("--noise", type=float, default=0.0, help="isotropic noise std"),
        _o("--missing", type=float, default=0.0, help="fraction of entries to hide"),
        _o("--matrix-format", type=str, default="csv", choices=("csv", "emss")),
        _o("--shift", type=_floats, default=[2.0, 1.0]),
        _o("--frames", dest="n_frames", type=int, default=2),
        _o("--height", type=int, default=64),
        _o("--width", type=int, default=64),
        _o("--snr", type=_opt_float, default=None, help="SNR in dB; none for noiseless"),
        _o("--method", type=str, default="bilinear", choices=("crop", "bilinear", "analytic")),
        _o("--smoothness", type=float, default=3.0),
        _o("--frame-format", type=str, default="emss", choices=("emss", "pgm")),
    ],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{message} (see {self.prog} --help)")


def _add(parser, opt: Opt):
    if opt.positional:
        parser.add_argument(opt.dest, nargs="?", help=opt.help)
        return
    kw = {"dest": opt.dest, "help": opt.help}
    if opt.boolean:
        parser.add_argument(*opt.flags, action=argparse.BooleanOptionalAction, **kw)
    elif opt.dest == "verbose":
        parser.add_argument(*opt.flags, action="count", **kw)
    else:
        parser.add_argument(*opt.flags, type=opt.type, choices=opt.choices, **kw)


def build_parser():
    parser = _Parser(prog="emss", description="EM subspace methods and motion estimation.")
    parser.add_argument("--version", action="version", version=f"emss {__version__}")
    groups = parser.add_subparsers(dest="group", parser_class=_Parser)
    subs = {}
    for name, opts in COMMANDS.items():
        group, action = name.split()
        if group not in subs:
            subs[group] = groups.add_parser(group).add_subparsers(dest="action", parser_class=_Parser)
        sp = subs[group].add_parser(action, argument_default=argparse.SUPPRESS)
        for opt in COMMON + opts:
            _add(sp, opt)
    return parser


# ----------------------------------------------------------- configuration

@dataclass
class RunConfig:
    command: str
    params: dict
    out: Path
    seed: int
    fmt: str = "csv"
    verbosity: int = 0
    sources: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.params[key]


def read_config_file(path, opts):
    """Parse ``key = value`` lines ('#' comments, [section] headers ignored)."""
    by_dest = {o.dest: o for o in opts}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        value = value.strip("\"'")
        opt = by_dest.get(key)
        if opt is None or key in ("config", "out"):
            raise ConfigError(f"{path}:{lineno}: unknown setting {key!r}")
        conv = _bool if opt.boolean else (int if key == "verbose" else opt.type)
        try:
            out[key] = conv(value) if value != "" or conv is str else None
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: {key}: {exc}") from None
        if opt.choices and out[key] not in opt.choices:
            raise ConfigError(f"{path}:{lineno}: {key} must be one of {', '.join(opt.choices)}")
    return out


def resolve(argv) -> RunConfig:
    ns = vars(build_parser().parse_args(argv))
    group, action = ns.pop("group", None), ns.pop("action", None)
    if group is None or action is None:
        raise ConfigError("missing subcommand; see emss --help")
    command = f"{group} {action}"
    opts = COMMON + COMMANDS[command]
    params = {o.dest: o.default for o in opts}
    sources = dict.fromkeys(params, "default")
    if ns.get("config"):
        from_file = read_config_file(ns["config"], opts)
        params.update(from_file)
        sources.update(dict.fromkeys(from_file, "config"))
    params.update(ns)
    sources.update(dict.fromkeys(ns, "flag"))
    if params["seed"] is None:
        env = os.environ.get("EMSS_SEED")
        if env not in (None, ""):
            try:
                params["seed"] = int(env)
            except ValueError:
                raise ConfigError(f"EMSS_SEED must be an integer, got {env!r}") from None
            sources["seed"] = "env"
        else:
            params["seed"] = 0
    return RunConfig(command, params, Path(params["out"]), int(params["seed"]),
                     params["format"], int(params["verbose"] or 0), sources)


# --------------------------------------------------------------- validation

def _input_path(value, what):
    if value is None:
        raise ConfigError(f"missing {what}")
    if str(value).startswith(BUNDLED_PREFIX):
        name = str(value)[len(BUNDLED_PREFIX):]
        res = resources.files("emsubspace") / "data" / f"{name}.csv"
        if not res.is_file():
            raise ConfigError(f"no bundled dataset {name!r}")
        return Path(str(res))
    path = Path(value)
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _kernel_spec(cfg):
    gamma = cfg["gamma"]
    median = str(gamma).strip().lower() == "median"
    spec = KernelSpec(cfg["kernel"], cfg["degree"], cfg["offset"], 1.0 if median else float(gamma))
    return spec, median


def _motion_setup(cfg):
    name = str(cfg["mask"]).lower()
    if name == "causal":
        mask = MaskSpec.causal()
    elif name.startswith("square") and name[6:].isdigit():
        mask = MaskSpec.square(int(name[6:]))
    else:
        raise ConfigError(f"unknown mask {cfg['mask']!r}; use causal or squareN")
    lam, xi = cfg["lam"], cfg["xi"]
    if len(lam) not in (1, 4):
        raise ConfigError("--lam takes 1 or 4 values")
    if len(xi) not in (1, 2):
        raise ConfigError("--xi takes 1 or 2 values")
    spec = SolverSpec(cfg["solver"], lam[0] if len(lam) == 1 else np.reshape(lam, (2, 2)),
                      cfg["keep"], cfg["ratio"], xi[0] if len(xi) == 1 else tuple(xi))
    if cfg["max_iter"] < 1 or cfg["clamp"] <= 0 or cfg["stop_tol"] < 0 or cfg["workers"] < 1:
        raise ConfigError("iterations, clamp, workers must be positive and stop-tol nonnegative")
    if cfg["workers"] > 1 and cfg["causal"]:
        raise ConfigError("--workers > 1 needs --no-causal")
    if cfg["margin"] < 0:
        raise ConfigError("--margin must be nonnegative")
    kw = dict(mask=mask, spec=spec, max_iter=cfg["max_iter"], clamp=cfg["clamp"],
              stop_tol=cfg["stop_tol"], causal=cfg["causal"], safeguard=cfg["safeguard"],
              workers=cfg["workers"], backend=None if cfg["backend"] == "auto" else cfg["backend"])
    return kw


def validate(cfg: RunConfig) -> dict:
    """Check every setting and input path; returns prepared objects."""
    c = cfg.command
    prep = {}
    if c in ("pca fit", "spca fit"):
        prep["input"] = _input_path(cfg["input"], "input matrix")
        prep["em"] = EmConfig(cfg["k"], cfg["max_iter"], cfg["tol"], cfg.seed)
    elif c == "kpca fit":
        prep["input"] = _input_path(cfg["input"], "input matrix")
        prep["kernel"], prep["median"] = _kernel_spec(cfg)
        prep["em"] = EmConfig(cfg["q"], cfg["max_iter"], cfg["tol"], cfg.seed)
    elif c == "kpca project":
        prep["model"] = _input_path(cfg["model"], "--model")
        prep["train"] = _input_path(cfg["train"], "--train")
        prep["input"] = _input_path(cfg["input"], "--input")
    elif c == "kpca ichol":
        prep["input"] = _input_path(cfg["input"], "input matrix")
        prep["kernel"], prep["median"] = _kernel_spec(cfg)
        if not cfg["tol"] > 0:
            raise ConfigError("--tol must be positive")
    elif c == "motion estimate":
        prep["prev"] = _input_path(cfg["prev"], "previous frame")
        prep["cur"] = _input_path(cfg["cur"], "current frame")
        prep["estimate"] = _motion_setup(cfg)
        if cfg["truth"] is not None and cfg["truth_shift"] is not None:
            raise ConfigError("give either --truth or --truth-shift")
        if cfg["truth"] is not None:
            prep["truth"] = _input_path(cfg["truth"], "--truth")
        if cfg["truth_shift"] is not None and len(cfg["truth_shift"]) != 2:
            raise ConfigError("--truth-shift takes dx,dy")
    elif c == "motion imc":
        folder = _input_path(cfg["frames"], "frame directory")
        if not folder.is_dir():
            raise ConfigError(f"{folder} is not a directory")
        prep["frames"] = sorted(p for p in folder.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)
        if len(prep["frames"]) < 2:
            raise ConfigError(f"{folder}: need at least two frames")
        if cfg["fields"]:
            prep["fields"] = _field_paths(cfg["fields"])
            if len(prep["fields"]) != len(prep["frames"]) - 1:
                raise ConfigError(f"{len(prep['frames'])} frames need {len(prep['frames']) - 1} "
                                  f"field files, got {len(prep['fields'])}")
        prep["estimate"] = _motion_setup(cfg)
    elif c == "synth make":
        if cfg["kind"] == "matrix":
            k = cfg["k"]
            ev = cfg["eigenvalues"] or [float(k - i) for i in range(k)]
            prep["spec"] = SyntheticSpec(cfg["p"], cfg["n"], k, tuple(ev), cfg["noise"], cfg.seed)
            if not 0.0 <= cfg["missing"] < 1.0:
                raise ConfigError("--missing must lie in [0, 1)")
        else:
            if len(cfg["shift"]) != 2:
                raise ConfigError("--shift takes dx,dy")
            if cfg["n_frames"] < 2 or cfg["height"] < 2 or cfg["width"] < 2:
                raise ConfigError("need at least two frames of at least 2x2 pixels")
            if cfg["method"] == "crop" and any(v != round(v) for v in cfg["shift"]):
                raise ConfigError("--method crop needs integer shifts")
    return prep


def _field_paths(value):
    parts = [s for s in str(value).split(",") if s.strip()]
    if len(parts) == 1 and Path(parts[0]).is_dir():
        return sorted(p for p in Path(parts[0]).iterdir() if p.suffix.lower() == ".csv")
    return [_input_path(p, "field file") for p in parts]


# ---------------------------------------------------------------- artifacts

def _dump_json(obj):
    return (json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n").encode()


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def _table(columns, rows, fmt):
    """Tabular artifact as CSV (header row) or JSON {columns, rows}."""
    if fmt == "json":
        clean = [[None if isinstance(v, float) and not np.isfinite(v) else _plain(v) for v in r]
                 for r in rows]
        return _dump_json({"columns": list(columns), "rows": clean})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue().encode()


def _plain(v):
    if isinstance(v, np.generic):
        return v.item()
    return v


def _gnuplot(data_name, xlabel, ylabel, columns, logy=False):
    lines = [
        "# plot with: gnuplot -p " + Path(data_name).with_suffix(".gp").name,
        "set datafile separator ','",
        "set key autotitle columnhead",
        f"set xlabel '{xlabel}'",
        f"set ylabel '{ylabel}'",
    ]
    if logy:
        lines.append("set logscale y")
    plots = [f"'{data_name}' using 1:{c} with linespoints" for c in columns]
    lines.append("plot " + ", \\\n     ".join(plots))
    return ("\n".join(lines) + "\n").encode()


@dataclass
class Result:
    artifacts: dict = field(default_factory=dict)
    inputs: list = field(default_factory=list)
    partial: bool = False
    message: str = ""

    def add_table(self, stem, columns, rows, fmt, plot=None):
        name = f"{stem}.{fmt}"
        self.artifacts[name] = _table(columns, rows, fmt)
        if plot is not None and fmt == "csv":
            self.artifacts[f"{stem}.gp"] = _gnuplot(name, *plot)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ----------------------------------------------------------------- handlers

def _pca_fit(cfg, prep, res):
    m = read_matrix(prep["input"])
    res.inputs.append(prep["input"])
    algo = cfg["algo"]
    if algo == "cov":
        model = pca_covariance(m, cfg["k"])
    elif algo == "svd":
        model = pca_svd(m, cfg["k"])
    else:
        try:
            model = pca_em(m, prep["em"])
        except ConvergenceError as exc:
            model, res.partial, res.message = exc.partial, True, str(exc)
    res.artifacts["model.json"] = _dump_json(model.to_dict())
    rows = [(i + 1, float(v)) for i, v in enumerate(model.eigenvalues)]
    res.add_table("eigenspectrum", ("component", "eigenvalue"), rows, cfg.fmt,
                  plot=("component", "eigenvalue", [2], True))


def _spca_fit(cfg, prep, res):
    m = read_matrix(prep["input"])
    res.inputs.append(prep["input"])
    try:
        model = spca_em(m, prep["em"])
    except ConvergenceError as exc:
        if exc.partial is None:
            raise
        model, res.partial, res.message = exc.partial, True, str(exc)
    res.artifacts["model.json"] = _dump_json(model.to_dict())
    rows = [(i, float(v)) for i, v in enumerate(model.log_likelihood_trace)]
    res.add_table("likelihood_trace", ("iteration", "log_likelihood"), rows, cfg.fmt,
                  plot=("iteration", "log-likelihood", [2]))


def _resolved_kernel(prep, m):
    spec = prep["kernel"]
    if prep["median"]:
        spec = KernelSpec(spec.kind, spec.degree, spec.offset, median_gamma(m))
    return spec


def _kpca_fit(cfg, prep, res):
    m = read_matrix(prep["input"])
    res.inputs.append(prep["input"])
    spec = _resolved_kernel(prep, m)
    model = kpca_fit(m, spec, cfg["q"], prep["em"], centered=cfg["centered"], raise_on_failure=False)
    if not model.converged:
        res.partial = True
        res.message = f"kpca: no convergence in {prep['em'].max_iterations} iterations"
    res.artifacts["model.json"] = _dump_json(model.to_dict())


def _kpca_project(cfg, prep, res):
    try:
        d = json.loads(Path(prep["model"]).read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"{prep['model']}: unreadable model ({exc})") from None
    train = read_matrix(prep["train"])
    y = read_matrix(prep["input"])
    res.inputs += [prep["model"], prep["train"], prep["input"]]
    if y.has_missing:
        raise DataError("projection input has missing entries")
    try:
        model = KernelModel.from_dict(d, train)
    except KeyError as exc:
        raise DataError(f"{prep['model']}: missing field {exc}") from None
    scores = kpca_project(model, np.asarray(y.values))
    cols = ("sample",) + tuple(f"score_{i + 1}" for i in range(scores.shape[0]))
    rows = [(j,) + tuple(float(v) for v in scores[:, j]) for j in range(scores.shape[1])]
    res.add_table("scores", cols, rows, cfg.fmt)


def _kpca_ichol(cfg, prep, res):
    m = read_matrix(prep["input"])
    res.inputs.append(prep["input"])
    spec = _resolved_kernel(prep, m)
    k = kernel_matrix(m, spec)
    fac = incomplete_cholesky(k, cfg["tol"])
    summary = fac.summary()
    norm = float(np.linalg.norm(k))
    summary.update(
        n=int(k.shape[0]),
        tol=float(cfg["tol"]),
        kernel=spec.to_dict(),
        relative_error=float(np.linalg.norm(k - fac.reconstruct()) / norm) if norm > 0 else 0.0,
    )
    res.artifacts["ichol.json"] = _dump_json(summary)
    hist = summary["residual_history"]
    piv = [-1] + summary["pivot_order"]
    rows = [(i, piv[i], hist[i]) for i in range(len(hist))]
    res.add_table("residual_trace", ("rank", "pivot", "residual_trace"), rows, cfg.fmt,
                  plot=("rank", "residual trace", [3], True))


def _status_counts(fld):
    names = {0: "iteration_cap", 1: "converged", 2: "degenerate", 3: "singular", 4: "reverted"}
    vals, counts = np.unique(fld.status, return_counts=True)
    return {names.get(int(v), str(int(v))): int(c) for v, c in zip(vals, counts)}


def _imc_value(terms):
    raw = sum(t[0] for t in terms)
    comp = sum(t[1] for t in terms)
    energy = sum(t[2] for t in terms)
    db = imc_pair_db(raw, comp, energy)
    return (None if not np.isfinite(db) else db), (db == float("inf")), raw, comp


def _interior_slice(shape, margin):
    h, w = shape
    if 2 * margin >= min(h, w):
        raise ConfigError(f"margin {margin} leaves no interior in a {h}x{w} frame")
    return slice(margin, h - margin), slice(margin, w - margin)


def _motion_estimate(cfg, prep, res):
    prev, cur = read_frame(prep["prev"]), read_frame(prep["cur"])
    res.inputs += [prep["prev"], prep["cur"]]
    fld = estimate_field(prev, cur, **prep["estimate"])
    sl = _interior_slice(cur.shape, cfg["margin"])
    db, perfect, raw, comp = _imc_value(imc_terms([prev, cur], [fld], cfg["margin"]))
    summary = {
        "imc_db": db,
        "perfect_registration": perfect,
        "uncompensated_ssd": raw,
        "compensated_ssd": comp,
        "margin": int(cfg["margin"]),
        "shape": list(cur.shape),
        "mean_iterations": float(np.mean(fld.iterations[sl])),
        "status_counts": _status_counts(fld),
        "settings": {k: v for k, v in fld.meta.items() if k != "backend"},
    }
    truth = None
    if "truth" in prep:
        res.inputs.append(prep["truth"])
        truth = read_field_csv(prep["truth"], shape=cur.shape)
    elif cfg["truth_shift"] is not None:
        truth = DisplacementField.constant(*cur.shape, cfg["truth_shift"])
    if truth is not None:
        err = fld.vectors[sl] - truth.vectors[sl]
        norms = np.sqrt(np.sum(err * err, axis=2))
        med = np.median(fld.vectors[sl].reshape(-1, 2), axis=0)
        tmed = np.median(truth.vectors[sl].reshape(-1, 2), axis=0)
        summary["mean_abs_error"] = float(np.mean(norms))
        summary["median_error"] = float(np.median(norms))
        summary["median_vector"] = [float(v) for v in med]
        summary["median_vector_error"] = float(np.sqrt(np.sum((med - tmed) ** 2)))
    if cfg.fmt == "csv":
        buf = io.StringIO()
        write_field_csv(buf, fld)
        res.artifacts["field.csv"] = buf.getvalue().encode()
    else:
        h, w = fld.shape
        conv = fld.converged
        rows = [(x, y, float(fld.vectors[y, x, 0]), float(fld.vectors[y, x, 1]),
                 int(fld.iterations[y, x]), int(conv[y, x])) for y in range(h) for x in range(w)]
        res.add_table("field", FIELD_COLUMNS, rows, "json")
    res.artifacts["summary.json"] = _dump_json(summary)


def _motion_imc(cfg, prep, res):
    frames = [read_frame(p) for p in prep["frames"]]
    res.inputs += prep["frames"]
    if any(f.shape != frames[0].shape for f in frames):
        raise DataError("frames differ in shape")
    if "fields" in prep:
        fields = [read_field_csv(p, shape=frames[0].shape) for p in prep["fields"]]
        res.inputs += prep["fields"]
        source = "files"
    else:
        fields = [estimate_field(a, b, **prep["estimate"]) for a, b in zip(frames, frames[1:])]
        source = "estimated"
    _interior_slice(frames[0].shape, cfg["margin"])
    terms = imc_terms(frames, fields, cfg["margin"])
    rows = [(k + 1, raw, comp, imc_pair_db(raw, comp, energy))
            for k, (raw, comp, energy) in enumerate(terms)]
    res.add_table("imc", ("pair", "uncompensated_ssd", "compensated_ssd", "imc_db"), rows, cfg.fmt,
                  plot=("frame pair", "IMC (dB)", [4]))
    db, perfect, raw, comp = _imc_value(terms)
    summary = {
        "imc_db": db,
        "perfect_registration": perfect,
        "uncompensated_ssd": raw,
        "compensated_ssd": comp,
        "pairs": len(terms),
        "margin": int(cfg["margin"]),
        "fields": source,
    }
    if source == "estimated":
        summary["settings"] = {k: v for k, v in fields[0].meta.items() if k != "backend"}
    res.artifacts["summary.json"] = _dump_json(summary)


def _synth_make(cfg, prep, res):
    if cfg["kind"] == "matrix":
        spec = prep["spec"]
        m, basis = generate_synthetic(spec)
        if cfg["missing"] > 0:
            m = mask_random(m, cfg["missing"], spec.seed + 1)
        if cfg["matrix_format"] == "emss":
            res.artifacts["data.emss"] = _via_file(write_emss, m)
        else:
            res.artifacts["data.csv"] = _matrix_csv(m)
        cols = tuple(f"basis_{i + 1}" for i in range(basis.shape[1]))
        res.add_table("truth_basis", cols, [tuple(float(v) for v in r) for r in basis], cfg.fmt)
        res.artifacts["truth.json"] = _dump_json({
            "kind": "matrix", "p": spec.p, "n": spec.n, "k": spec.true_rank,
            "eigenvalues": list(spec.eigenvalues), "noise_sigma": spec.noise_sigma,
            "missing_fraction": float(cfg["missing"]), "seed": spec.seed,
        })
        return
    shift = tuple(cfg["shift"])
    frames, truth = shifted_sequence(shift, cfg["n_frames"], cfg["height"], cfg["width"], cfg.seed,
                                     cfg["snr"], cfg["method"], cfg["smoothness"])
    for i, f in enumerate(frames):
        name = f"frame_{i:03d}.{cfg['frame_format']}"
        writer = write_frame_emss if cfg["frame_format"] == "emss" else write_pgm
        res.artifacts[name] = _via_file(writer, f)
    buf = io.StringIO()
    write_field_csv(buf, truth)
    res.artifacts["truth_field.csv"] = buf.getvalue().encode()
    res.artifacts["truth.json"] = _dump_json({
        "kind": "sequence", "shift": list(shift), "frames": len(frames),
        "height": cfg["height"], "width": cfg["width"], "snr_db": cfg["snr"],
        "method": cfg["method"], "smoothness": cfg["smoothness"], "seed": cfg.seed,
    })


def _via_file(writer, obj):
    # the binary writers take paths; artifacts are kept in memory until the end
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "blob"
        writer(path, obj)
        return path.read_bytes()


def _matrix_csv(m: DataMatrix):
    values, mask = np.asarray(m.values), m.missing_mask
    lines = []
    for i in range(values.shape[0]):
        lines.append(",".join("" if mask is not None and mask[i, j] else "%.17g" % values[i, j]
                              for j in range(values.shape[1])))
    return ("\n".join(lines) + "\n").encode()


HANDLERS = {
    "pca fit": _pca_fit,
    "spca fit": _spca_fit,
    "kpca fit": _kpca_fit,
    "kpca project": _kpca_project,
    "kpca ichol": _kpca_ichol,
    "motion estimate": _motion_estimate,
    "motion imc": _motion_imc,
    "synth make": _synth_make,
}


# --------------------------------------------------------------------- run

def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def write_outputs(cfg: RunConfig, res: Result, exit_code):
    cfg.out.mkdir(parents=True, exist_ok=True)
    listed = []
    for name in sorted(res.artifacts):
        data = res.artifacts[name]
        (cfg.out / name).write_bytes(data)
        listed.append({"name": name, "bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()})
    manifest = {
        "tool": "emss",
        "version": __version__,
        "command": cfg.command,
        "config": {k: _jsonable(v) for k, v in sorted(cfg.params.items())},
        "config_sources": dict(sorted(cfg.sources.items())),
        "seed": cfg.seed,
        "backend": BACKEND,
        "inputs": [{"path": str(p), "sha256": _sha256(p)} for p in res.inputs],
        "artifacts": listed,
        "status": "partial" if res.partial else "complete",
        "exit_code": exit_code,
        "message": res.message,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
    }
    (cfg.out / "manifest.json").write_bytes(_dump_json(manifest))


def run(cfg: RunConfig) -> int:
    """Validate, compute, write.  Returns the process exit code."""
    try:
        prep = validate(cfg)
    except (ConfigError, ValueError) as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_CONFIG
    res = Result()
    try:
        HANDLERS[cfg.command](cfg, prep, res)
    except ConfigError as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_CONFIG
    except (DataError, SingularityError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except ConvergenceError as exc:
        log.error("convergence failure: %s", exc)
        return EXIT_CONVERGENCE
    code = EXIT_CONVERGENCE if res.partial else EXIT_OK
    write_outputs(cfg, res, code)
    if res.partial:
        log.error("convergence failure, partial artifacts written: %s", res.message)
    print(f"emss {cfg.command}: {len(res.artifacts)} artifacts in {cfg.out}"
          + (" (partial)" if res.partial else ""))
    return code


def main(argv=None) -> int:
    try:
        cfg = resolve(sys.argv[1:] if argv is None else argv)
    except ConfigError as exc:
        logging.basicConfig(format="emss: %(message)s")
        log.error("%s", exc)
        return EXIT_CONFIG
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(cfg.verbosity, 2)]
    logging.basicConfig(level=level, format="emss: %(message)s")
    log.setLevel(level)
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
