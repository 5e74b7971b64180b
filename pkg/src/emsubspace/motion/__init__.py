"""Pel-recursive motion estimation and its quality metrics."""
from .estimation import (
    MaskSpec,
    SolverSpec,
    bilinear_sample,
    build_system,
    dfd,
    estimate_field,
    pc_factor,
    solve_update,
)
from .frames import (
    DisplacementField,
    Frame,
    SmoothPattern,
    add_noise,
    read_field_csv,
    read_frame,
    read_pgm,
    shifted_sequence,
    warp_bilinear,
    write_field_csv,
    write_pgm,
)
from .metrics import Membership, ScoreClass, classify_scores, imc, imc_terms, mahalanobis

__all__ = [
    "DisplacementField",
    "Frame",
    "MaskSpec",
    "Membership",
    "ScoreClass",
    "SmoothPattern",
    "SolverSpec",
    "add_noise",
    "bilinear_sample",
    "build_system",
    "classify_scores",
    "dfd",
    "estimate_field",
    "imc",
    "imc_terms",
    "mahalanobis",
    "pc_factor",
    "read_field_csv",
    "read_frame",
    "read_pgm",
    "shifted_sequence",
    "solve_update",
    "warp_bilinear",
    "write_field_csv",
    "write_pgm",
]
