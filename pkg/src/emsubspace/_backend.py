"""Pick the compiled kernels when available, else the pure-Python ones."""
import os

from . import _pykernels

if os.environ.get("EMSUBSPACE_PURE", "") not in ("", "0"):
    kernels = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as kernels
        BACKEND = "cython"
    except ImportError:
        kernels = _pykernels
        BACKEND = "python"

NOT_CONVERGED = _pykernels.NOT_CONVERGED
CONVERGED = _pykernels.CONVERGED
DEGENERATE = _pykernels.DEGENERATE
SINGULAR = _pykernels.SINGULAR
REVERTED = _pykernels.REVERTED
