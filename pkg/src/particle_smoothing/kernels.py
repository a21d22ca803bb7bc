"""Backend selection for the numeric hot loops.

The compiled extension is used when it was built; otherwise (or when the
environment variable ``PARTICLE_SMOOTHING_PURE`` is set to a non-empty
value other than ``0``) the numpy implementations are used.  Both backends
expose the same functions and are checked against each other in the tests.
"""
import os

from . import _pykernels

_force_pure = os.environ.get("PARTICLE_SMOOTHING_PURE", "") not in ("", "0")

try:
    if _force_pure:
        raise ImportError("pure backend requested")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"

python_backend = _pykernels
compiled_backend = _impl if BACKEND == "cython" else None

logsumexp_rows = _impl.logsumexp_rows
oohmm_forward = _impl.oohmm_forward
oohmm_backward = _impl.oohmm_backward
oohmm_score_paths = _impl.oohmm_score_paths
gru_forward = _impl.gru_forward
gru_expand = _impl.gru_expand
gru_backward = _impl.gru_backward
cumulative_inversion = _impl.cumulative_inversion

__all__ = [
    "BACKEND",
    "logsumexp_rows",
    "oohmm_forward",
    "oohmm_backward",
    "oohmm_score_paths",
    "gru_forward",
    "gru_expand",
    "gru_backward",
    "cumulative_inversion",
]
