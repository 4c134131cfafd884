"""Select the compiled kernels when available, else the pure-Python ones.

Set ``PERCOLAB_PURE_PYTHON=1`` to force the fallback.
"""
import logging
import os

from . import _pycore

log = logging.getLogger(__name__)

if os.environ.get("PERCOLAB_PURE_PYTHON", "") not in ("", "0"):
    core = _pycore
else:
    try:
        from . import _core as core
    except ImportError:  # extension not built
        log.info("compiled kernels unavailable; using the pure-Python fallback")
        core = _pycore

BACKEND = core.NAME
label_components = core.label_components
kmax_trajectory = core.kmax_trajectory
pair_distance_hist = core.pair_distance_hist
two_ghost_counts = core.two_ghost_counts
