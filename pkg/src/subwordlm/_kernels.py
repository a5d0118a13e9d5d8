"""Select the lattice kernel backend at import time.

The compiled ``_lattice_ext`` is used when it imports; setting
``SUBWORDLM_PURE_PYTHON=1`` forces the pure-Python ``_lattice_py``.
"""
from __future__ import annotations

import os

if os.environ.get("SUBWORDLM_PURE_PYTHON", "") not in ("", "0"):
    from . import _lattice_py as _impl

    BACKEND = "python"
else:
    try:
        from . import _lattice_ext as _impl

        BACKEND = "cython"
    except ImportError:
        from . import _lattice_py as _impl

        BACKEND = "python"

expected_counts = _impl.expected_counts
viterbi_counts = _impl.viterbi_counts
viterbi_paths = _impl.viterbi_paths

__all__ = ["BACKEND", "expected_counts", "viterbi_counts", "viterbi_paths"]
