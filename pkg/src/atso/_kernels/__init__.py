"""Kernel backend selection.

The compiled Cython core is used when available; the pure-numpy fallback is
selected when the extension is missing or when ``ATSO_PURE_PYTHON=1`` is set
in the environment. Both backends expose the same functions; per-backend
results are fully deterministic, and the two backends agree bit-for-bit on
integer kernels (floating-point kernels may drift in the last ulp).
"""

from __future__ import annotations

import os

from . import _py

if os.environ.get("ATSO_PURE_PYTHON", "") not in ("", "0"):
    _impl = _py
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _py

forward_linear = _impl.forward_linear
forward_mlp = _impl.forward_mlp
sgd_epoch_linear = _impl.sgd_epoch_linear
sgd_epoch_mlp = _impl.sgd_epoch_mlp
box_stats = _impl.box_stats
confusion_counts = _impl.confusion_counts
majority_vote = _impl.majority_vote


def backend() -> str:
    """Name of the active kernel backend: 'cython' or 'python'."""
    return _impl.BACKEND
