"""Kernel backend selection.

Imports the compiled extension when available and falls back to the pure
NumPy implementation otherwise.  Set ``MESHPOSE_PURE_PYTHON=1`` to force the
fallback (used by the parity tests and the benchmark).
"""

from __future__ import annotations

import os

from . import _raster_np

if os.environ.get("MESHPOSE_PURE_PYTHON", "") not in ("", "0"):
    _impl = _raster_np
    COMPILED = False
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
        COMPILED = True
    except ImportError:
        _impl = _raster_np
        COMPILED = False

rasterize = _impl.rasterize
render_score = _impl.render_score


def backend_name() -> str:
    return "compiled" if COMPILED else "numpy"
