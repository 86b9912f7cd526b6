"""Backend selection for the hot kernels.

The compiled extension ``clab._kernels`` is used when it is importable;
otherwise, or when ``CLAB_PURE_PYTHON=1`` is set, the numpy reference
implementation in ``clab._kernels_py`` is used.  ``BACKEND`` names the
active choice.
"""
from __future__ import annotations

import logging
import os

log = logging.getLogger(__name__)


def _load():
    if os.environ.get("CLAB_PURE_PYTHON", "") not in ("", "0"):
        from . import _kernels_py as mod

        return mod
    try:
        from . import _kernels as mod  # type: ignore[attr-defined]
    except ImportError:  # extension not built
        log.info("compiled kernels unavailable, using the numpy fallback")
        from . import _kernels_py as mod
    return mod


_mod = _load()
BACKEND: str = _mod.BACKEND
multilinear = _mod.multilinear
walk_chunk = _mod.walk_chunk


def backends() -> dict:
    """All importable backends keyed by name (for benchmarks and parity tests)."""
    from . import _kernels_py

    out = {"python": _kernels_py}
    try:
        from . import _kernels  # type: ignore[attr-defined]

        out["cython"] = _kernels
    except ImportError:
        pass
    return out
