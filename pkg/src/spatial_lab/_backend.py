"""Kernel backend selection.

The compiled ``_core`` extension is used when it imports; otherwise the numpy
fallback.  Set ``SPATIAL_LAB_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os
from types import ModuleType

from . import _kernels_py


def _load() -> tuple[ModuleType, str]:
    if os.environ.get("SPATIAL_LAB_PURE_PYTHON", "") not in ("", "0"):
        return _kernels_py, "python"
    try:
        from . import _core  # type: ignore[attr-defined]
    except ImportError:
        return _kernels_py, "python"
    return _core, "compiled"


kernels, BACKEND = _load()


def available() -> dict[str, ModuleType]:
    """Every backend importable in this environment, keyed by name."""
    out = {"python": _kernels_py}
    try:
        from . import _core  # type: ignore[attr-defined]

        out["compiled"] = _core
    except ImportError:
        pass
    return out
