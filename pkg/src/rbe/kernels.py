"""Backend selection for the hot scan loops.

The compiled extension is used when it was built; otherwise (or when
``RBE_PURE_PYTHON=1`` is set) the numpy fallback is used. Both expose the
same functions and produce identical results. The float baseline scan is
always numpy's BLAS-backed dot product.
"""

from __future__ import annotations

import os
from types import ModuleType

from rbe import _fallback


def _load() -> tuple[ModuleType, str]:
    if os.environ.get("RBE_PURE_PYTHON", "") not in ("", "0"):
        return _fallback, "python"
    try:
        from rbe import _kernels
    except ImportError:
        return _fallback, "python"
    return _kernels, "compiled"


_backend, BACKEND = _load()

scan_scores = _backend.scan_scores
scan_select = _backend.scan_select
dot_rows = _backend.dot_rows
float_scan = _fallback.float_scan


def get_backend(name: str | None = None) -> ModuleType:
    """Return a kernel module by name (``"compiled"`` or ``"python"``)."""
    if name is None:
        return _backend
    if name == "python":
        return _fallback
    if name == "compiled":
        from rbe import _kernels

        return _kernels
    raise ValueError(f"unknown backend {name!r}")


def compiled_available() -> bool:
    try:
        from rbe import _kernels  # noqa: F401
    except ImportError:
        return False
    return True
