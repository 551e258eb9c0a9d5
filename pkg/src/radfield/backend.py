"""Kernel backend selection.

The compiled extension (``radfield._kernels``) and the pure-numpy module
(``radfield._np_kernels``) expose the same functions.  The extension wins
when importable; set ``RADFIELD_BACKEND=numpy`` or ``=compiled`` to force a
choice (forcing an unavailable compiled backend raises).
"""

from __future__ import annotations

import os
import warnings

from . import _np_kernels

_requested = os.environ.get("RADFIELD_BACKEND", "").strip().lower()

if _requested == "numpy":
    kernels = _np_kernels
else:
    try:
        from . import _kernels as _compiled

        if not hasattr(_compiled, "BACKEND_NAME"):
            raise ImportError("compiled kernel module is incomplete")
    except ImportError as exc:  # missing or broken extension
        _compiled = None
        if _requested == "compiled":
            raise ImportError(
                "RADFIELD_BACKEND=compiled but the extension is not available"
            ) from exc
        warnings.warn(
            "compiled kernels unavailable, falling back to numpy backend",
            RuntimeWarning,
            stacklevel=2,
        )
    kernels = _compiled if _compiled is not None else _np_kernels


def backend_name() -> str:
    return kernels.BACKEND_NAME


def get_backend(name: str):
    """Fetch a backend module by name ('numpy' or 'compiled'), for benchmarks."""
    if name == "numpy":
        return _np_kernels
    if name == "compiled":
        from . import _kernels as compiled

        if not hasattr(compiled, "BACKEND_NAME"):
            raise ImportError("compiled kernel module is incomplete")
        return compiled
    raise ValueError(f"unknown backend {name!r}")
