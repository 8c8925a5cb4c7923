"""Selects the rotated-IoU kernel backend at import time.

The compiled extension is preferred; the pure-Python module is the drop-in
fallback. Set DETFUSE_PURE_PYTHON=1 to force the fallback (used by the
parity tests and the kernel benchmark).
"""

from __future__ import annotations

import os

from . import _kernels_py


def load_backend(name: str):
    """Return the kernel module for 'compiled' or 'python' by name."""
    if name == "python":
        return _kernels_py
    if name == "compiled":
        from . import _kernels  # noqa: F401  (raises ImportError if not built)

        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")


if os.environ.get("DETFUSE_PURE_PYTHON"):
    kernels = _kernels_py
else:
    try:
        kernels = load_backend("compiled")
    except ImportError:
        kernels = _kernels_py

KERNEL_BACKEND: str = kernels.BACKEND
