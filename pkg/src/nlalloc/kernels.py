"""Backend selection for the protocol inner loop.

The compiled extension ``nlalloc._core`` is used when it imports; otherwise
the numpy implementation in ``nlalloc._kernels_py`` runs. Setting
``NLALLOC_PURE_PYTHON=1`` forces the fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
run_kernel = _kernels_py.run_kernel

if os.environ.get("NLALLOC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _core  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        run_kernel = _core.run_kernel
        BACKEND = "cython"

python_run_kernel = _kernels_py.run_kernel


def compiled_run_kernel():
    """The compiled kernel, or ``None`` when the extension is not built."""
    try:
        from . import _core  # type: ignore[attr-defined]
    except ImportError:
        return None
    return _core.run_kernel
