"""Hot loops with a compiled backend and a NumPy fallback.

The compiled extension is used when importable unless the environment
variable ``MICROGRID_PURE_PYTHON`` is set to a non-empty value.  The
worker count for threaded loops comes from ``MICROGRID_WORKERS``.
"""
import os

from . import _bellman_py

try:
    if os.environ.get("MICROGRID_PURE_PYTHON"):
        raise ImportError("pure Python backend requested")
    from . import _bellman as _compiled
except ImportError:
    _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"
bellman_min = (_compiled or _bellman_py).bellman_min


def get_backend(name=None):
    """Kernel module by name (``"cython"`` or ``"numpy"``); default is the active one."""
    name = name or BACKEND
    if name == "numpy":
        return _bellman_py
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("MICROGRID_WORKERS", "1")))
    except ValueError:
        return 1
