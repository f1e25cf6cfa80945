"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the pure-Python
reference is used. Set ``HETSCHED_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pycore

_compiled = None
if not os.environ.get("HETSCHED_PURE_PYTHON"):
    try:
        from . import _core as _compiled
    except ImportError:  # extension not built
        _compiled = None

backend = _compiled if _compiled is not None else _pycore
BACKEND = backend.BACKEND

sample_into = backend.sample_into
oracle_search = backend.oracle_search


def get_backend(name):
    """Return the kernel module called ``name`` ("python" or "cython")."""
    if name == "python":
        return _pycore
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled extension hetsched._core is not available")
        return _compiled
    raise ValueError("unknown backend %r" % name)


def available_backends():
    return ["python"] + (["cython"] if _compiled is not None else [])
