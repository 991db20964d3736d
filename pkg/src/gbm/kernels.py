"""Backend selection for the forward/backward recursions.

The compiled extension ``gbm._fb_ext`` is used when importable; otherwise the
numpy fallback ``gbm._fb_py`` is used. Setting ``GBM_PURE_PYTHON=1`` forces
the fallback.
"""
import importlib
import os

from . import _fb_py

__all__ = ["BACKEND", "available_backends", "get_backend", "forward",
           "backward", "forward_loglik"]


def _load_compiled():
    try:
        return importlib.import_module("gbm._fb_ext")
    except ImportError:
        return None


_compiled = _load_compiled()


def available_backends():
    names = ["python"]
    if _compiled is not None:
        names.insert(0, "cython")
    return names


def get_backend(name=None):
    """Return the kernel module for ``name`` ('cython' or 'python').

    ``None`` gives the default selection.
    """
    if name is None:
        if _compiled is not None and os.environ.get("GBM_PURE_PYTHON", "") in ("", "0"):
            return _compiled
        return _fb_py
    if name == "python":
        return _fb_py
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels (gbm._fb_ext) are not built")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


_impl = get_backend()
BACKEND = "cython" if _impl is _compiled else "python"

forward = _impl.forward
backward = _impl.backward
forward_loglik = _impl.forward_loglik
