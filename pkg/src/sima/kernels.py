"""Backend selection for the elementwise attention kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback. ``SIMA_PURE_PYTHON=1`` forces the fallback at import time.
"""
import contextlib
import logging
import os

from . import _kernels_py

log = logging.getLogger(__name__)

_compiled = None
if os.environ.get("SIMA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        log.debug("compiled kernels unavailable, using numpy fallback")
        _compiled = None

_BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    _BACKENDS["cython"] = _compiled

_active = _compiled if _compiled is not None else _kernels_py


def available_backends():
    return list(_BACKENDS)


def backend_name():
    return _active.NAME


def set_backend(name):
    global _active
    try:
        _active = _BACKENDS[name]
    except KeyError:
        raise ValueError(
            f"unknown or unavailable kernel backend {name!r}; "
            f"available: {', '.join(_BACKENDS)}"
        ) from None


@contextlib.contextmanager
def use_backend(name):
    previous = _active.NAME
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def softmax_rows(x):
    return _active.softmax_rows(x)


def l1_normalize_columns(x, eps):
    return _active.l1_normalize_columns(x, eps)


def elu_feature(x):
    return _active.elu_feature(x)
