"""Kernel backend selection.

The compiled extension is preferred; the numpy fallback is used when it
is missing or when ``ZSSMNET_BACKEND=python`` is set before import.
"""
import logging
import os

from . import _kernels_py

log = logging.getLogger(__name__)

_available = {"python": _kernels_py}
try:
    from . import _kernels as _compiled
except ImportError:  # pragma: no cover - depends on build
    _compiled = None
else:
    _available["compiled"] = _compiled


def available():
    return sorted(_available)


def get(name=None):
    """Return a kernel module by name (``compiled`` or ``python``)."""
    if name is None:
        return kernels
    try:
        return _available[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} not available; have {available()}") from None


def _select():
    wanted = os.environ.get("ZSSMNET_BACKEND", "").strip().lower()
    if wanted:
        return get(wanted)
    if _compiled is None:
        log.warning("compiled kernels not built; using the numpy fallback")
        return _kernels_py
    return _compiled


kernels = _select()


def use(name):
    """Switch the process-wide backend."""
    global kernels
    kernels = get(name)
    return kernels
