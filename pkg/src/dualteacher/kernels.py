"""Kernel backend selection.

The compiled extension is used when it imported cleanly; set
``DUALTEACHER_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

from . import _reference

try:
    from . import _core
except ImportError:  # extension not built
    _core = None

_BACKENDS = {"python": _reference}
if _core is not None:
    _BACKENDS["compiled"] = _core

if _core is not None and os.environ.get("DUALTEACHER_PURE_PYTHON", "") in ("", "0"):
    BACKEND = "compiled"
else:
    BACKEND = "python"

_active = _BACKENDS[BACKEND]
encode_batch = _active.encode_batch
backward_batch = _active.backward_batch


def available():
    return sorted(_BACKENDS)


def get(name):
    """Return the kernel module for ``name`` ("compiled" or "python")."""
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} not available; have {available()}") from None
