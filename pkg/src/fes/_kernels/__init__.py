"""Training kernels, compiled when available.

The Cython extension is imported if it was built; otherwise (or when
``FES_PURE_PYTHON`` is set) the numpy fallback is used. ``BACKEND`` names the
active implementation.
"""

import os

from . import _fallback

_impl = _fallback
BACKEND = "python"

if not os.environ.get("FES_PURE_PYTHON"):
    try:
        from . import _core as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        pass

sgd_epoch = _impl.sgd_epoch
mf_epoch = _impl.mf_epoch


def backend(name=None):
    """Kernel module by name (``"cython"`` or ``"python"``); the active one by default."""
    if name is None:
        return _impl
    if name == "python":
        return _fallback
    if name == "cython":
        from . import _core

        return _core
    raise ValueError(f"unknown kernel backend {name!r}")


def available():
    names = ["python"]
    try:
        from . import _core  # noqa: F401

        names.insert(0, "cython")
    except ImportError:
        pass
    return names
