"""Kernel selection: compiled extension if importable, NumPy otherwise.

Set ``PEERFL_PURE_PYTHON=1`` to force the NumPy kernels.
"""

import importlib
import os

_NAMES = {"cython": "peerfl._lstm_ext", "python": "peerfl._lstm_py"}


def get_kernels(name):
    """Return the kernel module for ``name`` ("cython" or "python")."""
    return importlib.import_module(_NAMES[name])


def available():
    out = []
    for name in _NAMES:
        try:
            get_kernels(name)
        except ImportError:
            continue
        out.append(name)
    return out


if os.environ.get("PEERFL_PURE_PYTHON"):
    BACKEND = "python"
else:
    try:
        get_kernels("cython")
        BACKEND = "cython"
    except ImportError:
        BACKEND = "python"

kernels = get_kernels(BACKEND)
