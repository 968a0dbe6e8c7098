"""Kernel backend selection: compiled Cython core with NumPy fallback.

The two twins expose identical signatures and the same params-vector
layout; SWARMPUSH_BACKEND={compiled,python} forces a choice, otherwise the
compiled module is used when importable.
"""

from __future__ import annotations

import os

from ._kernels_py import (  # noqa: F401  (layout constants re-exported)
    N_PARAMS, P_BOUND, P_CLAMP_HI, P_CLAMP_LO, P_CUTOFF, P_DT, P_FRICTION,
    P_INV_DX, P_LAM, P_MASS, P_MU, P_N_NODES, P_RADIUS, P_SOFTNESS, P_VOL,
    P_YIELD_C,
)
from . import _kernels_py

_forced = os.environ.get("SWARMPUSH_BACKEND", "").strip().lower()

if _forced == "python":
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        if _forced == "compiled":
            raise
        _impl = _kernels_py

BACKEND_NAME: str = _impl.BACKEND_NAME
COMPILED: bool = BACKEND_NAME == "compiled"

substep_forward = _impl.substep_forward
substep_backward = _impl.substep_backward


def get_backend(name: str | None = None):
    """Return a kernel module by name ('compiled'/'python'), default active."""
    if name in (None, "", BACKEND_NAME):
        return _impl
    if name == "python":
        return _kernels_py
    if name == "compiled":
        from . import _kernels  # raises ImportError if not built
        return _kernels
    raise ValueError(f"unknown backend {name!r}")
