"""Exact Euclidean distance transform with anisotropic spacing.

The per-line kernel comes from the compiled ``dtml._edt`` extension when it
is importable, otherwise from the numpy fallback. Set ``DTML_PURE_PYTHON=1``
to force the fallback.
"""
import os

import numpy as np

from . import _edt_fallback

if os.environ.get("DTML_PURE_PYTHON", "") not in ("", "0"):
    _compiled = None
else:
    try:
        from . import _edt as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"
_KERNELS = {"numpy": _edt_fallback.squared_edt_lines}
if _compiled is not None:
    _KERNELS["cython"] = _compiled.squared_edt_lines


def available_backends():
    return sorted(_KERNELS)


def squared_edt(features, spacing=(1.0, 1.0, 1.0), backend=None):
    """Squared distance from every voxel to the nearest ``True`` voxel of ``features``.

    Distances are between voxel centres in physical units. Voxels are +inf
    when ``features`` is empty.
    """
    kernel = _KERNELS[backend or BACKEND]
    features = np.asarray(features, dtype=bool)
    f = np.where(features, 0.0, np.inf)
    for axis in range(f.ndim):
        moved = np.moveaxis(f, axis, -1)
        lines = np.ascontiguousarray(moved, dtype=np.float64).reshape(-1, moved.shape[-1])
        kernel(lines, float(spacing[axis]) ** 2)
        f = np.moveaxis(lines.reshape(moved.shape), -1, axis)
    return np.ascontiguousarray(f)


def edt(features, spacing=(1.0, 1.0, 1.0), backend=None):
    return np.sqrt(squared_edt(features, spacing, backend))
