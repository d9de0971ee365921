"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import time. Set ``FEDSIM_DISABLE_NUMBA=1``
to force the numpy path; it is also used when numba is not importable.
Both backends agree to rounding error but are not bit-identical to each
other, so a run is only reproducible bit-for-bit under the same backend.
"""
from __future__ import annotations

import os
import warnings

from . import _numpy

_DISABLE = os.environ.get("FEDSIM_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

if _DISABLE:
    _impl = _numpy
    BACKEND = "numpy"
else:
    try:
        from . import _numba as _impl
        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is a hard dependency in practice
        warnings.warn("numba is not available; using the numpy kernels", RuntimeWarning)
        _impl = _numpy
        BACKEND = "numpy"

conv1d_forward = _impl.conv1d_forward
conv1d_backward = _impl.conv1d_backward
maxpool1d_forward = _impl.maxpool1d_forward
maxpool1d_backward = _impl.maxpool1d_backward
neuron_distances = _impl.neuron_distances
cost_matrix = _impl.cost_matrix
linear_sum_assignment = _impl.linear_sum_assignment

__all__ = [
    "BACKEND",
    "conv1d_forward",
    "conv1d_backward",
    "maxpool1d_forward",
    "maxpool1d_backward",
    "neuron_distances",
    "cost_matrix",
    "linear_sum_assignment",
]
