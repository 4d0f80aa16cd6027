"""Hot row-wise kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time. Set ``EMOE_NUMBA=0`` to force
the numpy path (also used automatically when numba cannot be imported).
"""
import os

from . import _numpy

_NAMES = (
    "softmax_rows",
    "softmax_rows_backward",
    "gelu",
    "gelu_backward",
    "layernorm",
    "layernorm_backward",
    "energy",
    "energy_backward",
    "top1",
    "count_routes",
)


def _select():
    if os.environ.get("EMOE_NUMBA", "1").strip().lower() in ("0", "false", "no", "off"):
        return _numpy, "numpy"
    try:
        from . import _numba
    except ImportError:
        return _numpy, "numpy"
    return _numba, "numba"


_impl, BACKEND = _select()

softmax_rows = _impl.softmax_rows
softmax_rows_backward = _impl.softmax_rows_backward
gelu = _impl.gelu
gelu_backward = _impl.gelu_backward
layernorm = _impl.layernorm
layernorm_backward = _impl.layernorm_backward
energy = _impl.energy
energy_backward = _impl.energy_backward
top1 = _impl.top1
count_routes = _impl.count_routes

__all__ = ["BACKEND", *_NAMES]
