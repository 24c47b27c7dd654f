"""Kernel backend selection.

The hot inner loops (conv window packing, patch compositing) exist twice:
a numba-jitted version and a pure-numpy fallback.  ``CAMOPATCH_KERNELS``
picks one at import time: "numba" (default when numba imports) or "numpy".
``benchmarks/kernel_bench.py`` compares the two.
"""

import logging
import os

log = logging.getLogger(__name__)

_FLAG = os.environ.get("CAMOPATCH_KERNELS", "").strip().lower()

if _FLAG not in ("", "numba", "numpy"):
    raise ValueError(f"CAMOPATCH_KERNELS must be 'numba' or 'numpy', got {_FLAG!r}")

if _FLAG == "numpy":
    from . import np_impl as _impl
else:
    try:
        from . import nb_impl as _impl
    except ImportError:
        if _FLAG == "numba":
            raise
        log.warning("numba unavailable, falling back to numpy kernels")
        from . import np_impl as _impl

BACKEND = _impl.BACKEND
im2col = _impl.im2col
col2im = _impl.col2im
composite_forward = _impl.composite_forward
composite_backward = _impl.composite_backward


def get_backend(name):
    """Return the kernel module for ``name`` ("numba" or "numpy"), bypassing the flag."""
    if name == "numpy":
        from . import np_impl
        return np_impl
    if name == "numba":
        from . import nb_impl
        return nb_impl
    raise ValueError(f"unknown kernel backend {name!r}")
