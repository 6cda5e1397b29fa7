"""Kernel selection: compiled extension when available, pure Python otherwise.

Set ``DHNOPT_PURE_KERNELS=1`` to force the fallback (used by the benchmark
and by tests that cross-check both implementations).
"""

import os

if os.environ.get("DHNOPT_PURE_KERNELS") == "1":
    from ._pure import IMPL, midpoint_propagate, rk4_integrate
else:
    try:
        from ._core import IMPL, midpoint_propagate, rk4_integrate
    except ImportError:
        from ._pure import IMPL, midpoint_propagate, rk4_integrate

__all__ = ["IMPL", "midpoint_propagate", "rk4_integrate"]
