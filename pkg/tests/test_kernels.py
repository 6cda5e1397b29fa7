"""Compiled kernels against the pure-Python fallback."""

import numpy as np
import pytest

from dhnopt._kernels import IMPL, _pure

try:
    from dhnopt._kernels import _core
except ImportError:
    _core = None

needs_core = pytest.mark.skipif(_core is None,
                                reason="compiled kernels unavailable")

CASES = [
    # (alpha, beta, gamma, zeta, e_in, dx, n)
    (-1.107e-15, -4.122e-6, 136.45, 1.0, 0.35e9, 500.0, 2),
    (-2.5e-15, -8.0e-6, 57.2, 0.4, 0.42e9, 125.0, 16),
    (0.0, 0.0, 0.0, 1.5, 0.3e9, 250.0, 4),  # conserved energy
]


@needs_core
@pytest.mark.parametrize("case", CASES)
def test_midpoint_propagate_matches_fallback(case):
    got = _core.midpoint_propagate(*case)
    want = _pure.midpoint_propagate(*case)
    assert np.array_equal(got, want)


@needs_core
def test_rk4_matches_fallback():
    idx = np.array([0, 500, 1000], dtype=np.int64)
    args = (-1.107e-15, -4.122e-6, 136.45, 1.0, 0.35e9, 1000.0, 1000, idx)
    assert np.array_equal(_core.rk4_integrate(*args),
                          _pure.rk4_integrate(*args))


def test_no_real_root_raises():
    with pytest.raises(ArithmeticError):
        _pure.midpoint_propagate(-1.0, 0.0, -2.0, 1.0, 0.0, 1.0, 1)
    if _core is not None:
        with pytest.raises(ArithmeticError):
            _core.midpoint_propagate(-1.0, 0.0, -2.0, 1.0, 0.0, 1.0, 1)


def test_selected_implementation_reported():
    assert IMPL in ("compiled", "pure")


def test_rk4_partial_recording():
    idx = np.array([250, 750], dtype=np.int64)
    out = _pure.rk4_integrate(-1e-15, -4e-6, 100.0, 1.0, 0.35e9, 1000.0,
                              1000, idx)
    assert out.shape == (2,)
    assert np.all(np.isfinite(out))
