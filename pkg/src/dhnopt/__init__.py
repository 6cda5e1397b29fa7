"""Adaptive model- and discretization-switching optimization of district
heating networks.

The package solves the stationary hot-water network operation problem by
repeatedly solving a nonlinear program while per pipe (i) switching between
three flow models of decreasing fidelity and (ii) refining or coarsening the
energy discretization grid, driven by exact and estimated error measures,
until the pipe-averaged error meets a prescribed tolerance.
"""

from ._kernels import IMPL as kernel_impl

__version__ = "0.1.0"

__all__ = ["kernel_impl", "__version__"]
