"""Differentiable mesh splatting on the CPU.

Softened multi-layer mesh rendering, a DMTet-to-mesh two-stage optimizer
with isotropic remeshing, and a synthetic evaluation harness.
"""
import numba as _numba

# the tbb layer is usually missing; the workqueue layer needs nothing extra
if _numba.config.THREADING_LAYER == "default":
    _numba.config.THREADING_LAYER = "workqueue"

__version__ = "0.1.0"
