"""Transmission-distribution co-simulation and aggregate DER tripping models."""

from numba import config as _numba_config

# TBB in this image is too old for numba; prefer OpenMP, then the builtin pool.
_numba_config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

__version__ = "0.1.0"
