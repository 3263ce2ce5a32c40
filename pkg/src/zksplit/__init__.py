"""Verifiable client-side backdoor defense for sequential U-shaped split learning."""

from . import _kernels

__version__ = "0.1.0"

kernel_backend = _kernels.BACKEND
