"""Density estimation with exact-Lipschitz residual flows.

Submodules are imported lazily on purpose: the CLI needs to pin BLAS
thread counts via environment variables before numpy is loaded.
"""

__version__ = "0.1.0"
