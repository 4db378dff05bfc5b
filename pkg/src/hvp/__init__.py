"""Hierarchical variational policies for reward-guided sampling from diffusion models.

Submodules are imported on demand so that ``hvp.cli`` can configure BLAS
threading before numpy loads.
"""

__version__ = "0.1.0"
