"""Posterior average effects for latent-variable models, with worst-case-bias
robustness analysis over phi-divergence neighborhoods."""

from .divergences import DivergenceSpec
from .stats_core import KernelSpec, RngStream

__version__ = "0.1.0"

__all__ = ["DivergenceSpec", "KernelSpec", "RngStream", "__version__"]
