"""Federated Gaussian-process estimation of treatment effects across data sources."""

import jax

# every traced computation in the package assumes float64
jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
