"""Gaussian-preserving flows: measure-preserving rearrangements of N(0, I) that
lower the squared-L2 transport cost of an invertible base map."""

import jax

# Every numerical tolerance in the package assumes 64-bit floats.
jax.config.update("jax_enable_x64", True)

from gpot.divfree import UNet, VelocityField, init_unet, velocity  # noqa: E402
from gpot.flowode import OdeMap, IntegrationEscape, integrate  # noqa: E402
from gpot.gaussmap import GpFlow, gp_apply, gp_inverse  # noqa: E402

__all__ = [
    "UNet",
    "VelocityField",
    "init_unet",
    "velocity",
    "OdeMap",
    "IntegrationEscape",
    "integrate",
    "GpFlow",
    "gp_apply",
    "gp_inverse",
]

__version__ = "0.1.0"
