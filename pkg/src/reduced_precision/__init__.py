"""Reduced-precision emulation and a from-scratch CNN for MNIST experiments."""

from reduced_precision.quant import (
    Granularity,
    PrecisionConfig,
    Rounding,
    grid_neighbors,
    make_rng,
    quantize,
    stochastic_round,
    truncate,
)

__version__ = "0.1.0"
