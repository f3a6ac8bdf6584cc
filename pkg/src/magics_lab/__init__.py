"""Stackelberg-minimax adversarial actor-critic learning and reach-avoid safety synthesis."""

import jax

# Analytic-game and derivative checks need double precision; RL networks opt into float32 explicitly.
jax.config.update("jax_enable_x64", True)

from magics_lab.diffcore import (  # noqa: E402
    ParameterVector,
    dense_hessian,
    gradient,
    hessian_vector_product,
    mixed_partial_block,
    solve_linear,
)
from magics_lab.games import (  # noqa: E402
    DseCertificate,
    QuadraticZeroSumGame,
    TrilevelQuadraticGame,
    critical_tau,
    stationary_point,
    verify_dse,
)

__version__ = "0.1.0"

__all__ = [
    "ParameterVector",
    "gradient",
    "hessian_vector_product",
    "mixed_partial_block",
    "dense_hessian",
    "solve_linear",
    "QuadraticZeroSumGame",
    "TrilevelQuadraticGame",
    "DseCertificate",
    "stationary_point",
    "verify_dse",
    "critical_tau",
]
