"""Numerical laboratory for the Derrida-Retaux max-type recursive model."""

from .lattice import (
    LatticeError,
    LatticePmf,
    ModelSpec,
    OffspringLaw,
    convolve,
    dr_step,
    gf_deriv,
    gf_eval,
    make_initial,
    mean,
    mean_upper,
    tail,
    truncate,
)

__version__ = "0.1.0"
