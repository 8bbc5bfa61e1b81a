"""Harmonic lattice dynamics as a Schrodinger equation.

Force-constant stencils are factorized as sums of squares of one-sided
matrix polynomials, assembled into a factor operator ``Q`` with
``Q^T Q = D``, and the resulting sparse Hamiltonian is evolved by Krylov
exponentiation or Trotter splitting.  A velocity-Verlet integrator serves
as the classical reference.
"""

__version__ = "0.1.0"

from .lattice import (InstabilityError, MassModel, SiteSet, Stencil, StencilError,
                      assemble_D, build_site_set, debye_frequency, dispersion_scan,
                      eval_dynamical_matrix, load_stencil, pad_site_set)
from .fejer_riesz import (Factorization, FactorizationError, LaurentPolynomial, SosOptions,
                          factorize_bauer_1d, factorize_scalar_1d, factorize_sos,
                          parseval_bound_check, residual_coefficients, residual_torus)
from .qassembly import QOperator, RecoveryError, assemble_Q, recover_displacement, verify_QTQ
from .tdse import (ClassicalState, EvolutionConfig, HamiltonianOperator, SchrodingerState,
                   apply_H, decode_state, encode_state, evolve_krylov, evolve_trotter,
                   local_kinetic_energy)
from .verlet import VerletConfig, total_energy, verlet_evolve

__all__ = [
    "InstabilityError", "MassModel", "SiteSet", "Stencil", "StencilError", "assemble_D",
    "build_site_set", "debye_frequency", "dispersion_scan", "eval_dynamical_matrix",
    "load_stencil", "pad_site_set",
    "Factorization", "FactorizationError", "LaurentPolynomial", "SosOptions",
    "factorize_bauer_1d", "factorize_scalar_1d", "factorize_sos", "parseval_bound_check",
    "residual_coefficients", "residual_torus",
    "QOperator", "RecoveryError", "assemble_Q", "recover_displacement", "verify_QTQ",
    "ClassicalState", "EvolutionConfig", "HamiltonianOperator", "SchrodingerState", "apply_H",
    "decode_state", "encode_state", "evolve_krylov", "evolve_trotter", "local_kinetic_energy",
    "VerletConfig", "total_energy", "verlet_evolve",
]
