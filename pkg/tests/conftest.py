import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lattice_tdse.experiments import shipped_factorization
from lattice_tdse.fejer_riesz import Factorization, synthesize_polynomial
from lattice_tdse.lattice import load_stencil, make_stencil

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FACTORIZABLE = ["nnn-chain", "diatomic", "nn-chain", "square-2d"]
SQ3 = 1 / np.sqrt(3)
NNN_Q = np.array([(1 + SQ3) / 2, -1.0, (1 - SQ3) / 2])


@pytest.fixture(params=FACTORIZABLE)
def preset_case(request):
    stencil, masses = load_stencil(request.param)
    return request.param, stencil, masses, shipped_factorization(request.param)


def random_factorization(rng, dim=1, m=1, rank=1, degree=1, upper=False):
    K = (degree + 1) ** dim
    Q = rng.normal(size=(rank, K, m, m))
    if upper:
        # well-conditioned zero-offset block for recovery tests
        for s in range(rank):
            Q[s, 0] = np.triu(Q[s, 0]) + np.diag(2 + np.abs(np.diag(Q[s, 0])))
    return Factorization.from_stacked(Q, dim, degree)


def stencil_of(F: Factorization, atoms_per_cell=None):
    """Stencil whose coefficients are synthesized from ``F``."""
    P = synthesize_polynomial(F)
    nA = atoms_per_cell or F.m // F.dim
    return make_stencil(P.coeffs, F.dim, nA), P


def sign_reversal_distance(a, b):
    """Distance between scalar coefficient vectors up to sign and reversal."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return min(np.max(np.abs(s * x - b)) for s in (1, -1) for x in (a, a[::-1]))
