"""Schrodinger form of harmonic lattice dynamics.

The state ``psi = [M^{1/2} v ; i Q u] / sqrt(2E)`` evolves under
``H = -[[0, B^T], [B, 0]]`` with ``B = Q M^{-1/2}``, and
``psi' = -i H psi`` is equivalent to ``M u'' = -Q^T Q u``.

States may carry a trailing batch axis: ``psi`` of shape ``(n,)`` or
``(n, R)`` with ``energy`` of shape ``()`` or ``(R,)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .lattice import MassModel
from .qassembly import QOperator, recover_displacement


class EvolutionError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClassicalState:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if u.shape != v.shape:
            raise ValueError("u and v must have the same shape")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValueError("classical state has non-finite entries")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)


@dataclass(frozen=True)
class SchrodingerState:
    psi: np.ndarray
    energy: np.ndarray | float
    n_top: int
    time: float = 0.0

    @property
    def top(self) -> np.ndarray:
        return self.psi[:self.n_top]

    @property
    def bottom(self) -> np.ndarray:
        return self.psi[self.n_top:]

    def norm(self):
        return np.linalg.norm(self.psi, axis=0)


@dataclass(frozen=True)
class EvolutionConfig:
    method: str = "krylov"
    dt: float = 0.05
    krylov_dim: int = 32
    tolerance: float = 1e-9
    trotter_order: int = 2

    def __post_init__(self):
        if self.method not in ("krylov", "trotter"):
            raise ValueError(f"unknown method {self.method!r}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.krylov_dim < 4:
            raise ValueError("krylov_dim must be >= 4")
        if self.trotter_order not in (1, 2):
            raise ValueError("trotter_order must be 1 or 2")


class HamiltonianOperator:
    """Matrix-free ``H = -[[0, M^{-1/2} Q^T], [Q M^{-1/2}, 0]]``."""

    def __init__(self, qop: QOperator, masses: MassModel):
        self.qop = qop
        self.masses = masses
        if masses.cell_dof_masses.size != qop.m:
            raise ValueError("mass model does not match the factor block size")
        self.inv_sqrt_mass = 1.0 / np.sqrt(masses.dof_masses(len(qop.domain)))
        self.n_top = qop.shape[1]
        self.n_bottom = qop.shape[0]

    @property
    def dim(self) -> int:
        return self.n_top + self.n_bottom

    def _w(self, x):
        return self.inv_sqrt_mass.reshape((-1,) + (1,) * (x.ndim - 1))

    def matvec(self, psi: np.ndarray) -> np.ndarray:
        top, bottom = psi[:self.n_top], psi[self.n_top:]
        out_top = -self._w(top) * self.qop.apply_T(bottom)
        out_bottom = -self.qop.apply(self._w(top) * top)
        return np.concatenate([out_top, out_bottom], axis=0)

    def to_sparse(self) -> sp.csr_matrix:
        B = self.qop.to_sparse() @ sp.diags(self.inv_sqrt_mass)
        return -sp.bmat([[None, B.T], [B, None]], format="csr")


def apply_H(H: HamiltonianOperator, psi) -> np.ndarray:
    vec = psi.psi if isinstance(psi, SchrodingerState) else np.asarray(psi)
    if vec.shape[0] != H.dim:
        raise ValueError(f"state has length {vec.shape[0]}, Hamiltonian has {H.dim}")
    return H.matvec(vec)


# --------------------------------------------------------------------------
# encoding

def _mass_col(masses, n_sites, ndim):
    return masses.dof_masses(n_sites).reshape((-1,) + (1,) * (ndim - 1))


def encode_state(cs: ClassicalState, qop: QOperator, masses: MassModel,
                 time: float = 0.0) -> SchrodingerState:
    """Normalized Schrodinger state and total energy of ``(u, v)``."""
    n = len(qop.domain)
    if cs.u.shape[0] != qop.shape[1]:
        raise ValueError("classical state does not match the domain size")
    M = _mass_col(masses, n, cs.v.ndim)
    top = np.sqrt(M) * cs.v
    w = qop.apply(cs.u)
    two_e = np.sum(top * top, axis=0) + np.sum(w * w, axis=0)
    if np.any(two_e <= 0):
        raise ValueError("zero-energy state cannot be normalized")
    scale = 1.0 / np.sqrt(two_e)
    psi = np.concatenate([top * scale, 1j * w * scale], axis=0).astype(complex)
    return SchrodingerState(psi, 0.5 * two_e, qop.shape[1], time)


def decode_state(state: SchrodingerState, qop: QOperator, masses: MassModel, *,
                 strict: bool = False, range_tol: float = 1e-6) -> ClassicalState:
    """Invert the encoding: velocities from the top block, displacements by
    forward substitution through ``Q`` on the bottom block."""
    n = len(qop.domain)
    scale = np.sqrt(2.0 * np.asarray(state.energy))
    M = _mass_col(masses, n, state.psi.ndim)
    v = scale * state.top.real / np.sqrt(M)
    w = scale * state.bottom.imag
    u = recover_displacement(qop, w, range_tol=range_tol, strict=strict)
    return ClassicalState(u, v)


def local_kinetic_energy(state: SchrodingerState, masses: MassModel) -> np.ndarray:
    """Kinetic energy per atom, ``E * sum_axes |psi_top|^2``."""
    dim = masses.dim
    top = state.top
    dens = np.abs(top) ** 2 * np.asarray(state.energy)
    return dens.reshape((-1, dim) + top.shape[1:]).sum(axis=1)


def sampled_velocity(state: SchrodingerState, masses: MassModel, shots: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Velocity estimate from ``shots`` binomial samples of each component's
    probability; the sign is taken from the exact amplitude."""
    n_sites = state.n_top // masses.cell_dof_masses.size
    M = _mass_col(masses, n_sites, state.psi.ndim)
    p = np.clip(np.abs(state.top) ** 2, 0.0, 1.0)
    est = rng.binomial(shots, p) / shots
    return np.sign(state.top.real) * np.sqrt(2 * np.asarray(state.energy) * est / M)


# --------------------------------------------------------------------------
# Krylov propagation

def _lanczos(matvec, v0: np.ndarray, k: int):
    """Batched Lanczos with full reorthogonalization.

    ``v0`` has shape (n, R) with unit columns (or zero columns).  Returns
    the basis (R, k, n), diagonals (k, R), off-diagonals (k, R) where the
    last off-diagonal entry is the residual coupling ``beta_k``.
    """
    n, R = v0.shape
    V = np.zeros((R, k, n), dtype=complex)
    alpha = np.zeros((k, R))
    beta = np.zeros((k, R))
    V[:, 0] = v0.T
    for j in range(k):
        w = matvec(np.ascontiguousarray(V[:, j].T)).T
        alpha[j] = np.real(np.sum(np.conj(V[:, j]) * w, axis=1))
        w = w - alpha[j][:, None] * V[:, j]
        if j:
            w -= beta[j - 1][:, None] * V[:, j - 1]
        Vj = V[:, :j + 1]
        for _ in range(2):
            coef = np.matmul(np.conj(Vj), w[:, :, None])
            w -= np.matmul(coef.transpose(0, 2, 1), Vj)[:, 0]
        b = np.linalg.norm(w, axis=1)
        scale = np.abs(alpha[:j + 1]).max(axis=0)
        if j:
            scale = np.maximum(scale, beta[:j].max(axis=0))
        alive = b > 1e-12 * scale
        beta[j] = np.where(alive, b, 0.0)
        if j + 1 < k:
            V[:, j + 1] = np.where(alive[:, None], w / np.where(alive, b, 1.0)[:, None], 0.0)
    return V, alpha, beta


def expm_krylov(matvec, vec: np.ndarray, t: float, krylov_dim: int = 32,
                tol: float = 1e-9, norm_hint: float | None = None):
    """``exp(-i t H) vec`` for Hermitian ``H`` via stepped Lanczos.

    Each step reuses one Krylov basis and shrinks the step until the
    a-posteriori estimate ``beta_0 beta_k |e_k^T exp(-i tau T) e_1|`` is
    below ``tol``.  Returns ``(result, n_steps)``.
    """
    vec = np.asarray(vec, dtype=complex)
    single = vec.ndim == 1
    x = vec.reshape(vec.shape[0], -1).copy()
    n = x.shape[0]
    k = min(krylov_dim, n)
    if t == 0 or not np.any(x):
        return (x[:, 0] if single else x), 0
    sign = 1.0 if t > 0 else -1.0
    remaining = abs(t)
    tau = remaining if norm_hint is None else min(remaining, max(k / 2, 1.0) / max(norm_hint, 1e-300))
    steps = 0
    while remaining > 0:
        b0 = np.linalg.norm(x, axis=0)
        live = b0 > 0
        v0 = np.where(live, x / np.where(live, b0, 1.0), 0.0)
        V, alpha, beta = _lanczos(matvec, v0, k)
        R = x.shape[1]
        eig = []
        for c in range(R):
            if k > 1:
                lam, S = scipy.linalg.eigh_tridiagonal(alpha[:, c], beta[:-1, c])
            else:
                lam, S = alpha[:, c], np.ones((1, 1))
            eig.append((lam, S))

        def coeffs(step):
            out = np.empty((k, R), dtype=complex)
            for c, (lam, S) in enumerate(eig):
                out[:, c] = S @ (np.exp(-1j * sign * step * lam) * S[0])
            return out

        tau = min(tau, remaining)
        while True:
            y = coeffs(tau)
            err = float(np.max(b0 * beta[-1] * np.abs(y[-1])))
            if err <= tol or tau <= 1e-14 * abs(t):
                break
            tau *= 0.5
        if err > tol:
            raise EvolutionError("Krylov step size underflow: tolerance unattainable")
        x = np.matmul(y.T[:, None, :], V)[:, 0].T * b0
        remaining -= tau
        if remaining <= 1e-14 * abs(t):
            remaining = 0.0
        steps += 1
        growth = 2.0 if err < 1e-3 * tol else 1.25
        tau *= growth
    return (x[:, 0] if single else x), steps


def evolve_krylov(state: SchrodingerState, H: HamiltonianOperator, T: float,
                  cfg: EvolutionConfig | None = None) -> SchrodingerState:
    cfg = cfg or EvolutionConfig()
    if cfg.method != "krylov":
        raise ValueError("config does not select the krylov method")
    psi, _ = expm_krylov(H.matvec, state.psi, T, cfg.krylov_dim, cfg.tolerance)
    return replace(state, psi=psi, time=state.time + T)


# --------------------------------------------------------------------------
# Trotter splitting

class TrotterSplitting:
    """``H = sum_(s, alpha) H_(s, alpha)``; each term couples the top block of
    site ``k`` with bottom block ``(s, k + alpha)`` through
    ``-[[0, C^T], [C, 0]]``, ``C = Q^(s)_alpha M_mu^{-1/2}``."""

    def __init__(self, H: HamiltonianOperator):
        qop = H.qop
        self.H = H
        self.m = qop.m
        self.n_sites = len(qop.domain)
        self.n_cod = len(qop.codomain)
        w = 1.0 / np.sqrt(H.masses.cell_dof_masses)
        self.terms = []
        for s in range(qop.rank):
            for i in range(len(qop.alphas)):
                blk = qop.blocks[s, i]
                if not np.any(blk):
                    continue
                C = blk * w[None, :]
                gen = -np.block([[np.zeros((self.m, self.m)), C.T], [C, np.zeros((self.m, self.m))]])
                if not np.array_equal(gen, gen.T):
                    raise EvolutionError("non-Hermitian Trotter term")
                self.terms.append((s, qop.rows[i], gen))
        if not self.terms:
            raise EvolutionError("Hamiltonian has no terms")
        self._check_sum()

    def _check_sum(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(self.H.dim, 1)) + 0j
        total = np.zeros_like(x)
        for s, rows, gen in self.terms:
            total += self._apply_generator(x, s, rows, gen)
        ref = self.H.matvec(x)
        if np.linalg.norm(total - ref) > 1e-10 * max(np.linalg.norm(ref), 1.0):
            raise EvolutionError("Trotter terms do not sum to the Hamiltonian")

    def _split(self, psi):
        n_top = self.n_sites * self.m
        top = psi[:n_top].reshape(self.n_sites, self.m, -1)
        bottom = psi[n_top:].reshape(-1, self.n_cod, self.m, top.shape[-1])
        return top, bottom

    def _apply_generator(self, psi, s, rows, gen):
        out = np.zeros_like(psi)
        top, bottom = self._split(psi)
        otop, obottom = self._split(out)
        z = np.concatenate([top, bottom[s, rows]], axis=1)
        gz = np.einsum("ab,nbr->nar", gen, z)
        otop += gz[:, :self.m]
        obottom[s, rows] += gz[:, self.m:]
        return out

    def _rotate(self, psi, s, rows, U):
        top, bottom = self._split(psi)
        z = np.concatenate([top, bottom[s, rows]], axis=1)
        z = np.einsum("ab,nbr->nar", U, z)
        top[:] = z[:, :self.m]
        bottom[s, rows] = z[:, self.m:]

    def step_sequence(self, dt: float, order: int):
        if order == 1:
            return [(t, dt) for t in self.terms]
        half = [(t, dt / 2) for t in self.terms[:-1]]
        return half + [(self.terms[-1], dt)] + half[::-1]

    def evolve(self, psi: np.ndarray, T: float, dt: float, order: int = 2) -> np.ndarray:
        n_steps = max(int(math.ceil(abs(T) / dt - 1e-12)), 1) if T else 0
        if n_steps == 0:
            return np.array(psi, dtype=complex)
        h = T / n_steps
        single = np.ndim(psi) == 1
        x = np.array(psi, dtype=complex).reshape(len(psi), -1)
        seq = []
        for (s, rows, gen), tau in self.step_sequence(h, order):
            seq.append((s, rows, scipy.linalg.expm(-1j * tau * gen)))
        for _ in range(n_steps):
            for s, rows, U in seq:
                self._rotate(x, s, rows, U)
        return x[:, 0] if single else x


def evolve_trotter(state: SchrodingerState, H: HamiltonianOperator, T: float,
                   cfg: EvolutionConfig | None = None) -> SchrodingerState:
    cfg = cfg or EvolutionConfig(method="trotter")
    if cfg.method != "trotter":
        raise ValueError("config does not select the trotter method")
    psi = TrotterSplitting(H).evolve(state.psi, T, cfg.dt, cfg.trotter_order)
    return replace(state, psi=psi, time=state.time + T)


def evolve(state: SchrodingerState, H: HamiltonianOperator, T: float,
           cfg: EvolutionConfig) -> SchrodingerState:
    if cfg.method == "krylov":
        return evolve_krylov(state, H, T, cfg)
    return evolve_trotter(state, H, T, cfg)


def evolve_snapshots(state: SchrodingerState, H: HamiltonianOperator, times,
                     cfg: EvolutionConfig) -> list:
    """States at the increasing ``times`` (absolute, starting at ``state.time``)."""
    out = []
    current = state
    splitting = TrotterSplitting(H) if cfg.method == "trotter" else None
    for t in times:
        span = t - current.time
        if span < -1e-12:
            raise ValueError("snapshot times must be increasing")
        if span > 0:
            if splitting is not None:
                psi = splitting.evolve(current.psi, span, cfg.dt, cfg.trotter_order)
            else:
                psi, _ = expm_krylov(H.matvec, current.psi, span, cfg.krylov_dim, cfg.tolerance)
            current = replace(current, psi=psi, time=t)
        out.append(current)
    return out

