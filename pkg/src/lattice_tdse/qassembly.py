"""The factor operator ``Q`` with ``Q^T Q = D`` on a site set.

Codomain layout is ``(s, codomain site, dof)`` flattened in that order,
i.e. ``r * |S~| * m`` rows, where ``S~`` is the padded site set for fixed
boundaries and ``S`` itself (wrapped offsets) for periodic ones.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg

from .fejer_riesz import Factorization
from .lattice import SiteSet, Stencil, assemble_D, pad_site_set


class QAssemblyError(RuntimeError):
    pass


class RecoveryError(RuntimeError):
    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True, eq=False)
class QOperator:
    domain: SiteSet
    codomain: SiteSet
    blocks: np.ndarray        # (r, K, m, m)
    alphas: tuple             # K offsets in [0, q]^d
    rows: np.ndarray          # (K, |S|): codomain index of k + alpha
    self_check: float = float("nan")

    @property
    def rank(self) -> int:
        return self.blocks.shape[0]

    @property
    def m(self) -> int:
        return self.blocks.shape[2]

    @property
    def boundary(self) -> str:
        return self.domain.boundary

    @property
    def shape(self):
        return (self.rank * len(self.codomain) * self.m, len(self.domain) * self.m)

    def apply(self, u: np.ndarray) -> np.ndarray:
        """``Q u`` for ``u`` of shape (|S| m,) or (|S| m, R)."""
        u = np.asarray(u)
        batch = u.shape[1:]
        uu = u.reshape(len(self.domain), self.m, -1)
        dtype = np.result_type(u.dtype, float)
        w = np.zeros((self.rank, len(self.codomain), self.m, uu.shape[-1]), dtype=dtype)
        for s in range(self.rank):
            for i in range(len(self.alphas)):
                blk = self.blocks[s, i]
                if np.any(blk):
                    w[s, self.rows[i]] += np.einsum("ab,nbr->nar", blk, uu)
        return w.reshape((self.shape[0],) + batch)

    def apply_T(self, w: np.ndarray) -> np.ndarray:
        """``Q^T w`` for ``w`` of shape (r |S~| m,) or (r |S~| m, R)."""
        w = np.asarray(w)
        batch = w.shape[1:]
        ww = w.reshape(self.rank, len(self.codomain), self.m, -1)
        dtype = np.result_type(w.dtype, float)
        u = np.zeros((len(self.domain), self.m, ww.shape[-1]), dtype=dtype)
        for s in range(self.rank):
            for i in range(len(self.alphas)):
                blk = self.blocks[s, i]
                if np.any(blk):
                    u += np.einsum("ba,nbr->nar", blk, ww[s, self.rows[i]])
        return u.reshape((self.shape[1],) + batch)

    def to_sparse(self) -> sp.csr_matrix:
        m, n_cod = self.m, len(self.codomain)
        ii, jj = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
        cols_site = np.arange(len(self.domain))
        rows, cols, vals = [], [], []
        for s in range(self.rank):
            for i in range(len(self.alphas)):
                blk = self.blocks[s, i]
                if not np.any(blk):
                    continue
                r0 = (s * n_cod + self.rows[i]) * m
                rows.append((r0[:, None, None] + ii[None]).ravel())
                cols.append((cols_site[:, None, None] * m + jj[None]).ravel())
                vals.append(np.broadcast_to(blk, (len(cols_site), m, m)).ravel())
        if not rows:
            return sp.csr_matrix(self.shape)
        Q = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=self.shape).tocsr()
        Q.sum_duplicates()
        Q.eliminate_zeros()
        return Q

    def as_linear_operator(self) -> scipy.sparse.linalg.LinearOperator:
        return scipy.sparse.linalg.LinearOperator(
            self.shape, matvec=self.apply, rmatvec=self.apply_T, matmat=self.apply,
            rmatmat=self.apply_T, dtype=float)


def assemble_Q(F: Factorization, sites: SiteSet, stencil: Stencil | None = None,
               check: bool = True, check_tol: float = 1e-8) -> QOperator:
    """Place the factor blocks on ``sites``: row ``k + alpha`` of column ``k``
    carries ``Q^(s)_alpha``.

    With ``stencil`` given, the result is checked against the assembled
    dynamical operator and ``QAssemblyError`` is raised when
    ``||Q^T Q - D||_F / ||D||_F`` exceeds ``check_tol``.
    """
    if F.dim != sites.dim:
        raise ValueError("factorization and site set dimensions differ")
    if stencil is not None and (stencil.dim != F.dim or stencil.m != F.m):
        raise ValueError("factorization does not match the stencil's block size")
    codomain = pad_site_set(sites, F.degree)
    alphas = tuple(F.offsets())
    rows = np.array([codomain.index_of(sites.sites + np.asarray(a)) for a in alphas],
                    dtype=np.int64).reshape(len(alphas), len(sites))
    if np.any(rows < 0):
        raise QAssemblyError("padded codomain does not cover all shifted sites")
    Qop = QOperator(sites, codomain, F.stacked(), alphas, rows)
    if stencil is not None and check:
        rel = verify_QTQ(Qop, assemble_D(stencil, sites))
        object.__setattr__(Qop, "self_check", rel)
        if not rel <= check_tol:
            raise QAssemblyError(f"Q^T Q differs from D: relative residual {rel:.3e}")
    return Qop


def verify_QTQ(Qop: QOperator, D: sp.spmatrix, *, exact_limit: int = 50_000,
               probes: int = 32, seed: int = 0) -> float:
    """``||Q^T Q - D||_F / ||D||_F`` (absolute norm when ``D = 0``).

    Exact through the sparse product up to ``exact_limit`` unknowns,
    otherwise a Rademacher-probe estimate.
    """
    n = Qop.shape[1]
    if D.shape != (n, n):
        raise ValueError(f"shape mismatch: Q has {n} columns, D is {D.shape}")
    if n <= exact_limit:
        Qs = Qop.to_sparse()
        diff = (Qs.T @ Qs - D).tocoo()
        num = float(np.sqrt(np.sum(diff.data ** 2)))
        den = float(sp.linalg.norm(D)) if D.nnz else 0.0
    else:
        rng = np.random.default_rng(seed)
        Z = rng.choice([-1.0, 1.0], size=(n, probes))
        R = Qop.apply_T(Qop.apply(Z)) - D @ Z
        num = float(np.sqrt(np.sum(R * R) / probes))
        DZ = D @ Z
        den = float(np.sqrt(np.sum(DZ * DZ) / probes))
    return num / den if den > 0 else num


def recover_displacement(Qop: QOperator, w: np.ndarray, *, range_tol: float = 1e-6,
                         strict: bool = True) -> np.ndarray:
    """Solve ``Q u = w`` for ``u``.

    Fixed boundary: forward substitution over the lexicographically ordered
    domain, using the stacked zero-offset blocks at each site.  Periodic
    boundary: per-frequency least squares (the acoustic zero mode, which
    ``Q`` annihilates, comes back as zero).

    A range residual ``||Q u - w|| / ||w||`` above ``range_tol`` raises
    RecoveryError when ``strict``, otherwise it is reported as a warning.
    """
    w = np.asarray(w)
    if w.shape[0] != Qop.shape[0]:
        raise ValueError(f"vector has {w.shape[0]} rows, Q has {Qop.shape[0]}")
    if Qop.boundary == "periodic":
        u = _recover_periodic(Qop, w)
    else:
        u = _forward_substitution(Qop, w)
    wnorm = float(np.linalg.norm(w))
    resid = float(np.linalg.norm(Qop.apply(u) - w)) / wnorm if wnorm > 0 else 0.0
    if resid > range_tol:
        msg = f"vector is not in the range of Q (relative residual {resid:.3e})"
        if strict:
            raise RecoveryError(msg, resid)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return u


def _zero_offset_pinv(Qop: QOperator) -> np.ndarray:
    zero = Qop.alphas.index((0,) * Qop.domain.dim)
    stack = Qop.blocks[:, zero].reshape(Qop.rank * Qop.m, Qop.m)
    sv = np.linalg.svd(stack, compute_uv=False)
    if sv[0] == 0 or sv[-1] <= 1e-12 * sv[0]:
        raise RecoveryError("stacked zero-offset block is rank deficient")
    return np.linalg.pinv(stack)


def _forward_substitution(Qop: QOperator, w: np.ndarray) -> np.ndarray:
    pinv = _zero_offset_pinv(Qop)
    r, m = Qop.rank, Qop.m
    n = len(Qop.domain)
    batch = w.shape[1:]
    ww = w.reshape(r, len(Qop.codomain), m, -1)
    dtype = np.result_type(w.dtype, float)
    u = np.zeros((n, m, ww.shape[-1]), dtype=dtype)
    zero = Qop.alphas.index((0,) * Qop.domain.dim)
    sites = Qop.domain.sites
    # domain predecessors k - alpha for each nonzero alpha
    others = [i for i in range(len(Qop.alphas)) if i != zero]
    prev = np.array([Qop.domain.index_of(sites - np.asarray(Qop.alphas[i])) for i in others],
                    dtype=np.int64).reshape(len(others), n)
    blocks = Qop.blocks
    own_row = Qop.rows[zero]
    for k in range(n):
        rhs = ww[:, own_row[k]].copy()          # (r, m, R)
        for j, i in enumerate(others):
            kk = prev[j, k]
            if kk >= 0:
                rhs -= blocks[:, i] @ u[kk]
        u[k] = pinv @ rhs.reshape(r * m, -1)
    return u.reshape((n * m,) + batch)


def _recover_periodic(Qop: QOperator, w: np.ndarray) -> np.ndarray:
    periods = tuple(Qop.domain.periods)
    d, r, m = Qop.domain.dim, Qop.rank, Qop.m
    batch = w.shape[1:]
    ww = w.reshape((r,) + periods + (m, -1))
    axes = tuple(range(1, d + 1))
    W = np.fft.fftn(ww, axes=axes)
    grids = np.meshgrid(*[np.arange(L) for L in periods], indexing="ij")
    symbols = np.zeros((r,) + periods + (m, m), dtype=complex)
    for i, a in enumerate(Qop.alphas):
        phase = np.exp(-2j * np.pi * sum(g * ai / L for g, ai, L in zip(grids, a, periods)))
        symbols += phase[None, ..., None, None] * Qop.blocks[:, i][(slice(None),) + (None,) * d]
    # stack over s: (..., r m, m)
    A = np.moveaxis(symbols, 0, d).reshape(periods + (r * m, m))
    B = np.moveaxis(W, 0, d).reshape(periods + (r * m, -1))
    # pseudo-inverse with a cutoff relative to the largest singular value
    # over all frequencies, so the acoustic zero mode is dropped
    Us, sv, Vh = np.linalg.svd(A, full_matrices=False)
    cut = 1e-10 * float(sv.max()) if sv.size else 0.0
    inv = np.where(sv > cut, 1.0 / np.where(sv > cut, sv, 1.0), 0.0)
    U = np.conj(np.swapaxes(Vh, -1, -2)) @ (inv[..., None] * (np.conj(np.swapaxes(Us, -1, -2)) @ B))
    u = np.fft.ifftn(U, axes=tuple(range(d)))
    if not np.iscomplexobj(w):
        u = u.real
    return u.reshape((len(Qop.domain) * m,) + batch)


def export_matrix_market(Qop: QOperator, D: sp.spmatrix, prefix) -> None:
    scipy.io.mmwrite(f"{prefix}_Q.mtx", Qop.to_sparse())
    scipy.io.mmwrite(f"{prefix}_D.mtx", sp.csr_matrix(D))
