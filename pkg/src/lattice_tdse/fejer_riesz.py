"""Sum-of-squares factorizations of matrix-valued Laurent polynomials.

A factorization of ``P(z) = sum_l D_l z^l`` consists of one-sided
polynomials ``Q^(s)(z) = sum_{j in [0,q]^d} Q^(s)_j z^j`` with

    D_l = sum_s sum_j (Q^(s)_{j+l})^T Q^(s)_j.

On the torus this reads ``P(theta) = sum_s Q_s(theta)^H Q_s(theta)`` where
``P(theta) = sum_l D_l exp(-i theta.l)`` and
``Q_s(theta) = sum_j Q^(s)_j exp(+i theta.j)``.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .lattice import MassModel, Stencil, eval_on_grid, torus_grid

log = logging.getLogger(__name__)


class FactorizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class LaurentPolynomial:
    """Coefficient blocks ``D_l`` for ``||l||_inf <= degree``."""

    dim: int
    m: int
    degree: int
    coeffs: dict

    @classmethod
    def from_stencil(cls, stencil: Stencil) -> "LaurentPolynomial":
        return cls(stencil.dim, stencil.m, stencil.cutoff,
                   {k: np.array(v) for k, v in stencil.blocks.items()})

    def coeff(self, offset) -> np.ndarray:
        return self.coeffs.get(tuple(offset), np.zeros((self.m, self.m)))

    def evaluate(self, thetas: np.ndarray) -> np.ndarray:
        return eval_on_grid(self.coeffs, self.m, np.atleast_2d(thetas))

    def is_zero(self) -> bool:
        return all(not np.any(v) for v in self.coeffs.values())


@dataclass
class SosOptions:
    max_iterations: int = 500
    gradient_tolerance: float = 1e-14
    residual_tolerance: float = 1e-10
    seed: int = 0
    init_scale: float | None = None
    lambda0: float = 1e-3
    lambda_grow: float = 10.0
    lambda_shrink: float = 0.3
    restarts: int = 5
    pin_zero_frequency: bool = True

    def __post_init__(self):
        if self.gradient_tolerance <= 0 or self.residual_tolerance <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class Factorization:
    """Blocks ``factors[s][offset]`` plus residual and convergence metadata."""

    dim: int
    m: int
    degree: int
    factors: list
    residual_coeff: float = float("nan")
    residual_torus: float = float("nan")
    converged: bool = True
    method: str = ""
    history: list = field(default_factory=list)
    message: str = ""

    @property
    def rank(self) -> int:
        return len(self.factors)

    def offsets(self):
        return _alphas(self.dim, self.degree)

    def block(self, s: int, offset) -> np.ndarray:
        return self.factors[s].get(tuple(offset), np.zeros((self.m, self.m)))

    def stacked(self) -> np.ndarray:
        """Blocks as an ``(r, (q+1)^d, m, m)`` array in lexicographic order."""
        alphas = self.offsets()
        return np.array([[self.block(s, a) for a in alphas] for s in range(self.rank)],
                        dtype=float).reshape(self.rank, len(alphas), self.m, self.m)

    @classmethod
    def from_stacked(cls, arr: np.ndarray, dim: int, degree: int, **kw) -> "Factorization":
        alphas = _alphas(dim, degree)
        r, _, m, _ = arr.shape
        factors = [{a: np.array(arr[s, i]) for i, a in enumerate(alphas)} for s in range(r)]
        return cls(dim, m, degree, factors, **kw)

    def zero_block_stack(self) -> np.ndarray:
        zero = (0,) * self.dim
        return np.vstack([self.block(s, zero) for s in range(self.rank)])

    def recovery_capable(self, rtol: float = 1e-10) -> bool:
        sv = np.linalg.svd(self.zero_block_stack(), compute_uv=False)
        return bool(sv.size) and sv[-1] > rtol * max(sv[0], np.finfo(float).tiny)

    def certify(self, P: LaurentPolynomial, grid: int | None = None) -> "Factorization":
        self.residual_coeff = residual_coefficients(P, self)
        grid = grid or max(2 * self.degree + 2, 16 if self.dim <= 2 else 8)
        self.residual_torus = residual_torus(P, self, grid)
        return self


# --------------------------------------------------------------------------
# coefficient algebra

def _alphas(dim: int, q: int):
    return list(itertools.product(range(q + 1), repeat=dim))


def _offsets(dim: int, q: int):
    return list(itertools.product(range(-q, q + 1), repeat=dim))


class _CoefficientMap:
    """Index bookkeeping for ``Q -> {sum_s sum_{a-b=l} Q_a^T Q_b}_l``."""

    def __init__(self, dim: int, q: int, m: int, r: int):
        self.dim, self.q, self.m, self.r = dim, q, m, r
        self.alphas = _alphas(dim, q)
        self.offsets = _offsets(dim, q)
        index = {l: i for i, l in enumerate(self.offsets)}
        pairs = [(ia, ib, index[tuple(np.subtract(a, b))])
                 for ia, a in enumerate(self.alphas)
                 for ib, b in enumerate(self.alphas)]
        self.pa, self.pb, self.pl = (np.array(x) for x in zip(*pairs))

    @property
    def n_params(self) -> int:
        return self.r * len(self.alphas) * self.m * self.m

    def target(self, P: LaurentPolynomial) -> np.ndarray:
        return np.array([P.coeff(l) for l in self.offsets]).reshape(len(self.offsets), self.m, self.m)

    def synthesize(self, Q: np.ndarray) -> np.ndarray:
        """``Q`` of shape (r, K, m, m) -> coefficients (n_offsets, m, m)."""
        G = np.einsum("spti,sptk->pik", Q[:, self.pa], Q[:, self.pb])
        out = np.zeros((len(self.offsets), self.m, self.m))
        np.add.at(out, self.pl, G)
        return out

    def jacobian(self, Q: np.ndarray) -> np.ndarray:
        """d(target - synthesize(Q)) / dQ, shape (n_offsets*m*m, n_params)."""
        r, K, m = self.r, len(self.alphas), self.m
        J = np.zeros((len(self.offsets), m, m, r, K, m, m))
        eye = np.eye(m)
        for a, b, l in zip(self.pa, self.pb, self.pl):
            # d(Q_a^T Q_b)[i,k] / dQ_a[t,i'] = delta(i,i') Q_b[t,k]
            J[l, :, :, :, a] -= np.einsum("ij,stk->ikstj", eye, Q[:, b])
            # d(Q_a^T Q_b)[i,k] / dQ_b[t,k'] = Q_a[t,i] delta(k,k')
            J[l, :, :, :, b] -= np.einsum("sti,kj->ikstj", Q[:, a], eye)
        return J.reshape(len(self.offsets) * m * m, self.n_params)


def synthesize_polynomial(F: Factorization) -> LaurentPolynomial:
    """The Laurent polynomial whose coefficients ``F`` reproduces exactly."""
    cmap = _CoefficientMap(F.dim, F.degree, F.m, F.rank)
    coeffs = cmap.synthesize(F.stacked())
    return LaurentPolynomial(F.dim, F.m, F.degree,
                             {l: coeffs[i] for i, l in enumerate(cmap.offsets)})


def residual_coefficients(P: LaurentPolynomial, F: Factorization) -> float:
    """Frobenius norm of the coefficient mismatch over all offsets."""
    if P.dim != F.dim or P.m != F.m:
        raise ValueError("polynomial and factorization dimensions differ")
    reach = max(P.degree, F.degree)
    cmap = _CoefficientMap(F.dim, F.degree, F.m, F.rank)
    synth = dict(zip(cmap.offsets, cmap.synthesize(F.stacked())))
    total = 0.0
    for l in _offsets(P.dim, reach):
        diff = P.coeff(l) - synth.get(l, 0.0)
        total += float(np.sum(diff * diff))
    return float(np.sqrt(total))


def factor_symbols(F: Factorization, thetas: np.ndarray) -> np.ndarray:
    """``Q_s(theta)`` for every point, shape (r, n_points, m, m)."""
    return np.array([eval_on_grid(F.factors[s], F.m, thetas, sign=+1) for s in range(F.rank)])


def residual_torus(P: LaurentPolynomial, F: Factorization, grid: int) -> float:
    """Largest Frobenius mismatch ``||P(theta) - sum_s Q_s^H Q_s||`` on the grid."""
    if grid <= 2 * max(F.degree, P.degree):
        raise ValueError(f"grid {grid} too small for degree {max(F.degree, P.degree)}")
    if P.dim != F.dim or P.m != F.m:
        raise ValueError("polynomial and factorization dimensions differ")
    thetas = torus_grid(P.dim, grid)
    Qs = factor_symbols(F, thetas)
    S = np.einsum("snji,snjk->nik", np.conj(Qs), Qs)
    return float(np.max(np.linalg.norm(P.evaluate(thetas) - S, axis=(1, 2))))


# --------------------------------------------------------------------------
# scalar univariate: root splitting

def factorize_scalar_1d(P: LaurentPolynomial, *, neg_tol: float = 1e-9,
                        pair_tol: float = 1e-6) -> Factorization:
    """Exact Fejer-Riesz factor of a nonnegative scalar trigonometric polynomial.

    Roots of ``z^p P(z)`` come in pairs ``{rho, 1/conj(rho)}``; one root
    per pair (the one outside or on the unit circle) is kept and the product
    is rescaled so that ``|Q|^2 = P`` on the circle.  Keeping the outer
    roots makes ``q_0`` the dominant coefficient, so forward substitution
    through ``Q`` is stable.
    """
    if P.dim != 1 or P.m != 1:
        raise ValueError("factorize_scalar_1d needs d = 1, m = 1")
    p = P.degree
    c = np.array([P.coeff((l,))[0, 0] for l in range(-p, p + 1)], dtype=float)
    grid = max(64, 16 * (p + 1))
    values = P.evaluate(torus_grid(1, grid)).real.ravel() if p else np.array([c[0]])
    scale = max(float(np.max(np.abs(c))), np.finfo(float).tiny)
    if values.min() < -neg_tol * scale:
        raise FactorizationError(f"polynomial is negative on the circle (min {values.min():.3e})")

    if not np.any(c):
        F = Factorization(1, 1, p, [{(j,): np.zeros((1, 1)) for j in range(p + 1)}],
                          method="scalar-roots")
        return F.certify(P)

    # trim to the effective degree, keeping the symmetric layout
    nz = np.nonzero(np.abs(c) > 0)[0]
    k = max(p - nz[0], nz[-1] - p)
    c_eff = c[p - k:p + k + 1]
    roots = np.roots(c_eff[::-1]) if k else np.array([])

    chosen = []
    used = np.zeros(len(roots), dtype=bool)
    # outermost roots first so near-circle roots are paired among themselves last
    for i in np.argsort(-np.abs(roots)):
        if used[i]:
            continue
        rho = roots[i]
        cand = [j for j in range(len(roots)) if j != i and not used[j]]
        if not cand:
            raise FactorizationError("unpaired root in spectral factorization")
        mismatch = [abs(rho * np.conj(roots[j]) - 1) for j in cand]
        j = cand[int(np.argmin(mismatch))]
        if min(mismatch) > pair_tol * (1 + abs(rho) ** 2):
            raise FactorizationError(
                f"root {rho} has no reciprocal partner (mismatch {min(mismatch):.3e})")
        used[i] = used[j] = True
        sigma = roots[j]
        inside, outside = (rho, sigma) if abs(rho) <= abs(sigma) else (sigma, rho)
        if abs(abs(inside) - 1.0) <= np.sqrt(pair_tol):
            # split double root on the circle: the midpoint, projected back
            mid = 0.5 * (rho + sigma)
            chosen.append(mid / abs(mid))
        else:
            # both estimate the same outside root
            chosen.append(0.5 * (outside + 1.0 / np.conj(inside)))

    poly = np.poly(chosen) if chosen else np.array([1.0])   # highest power first
    coeffs = poly[::-1]                                        # q_0 .. q_k
    imag = float(np.max(np.abs(coeffs.imag)))
    if imag > 1e-10 * max(float(np.max(np.abs(coeffs))), 1.0):
        log.warning("discarding imaginary residue %.3e in scalar factor", imag)
    coeffs = coeffs.real
    thetas = torus_grid(1, grid)
    base = np.polynomial.polynomial.polyval(np.exp(1j * thetas[:, 0]), coeffs)
    gain = np.sqrt(np.mean(values) / np.mean(np.abs(base) ** 2))
    coeffs = gain * coeffs
    q = np.zeros(p + 1)
    q[:len(coeffs)] = coeffs
    F = Factorization(1, 1, p, [{(j,): np.array([[q[j]]]) for j in range(p + 1)}],
                      method="scalar-roots", message=f"imaginary residue {imag:.1e}")
    F.certify(P)
    F.history = [F.residual_coeff]
    return F


# --------------------------------------------------------------------------
# matrix univariate: Bauer's method

def _bauer_blocks(P: LaurentPolynomial, n: int, shift: float) -> np.ndarray:
    """Last block row of the Cholesky factor of the n-block Toeplitz matrix.

    The Toeplitz matrix has blocks ``T[i, j] = D_{i-j}`` (+ shift on the
    diagonal); returns ``Q_a = L[n-1, n-1-a]^T`` for ``a = 0..p``.
    """
    m, p = P.m, P.degree
    N = n * m
    bw = m * (p + 1) - 1
    # lower band storage: ab[u, j] = T[j + u, j]
    ab = np.zeros((bw + 1, N))
    for u in range(bw + 1):
        for c in range(m):
            a, row = divmod(c + u, m)
            if a > p:
                continue
            value = P.coeff((a,))[row, c] + (shift if u == 0 else 0.0)
            ab[u, np.arange(n - a) * m + c] = value
    Lb = scipy.linalg.cholesky_banded(ab, lower=True, check_finite=False)
    # L[i, j] = Lb[i - j, j]
    last = np.arange((n - 1) * m, n * m)
    out = np.zeros((p + 1, m, m))
    for a in range(p + 1):
        cols = np.arange((n - 1 - a) * m, (n - a) * m)
        for ii, i in enumerate(last):
            for jj, j in enumerate(cols):
                if 0 <= i - j <= bw:
                    out[a, ii, jj] = Lb[i - j, j]
    return np.transpose(out, (0, 2, 1))


def factorize_bauer_1d(P: LaurentPolynomial, toeplitz_size: int | None = None,
                       tol: float = 1e-10, polish: bool = True,
                       options: SosOptions | None = None) -> Factorization:
    """Matrix Fejer-Riesz factor via Cholesky of a long block-Toeplitz matrix.

    Semidefinite inputs (acoustic branches) make the rows converge only
    algebraically in ``n``; the Cholesky estimate is then refined with
    Levenberg-Marquardt on the coefficient equations.
    """
    if P.dim != 1:
        raise ValueError("factorize_bauer_1d needs d = 1")
    p, m = P.degree, P.m
    if P.is_zero():
        F = Factorization(1, m, p, [{(j,): np.zeros((m, m)) for j in range(p + 1)}],
                          method="bauer")
        return F.certify(P)
    n = toeplitz_size or max(20 * p, 200)
    if n < 20 * max(p, 1):
        raise ValueError("toeplitz_size must be >= 20 * degree")
    norm0 = float(np.linalg.norm(P.coeff((0,))))

    notes = []
    try:
        blocks = _bauer_blocks(P, n, 0.0)
    except np.linalg.LinAlgError:
        delta = 1e-10 * norm0
        for _ in range(8):
            try:
                b1 = _bauer_blocks(P, n, delta)
                b2 = _bauer_blocks(P, n, delta / 10)
                break
            except np.linalg.LinAlgError:
                delta *= 100
        else:
            raise FactorizationError("Cholesky breakdown persists under diagonal shift")
        blocks = (10 * b2 - b1) / 9
        notes.append(f"shift {delta:.1e} with Richardson step")

    F = Factorization(1, m, p, [{(a,): blocks[a] for a in range(p + 1)}], method="bauer")
    F.certify(P)
    F.history = [F.residual_coeff]
    if polish and F.residual_coeff > tol:
        # polish well past ``tol``: the Gram identity should hold near round-off
        opts = options or SosOptions(residual_tolerance=1e-14, max_iterations=200)
        kernel = zero_frequency_kernel(P) if opts.pin_zero_frequency else None
        refined = _levenberg_marquardt(P, blocks[None], opts, kernel=kernel)
        refined.method = "bauer+lm"
        refined.message = "; ".join(notes + [f"bauer residual {F.residual_coeff:.3e}"])
        refined.history = F.history + refined.history
        F = refined
    F.converged = F.residual_coeff <= max(tol, 1e-6)
    F.message = F.message or ("converged" if F.converged else "not converged")
    return F


# --------------------------------------------------------------------------
# general: Levenberg-Marquardt on the coefficient equations

def zero_frequency_kernel(P: LaurentPolynomial, rel_tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis of ``ker P(0)`` relative to the coefficient scale, shape (m, k)."""
    P0 = sum(P.coeffs.values(), np.zeros((P.m, P.m)))
    w, V = np.linalg.eigh(0.5 * (P0 + P0.T))
    scale = max(float(np.linalg.norm(v)) for v in P.coeffs.values())
    return V[:, w <= rel_tol * scale]


def _levenberg_marquardt(P: LaurentPolynomial, Q0: np.ndarray, opts: SosOptions,
                         kernel: np.ndarray | None = None) -> Factorization:
    """LM on the coefficient equations.

    ``kernel`` (columns spanning ker P(0)) adds the rows ``Q_s(0) N = 0``,
    which every exact factor satisfies. They pin the flat direction where a
    unit-circle double root splits off the circle, without moving the solution.
    """
    r, K, m, _ = Q0.shape
    q = int(round(K ** (1.0 / P.dim))) - 1
    cmap = _CoefficientMap(P.dim, q, m, r)
    target = cmap.target(P)
    x = Q0.astype(float).ravel().copy()
    if kernel is not None and kernel.size:
        C = np.kron(np.eye(r), np.kron(np.ones((1, K)), np.kron(np.eye(m), kernel.T)))
    else:
        C = np.zeros((0, x.size))

    def residual(vec):
        return np.concatenate([(target - cmap.synthesize(vec.reshape(Q0.shape))).ravel(), -C @ vec])

    def jacobian(vec):
        return np.vstack([cmap.jacobian(vec.reshape(Q0.shape)), -C])

    res = residual(x)
    cost = float(res @ res)
    history = [np.sqrt(cost)]
    J = jacobian(x)
    A = J.T @ J
    g = J.T @ res
    lam = opts.lambda0 * max(float(np.max(np.diag(A))), 1.0)
    status = "max-iterations"
    for _ in range(opts.max_iterations):
        if np.sqrt(cost) <= opts.residual_tolerance:
            status = "residual"
            break
        if np.linalg.norm(g) <= opts.gradient_tolerance:
            status = "gradient"
            break
        try:
            step = np.linalg.solve(A + lam * np.eye(len(x)), -g)
        except np.linalg.LinAlgError:
            lam *= opts.lambda_grow
            continue
        x_new = x + step
        res_new = residual(x_new)
        cost_new = float(res_new @ res_new)
        if cost_new < cost:
            x, res, cost = x_new, res_new, cost_new
            J = jacobian(x)
            A = J.T @ J
            g = J.T @ res
            lam = max(lam * opts.lambda_shrink, 1e-12 * max(float(np.max(np.diag(A))), 1.0))
        else:
            lam *= opts.lambda_grow
            if lam > 1e16 * max(float(np.max(np.diag(A))), 1.0):
                status = "stalled"
                break
        history.append(np.sqrt(cost))
    F = Factorization.from_stacked(x.reshape(Q0.shape), P.dim, q, method="sos-lm",
                                   history=history, message=status)
    F.certify(P)
    F.converged = F.residual_coeff <= opts.residual_tolerance
    return F


def default_init_scale(P: LaurentPolynomial, r: int, q: int) -> float:
    big = max((np.linalg.norm(v) for v in P.coeffs.values()), default=0.0)
    return float(np.sqrt(big / (r * (q + 1) ** P.dim * P.m)))


def factorize_sos(P: LaurentPolynomial, r: int, q: int,
                  options: SosOptions | None = None) -> Factorization:
    """Rank-``r``, degree-``q`` sum-of-squares factorization by seeded LM.

    Runs up to ``options.restarts`` seeded attempts (seed, seed+1, ...) and
    keeps the smallest residual; stops early once one attempt converges.
    """
    opts = options or SosOptions()
    if r < 1 or q < 0:
        raise ValueError("need r >= 1 and q >= 0")
    if q < P.degree:
        raise ValueError(f"degree q={q} below polynomial degree {P.degree}")
    K = (q + 1) ** P.dim
    if P.is_zero():
        F = Factorization.from_stacked(np.zeros((r, K, P.m, P.m)), P.dim, q,
                                       method="sos-lm", history=[0.0], message="zero")
        return F.certify(P)
    scale = opts.init_scale or default_init_scale(P, r, q)
    kernel = zero_frequency_kernel(P) if opts.pin_zero_frequency else None
    best = None
    for attempt in range(max(opts.restarts, 1)):
        seed = opts.seed + attempt
        rng = np.random.default_rng(seed)
        Q0 = rng.uniform(-scale, scale, size=(r, K, P.m, P.m))
        F = _levenberg_marquardt(P, Q0, opts, kernel=kernel)
        F.message = f"seed {seed}: {F.message}"
        log.debug("sos attempt seed=%d residual=%.3e", seed, F.residual_coeff)
        if best is None or F.residual_coeff < best.residual_coeff:
            best = F
        if F.converged:
            break
    return best


# --------------------------------------------------------------------------
# bound check

@dataclass
class ParsevalReport:
    block_norm_sq: float
    bound: float
    holds: bool
    weighted_norm_sq: float
    weighted_bound: float
    weighted_holds: bool
    alpha_sum: float
    alpha_debye: float
    alpha_holds: bool
    omega_debye: float

    def as_dict(self):
        return asdict(self)


def parseval_bound_check(P: LaurentPolynomial, F: Factorization, masses: MassModel,
                         grid: int | None = None) -> ParsevalReport:
    """Compare factor block norms against torus bounds.

    Checks ``sum ||Q_j||_F^2 <= m max ||P(theta)||_F``; also reports the
    mass-weighted analogue against ``m omega_D^2`` and the sum of spectral
    norms of ``Q_j M^{-1/2}`` against ``omega_D n_A d``.
    """
    grid = grid or (64 if P.dim <= 2 else 16)
    thetas = torus_grid(P.dim, grid)
    Pv = P.evaluate(thetas)
    pmax = float(np.max(np.linalg.norm(Pv, axis=(1, 2)))) if len(Pv) else 0.0
    Q = F.stacked()
    total = float(np.sum(Q * Q))
    bound = P.m * pmax
    w = 1.0 / np.sqrt(masses.cell_dof_masses)
    if w.size != P.m:
        raise ValueError("mass model does not match block size")
    Qw = Q * w[None, None, None, :]
    weighted = float(np.sum(Qw * Qw))
    Pw = w[None, :, None] * Pv * w[None, None, :]
    wmax = float(np.max(np.linalg.eigvalsh(0.5 * (Pw + np.conj(np.swapaxes(Pw, 1, 2)))))) if len(Pv) else 0.0
    omega = float(np.sqrt(max(wmax, 0.0)))
    alpha_sum = float(sum(np.linalg.norm(blk, 2) for blk in Qw.reshape(-1, P.m, P.m)))
    alpha_d = omega * P.m
    slack = 1 + 1e-6
    return ParsevalReport(total, bound, total <= bound * slack + 1e-14,
                          weighted, P.m * wmax, weighted <= P.m * wmax * slack + 1e-14,
                          alpha_sum, alpha_d, alpha_sum <= alpha_d * slack + 1e-14, omega)


# --------------------------------------------------------------------------
# serialization

def factorization_to_dict(F: Factorization) -> dict:
    return {
        "dim": F.dim,
        "block_size": F.m,
        "rank": F.rank,
        "degree": F.degree,
        "factors": [
            [{"offset": list(a), "matrix": F.block(s, a).ravel().tolist()} for a in F.offsets()]
            for s in range(F.rank)
        ],
        "residual_coeff": F.residual_coeff,
        "residual_torus": F.residual_torus,
        "converged": bool(F.converged),
        "method": F.method,
        "message": F.message,
        "iterations": max(len(F.history) - 1, 0),
    }


def factorization_from_dict(doc: dict) -> Factorization:
    try:
        dim, m, q = int(doc["dim"]), int(doc["block_size"]), int(doc["degree"])
        factors = []
        for entries in doc["factors"]:
            blocks = {}
            for e in entries:
                off = tuple(int(x) for x in np.atleast_1d(e["offset"]))
                if len(off) != dim or min(off) < 0 or max(off) > q:
                    raise ValueError(f"offset {off} outside [0, {q}]^{dim}")
                blocks[off] = np.asarray(e["matrix"], dtype=float).reshape(m, m)
            factors.append(blocks)
    except (KeyError, TypeError, ValueError) as exc:
        raise FactorizationError(f"malformed factorization document: {exc}") from exc
    return Factorization(dim, m, q, factors,
                         residual_coeff=float(doc.get("residual_coeff", float("nan"))),
                         residual_torus=float(doc.get("residual_torus", float("nan"))),
                         converged=bool(doc.get("converged", True)),
                         method=doc.get("method", ""), message=doc.get("message", ""))


def save_factorization(F: Factorization, path) -> None:
    Path(path).write_text(json.dumps(factorization_to_dict(F), indent=2) + "\n", encoding="utf-8")


def load_factorization(path) -> Factorization:
    return factorization_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_history_csv(F: Factorization, path) -> None:
    lines = ["iteration,residual"] + [f"{i},{v:.17g}" for i, v in enumerate(F.history)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def gram_blocks(F: Factorization) -> np.ndarray:
    """Gauge-invariant ``sum_s Q_a^T Q_b`` for all offset pairs (a, b)."""
    Q = F.stacked()
    return np.einsum("sati,sbtk->abik", Q, Q)
