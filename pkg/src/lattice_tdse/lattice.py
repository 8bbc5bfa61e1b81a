"""Lattice geometry, force-constant stencils and the dynamical matrix.

Conventions used throughout the package:

* Newton's equations read ``M u'' = -D u``; the stencil stores the blocks
  ``D_{0,l}`` so that block ``(j, k)`` of ``D`` is ``D_{0, k-j}``.
* Within a unit cell the degrees of freedom are ordered atom-major,
  ``dof = atom * d + axis``, so ``m = n_atoms * d``.
* Site sets are ordered lexicographically on their integer multi-indices.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class StencilError(ValueError):
    """Malformed or inconsistent stencil document."""


class InstabilityError(RuntimeError):
    """Dynamical matrix has negative eigenvalues beyond tolerance."""


PRESET_NAMES = ("nnn-chain", "nnn-chain-altsign", "diatomic", "nn-chain", "square-2d")


@dataclass(frozen=True)
class Stencil:
    """Finite map from cell offsets to real ``m x m`` force-constant blocks.

    ``blocks`` always contains ``-l`` for every stored ``l`` with
    ``blocks[-l] == blocks[l].T``.
    """

    dim: int
    cutoff: int
    atoms_per_cell: int
    blocks: dict
    symmetrization_correction: float = 0.0

    @property
    def m(self) -> int:
        return self.atoms_per_cell * self.dim

    def offsets(self):
        return sorted(self.blocks)

    def block(self, offset) -> np.ndarray:
        return self.blocks.get(tuple(offset), np.zeros((self.m, self.m)))

    def max_block_norm(self) -> float:
        if not self.blocks:
            return 0.0
        return max(np.linalg.norm(b) for b in self.blocks.values())


@dataclass(frozen=True)
class MassModel:
    """Per-atom masses of one unit cell; expanded to per-DOF diagonals."""

    cell_masses: tuple
    dim: int = 1

    def __post_init__(self):
        masses = np.asarray(self.cell_masses, dtype=float)
        if masses.ndim != 1 or masses.size == 0 or np.any(masses <= 0):
            raise ValueError("masses must be a non-empty vector of positive numbers")
        object.__setattr__(self, "cell_masses", tuple(float(x) for x in masses))

    @property
    def cell_dof_masses(self) -> np.ndarray:
        return np.repeat(np.asarray(self.cell_masses), self.dim)

    def cell_matrix(self) -> np.ndarray:
        return np.diag(self.cell_dof_masses)

    def dof_masses(self, n_sites: int) -> np.ndarray:
        """Diagonal of ``M = I_N (x) M_mu`` for ``n_sites`` cells."""
        return np.tile(self.cell_dof_masses, n_sites)


@dataclass(frozen=True)
class SiteSet:
    """Finite, lexicographically ordered subset of ``Z^d``.

    For periodic boundaries ``periods`` holds the box extents and the sites
    form the full box.
    """

    sites: np.ndarray
    boundary: str = "fixed"
    periods: tuple | None = None
    _lookup: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        sites = np.asarray(self.sites, dtype=np.int64)
        if sites.ndim != 2:
            raise ValueError("sites must be an (N, d) integer array")
        if len(sites):
            order = np.lexsort(sites.T[::-1])
            sites = sites[order]
            if np.any(np.all(np.diff(sites, axis=0) == 0, axis=1)):
                raise ValueError("duplicate sites")
        sites.setflags(write=False)
        object.__setattr__(self, "sites", sites)
        if self.boundary not in ("fixed", "periodic"):
            raise ValueError(f"unknown boundary {self.boundary!r}")
        if self.boundary == "periodic":
            if self.periods is None:
                raise ValueError("periodic boundary needs periods")
            if len(sites) != int(np.prod(self.periods)):
                raise ValueError("periodic site set must be the full box")
        object.__setattr__(self, "_lookup", _SiteLookup(sites))

    @property
    def dim(self) -> int:
        return self.sites.shape[1]

    def __len__(self) -> int:
        return len(self.sites)

    def index_of(self, points) -> np.ndarray:
        """Indices of ``points`` (shape (K, d)); -1 where absent.

        Under periodic boundary the points are wrapped into the box first.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.int64))
        if self.boundary == "periodic":
            points = np.mod(points, np.asarray(self.periods))
        return self._lookup(points)

    def shifted_index(self, offset) -> np.ndarray:
        """For every site ``k``, the index of ``k + offset`` (or -1)."""
        return self.index_of(self.sites + np.asarray(offset, dtype=np.int64))


class _SiteLookup:
    """Dense bounding-box lookup table from multi-index to position."""

    def __init__(self, sites: np.ndarray):
        if len(sites) == 0:
            self.lo = np.zeros(sites.shape[1], dtype=np.int64)
            self.table = np.full((0,) * sites.shape[1], -1, dtype=np.int64)
            return
        self.lo = sites.min(axis=0)
        shape = tuple(sites.max(axis=0) - self.lo + 1)
        self.table = np.full(shape, -1, dtype=np.int64)
        self.table[tuple((sites - self.lo).T)] = np.arange(len(sites))

    def __call__(self, points: np.ndarray) -> np.ndarray:
        rel = points - self.lo
        out = np.full(len(points), -1, dtype=np.int64)
        if self.table.size == 0:
            return out
        inside = np.all((rel >= 0) & (rel < np.asarray(self.table.shape)), axis=1)
        out[inside] = self.table[tuple(rel[inside].T)]
        return out


@dataclass(frozen=True)
class DispersionScan:
    thetas: np.ndarray
    eigenvalues: np.ndarray  # (n_points, m), ascending per point
    min_eig: float
    max_eig: float
    hermiticity_residual: float


# --------------------------------------------------------------------------
# stencil documents

def _parse_offset(raw, dim):
    offset = tuple(int(x) for x in np.atleast_1d(raw))
    if len(offset) != dim:
        raise StencilError(f"offset {raw!r} does not have {dim} components")
    return offset


def stencil_from_dict(doc: dict, *, symmetry_tol: float = 1e-9):
    """Build a ``(Stencil, MassModel)`` pair from a parsed stencil document."""
    try:
        dim = int(doc["dim"])
        cutoff = int(doc["cutoff"])
        n_atoms = int(doc["atoms_per_cell"])
        masses = doc.get("masses", [1.0] * n_atoms)
        raw_blocks = doc["blocks"]
    except (KeyError, TypeError, ValueError) as exc:
        raise StencilError(f"malformed stencil document: {exc}") from exc
    if dim < 1 or cutoff < 0 or n_atoms < 1:
        raise StencilError("dim, atoms_per_cell must be >= 1 and cutoff >= 0")
    if len(masses) != n_atoms:
        raise StencilError("masses must have atoms_per_cell entries")
    m = n_atoms * dim

    blocks = {}
    for entry in raw_blocks:
        try:
            offset = _parse_offset(entry["offset"], dim)
            values = np.asarray(entry["matrix"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise StencilError(f"malformed block entry: {exc}") from exc
        if max((abs(x) for x in offset), default=0) > cutoff:
            raise StencilError(f"offset {offset} exceeds cutoff {cutoff}")
        if values.ndim == 2:
            if values.shape[0] != values.shape[1]:
                raise StencilError(f"block at {offset} is not square")
            values = values.ravel()
        if values.size != m * m:
            n = int(round(np.sqrt(values.size)))
            if n * n != values.size:
                raise StencilError(f"block at {offset} is not square")
            raise StencilError(
                f"block at {offset} has size {n}x{n}, expected m={m} "
                f"(atoms_per_cell * dim)")
        if offset in blocks:
            raise StencilError(f"duplicate offset {offset}")
        blocks[offset] = values.reshape(m, m)

    for offset in list(blocks):
        neg = tuple(-x for x in offset)
        if neg not in blocks:
            raise StencilError(f"offset {offset} stored without its partner {neg}")

    correction = 0.0
    sym = {}
    for offset, block in blocks.items():
        neg = tuple(-x for x in offset)
        avg = 0.5 * (block + blocks[neg].T)
        correction = max(correction, float(np.linalg.norm(block - avg)))
        sym[offset] = avg
    scale = max((np.linalg.norm(b) for b in blocks.values()), default=0.0)
    if correction > symmetry_tol * max(scale, 1.0):
        raise StencilError(
            f"blocks violate D(-l) = D(l)^T (correction norm {correction:.3e})")
    # keep exact transposes so the assembled operator is bit-symmetric
    for offset in sorted(sym):
        neg = tuple(-x for x in offset)
        if offset > neg:
            sym[offset] = sym[neg].T.copy()

    stencil = Stencil(dim, cutoff, n_atoms, sym, symmetrization_correction=correction)
    return stencil, MassModel(tuple(masses), dim)


def load_stencil(source):
    """Load a stencil document from a path, a preset name or a dict.

    Returns ``(stencil, mass_model)``.
    """
    if isinstance(source, dict):
        return stencil_from_dict(source)
    doc = read_stencil_document(source)
    return stencil_from_dict(doc)


def read_stencil_document(source) -> dict:
    path = Path(source)
    if path.is_file():
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise StencilError(f"{path}: invalid JSON ({exc})") from exc
    name = path.name.removesuffix(".json")
    if name in PRESET_NAMES:
        text = resources.files("lattice_tdse.presets").joinpath(f"{name}.json").read_text()
        return json.loads(text)
    raise FileNotFoundError(f"no stencil file or preset named {source!r}")


def stencil_to_dict(stencil: Stencil, masses: MassModel | None = None) -> dict:
    masses = masses or MassModel((1.0,) * stencil.atoms_per_cell, stencil.dim)
    return {
        "dim": stencil.dim,
        "cutoff": stencil.cutoff,
        "atoms_per_cell": stencil.atoms_per_cell,
        "masses": list(masses.cell_masses),
        "blocks": [
            {"offset": list(off), "matrix": stencil.blocks[off].ravel().tolist()}
            for off in stencil.offsets()
        ],
    }


def make_stencil(blocks: dict, dim: int, atoms_per_cell: int = 1) -> Stencil:
    """Stencil from an in-memory ``{offset: block}`` map (validated)."""
    m = atoms_per_cell * dim
    doc_blocks = []
    cutoff = 0
    for off, val in blocks.items():
        off = tuple(np.atleast_1d(off).astype(int).tolist())
        cutoff = max(cutoff, max(abs(x) for x in off))
        doc_blocks.append({"offset": list(off),
                           "matrix": np.asarray(val, dtype=float).reshape(m, m).ravel().tolist()})
    doc = {"dim": dim, "cutoff": cutoff, "atoms_per_cell": atoms_per_cell,
           "masses": [1.0] * atoms_per_cell, "blocks": doc_blocks}
    return stencil_from_dict(doc)[0]


# --------------------------------------------------------------------------
# Fourier side

def eval_dynamical_matrix(stencil: Stencil, theta) -> np.ndarray:
    """``P(theta) = sum_l D_{0,l} exp(-i theta . l)``."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.shape != (stencil.dim,):
        raise ValueError(f"theta must have {stencil.dim} components")
    out = np.zeros((stencil.m, stencil.m), dtype=complex)
    for off, block in stencil.blocks.items():
        out += block * np.exp(-1j * np.dot(theta, off))
    return out


def torus_grid(dim: int, grid: int) -> np.ndarray:
    """Uniform ``grid^dim`` points on ``[0, 2 pi)^dim``, lexicographic."""
    axis = 2 * np.pi * np.arange(grid) / grid
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def eval_on_grid(blocks: dict, m: int, thetas: np.ndarray, sign: int = -1) -> np.ndarray:
    """Vectorized ``sum_l B_l exp(sign * i theta . l)`` on many points."""
    out = np.zeros((len(thetas), m, m), dtype=complex)
    for off, block in blocks.items():
        phase = np.exp(sign * 1j * (thetas @ np.asarray(off, dtype=float)))
        out += phase[:, None, None] * block
    return out


def default_grid(dim: int) -> int:
    return 64 if dim <= 2 else 16


def dispersion_scan(stencil: Stencil, masses: MassModel, grid: int | None = None) -> DispersionScan:
    """Eigenvalues of ``M^{-1/2} P(theta) M^{-1/2}`` on the uniform torus grid."""
    grid = grid or default_grid(stencil.dim)
    if grid < 1:
        raise ValueError("grid must be >= 1")
    thetas = torus_grid(stencil.dim, grid)
    P = eval_on_grid(stencil.blocks, stencil.m, thetas)
    herm = np.linalg.norm(P - np.conj(np.swapaxes(P, 1, 2)), axis=(1, 2))
    scale = np.maximum(np.linalg.norm(P, axis=(1, 2)), np.finfo(float).tiny)
    hermiticity = float(np.max(herm / scale)) if len(P) else 0.0
    w = 1.0 / np.sqrt(masses.cell_dof_masses)
    Pw = w[None, :, None] * P * w[None, None, :]
    Pw = 0.5 * (Pw + np.conj(np.swapaxes(Pw, 1, 2)))
    eig = np.linalg.eigvalsh(Pw)
    return DispersionScan(thetas, eig, float(eig.min()), float(eig.max()), hermiticity)


def debye_frequency(stencil: Stencil, masses: MassModel, grid: int | None = None,
                    rel_tol: float = 1e-9) -> float:
    """Square root of the largest mass-weighted eigenvalue over the torus.

    Raises InstabilityError when the scan finds an eigenvalue below
    ``-rel_tol * max_eig``.
    """
    scan = dispersion_scan(stencil, masses, grid)
    if scan.min_eig < -rel_tol * max(scan.max_eig, 0.0):
        raise InstabilityError(
            f"dynamical matrix is indefinite: min eigenvalue {scan.min_eig:.6g}")
    return float(np.sqrt(max(scan.max_eig, 0.0)))


# --------------------------------------------------------------------------
# site sets and the real-space operator

def build_site_set(shape, boundary: str = "fixed", mask=None) -> SiteSet:
    """Box ``[0, L_1) x ... x [0, L_d)`` minus the optional ``mask`` sites.

    ``mask`` is either a boolean array of the box shape (True = vacancy)
    or an iterable of multi-indices to remove.
    """
    shape = tuple(int(x) for x in np.atleast_1d(shape))
    if any(x <= 0 for x in shape):
        raise ValueError("box extents must be positive")
    keep = np.ones(shape, dtype=bool)
    if mask is not None:
        mask_arr = np.asarray(mask)
        if mask_arr.dtype == bool and mask_arr.shape == shape:
            removed = mask_arr
        else:
            removed = np.zeros(shape, dtype=bool)
            pts = np.atleast_2d(mask_arr).astype(int)
            if pts.size:
                if pts.shape[1] != len(shape) or np.any(pts < 0) or np.any(pts >= shape):
                    raise ValueError("mask sites must lie inside the box")
                removed[tuple(pts.T)] = True
        if removed.any():
            if boundary == "periodic":
                raise ValueError("periodic boundary cannot be combined with a vacancy mask")
            keep &= ~removed
    sites = np.argwhere(keep)
    periods = shape if boundary == "periodic" else None
    return SiteSet(sites, boundary, periods)


def square_mask(shape, lower, size) -> np.ndarray:
    """Boolean mask removing the square ``lower + [0, size)^d``."""
    mask = np.zeros(tuple(shape), dtype=bool)
    sl = tuple(slice(lo, lo + s) for lo, s in zip(lower, np.broadcast_to(size, len(shape))))
    mask[sl] = True
    return mask


def pad_site_set(sites: SiteSet, q: int) -> SiteSet:
    """Union of ``k + alpha`` over ``k`` in the set and ``alpha`` in ``[0, q]^d``."""
    if sites.boundary == "periodic" or q == 0 or len(sites) == 0:
        return sites
    pts = sites.sites
    shifts = np.array(list(itertools.product(range(q + 1), repeat=sites.dim)))
    lo = pts.min(axis=0)
    hi = pts.max(axis=0) + q
    occupied = np.zeros(tuple(hi - lo + 1), dtype=bool)
    for alpha in shifts:
        occupied[tuple((pts + alpha - lo).T)] = True
    return SiteSet(np.argwhere(occupied) + lo, "fixed")


def assemble_D(stencil: Stencil, sites: SiteSet) -> sp.csr_matrix:
    """Sparse ``|S| m x |S| m`` matrix with block ``(j, k) = D_{0, k-j}``.

    Fixed boundary drops couplings to sites outside the set; periodic
    boundary wraps offsets (and sums blocks that alias on small boxes).
    """
    if sites.dim != stencil.dim:
        raise ValueError("stencil and site set dimensions differ")
    m = stencil.m
    n = len(sites) * m
    rows, cols, vals = [], [], []
    ii, jj = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    for off in stencil.offsets():
        block = stencil.blocks[off]
        if not np.any(block):
            continue
        target = sites.shifted_index(off)
        src = np.nonzero(target >= 0)[0]
        dst = target[src]
        rows.append((src[:, None, None] * m + ii[None]).ravel())
        cols.append((dst[:, None, None] * m + jj[None]).ravel())
        vals.append(np.broadcast_to(block, (len(src), m, m)).ravel())
    if not rows:
        return sp.csr_matrix((n, n))
    D = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n)).tocsr()
    D.sum_duplicates()
    D.eliminate_zeros()
    return D
