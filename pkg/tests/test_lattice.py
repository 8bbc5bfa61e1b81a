import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from lattice_tdse.lattice import (InstabilityError, MassModel, StencilError, assemble_D,
                                  build_site_set, debye_frequency, dispersion_scan,
                                  eval_dynamical_matrix, load_stencil, pad_site_set,
                                  square_mask, stencil_from_dict, torus_grid)

NNN_DOC = {"dim": 1, "cutoff": 2, "atoms_per_cell": 1, "masses": [1.0],
           "blocks": [{"offset": [-2], "matrix": [1 / 6]}, {"offset": [-1], "matrix": [-1.0]},
                      {"offset": [0], "matrix": [5 / 3]}, {"offset": [1], "matrix": [-1.0]},
                      {"offset": [2], "matrix": [1 / 6]}]}


def scalar_doc(coeffs, cutoff=None):
    p = max(abs(k) for k in coeffs) if cutoff is None else cutoff
    return {"dim": 1, "cutoff": p, "atoms_per_cell": 1, "masses": [1.0],
            "blocks": [{"offset": [k], "matrix": [v]} for k, v in coeffs.items()]}


def nnn_closed_form(theta):
    return 2 * (1 - np.cos(theta)) - (1 - np.cos(2 * theta)) / 3


def random_stencil_doc(seed, dim, n_atoms, cutoff):
    """Random symmetric stencil document (not necessarily stable)."""
    rng = np.random.default_rng(seed)
    m = dim * n_atoms
    offs = [tuple(o) for o in np.array(np.meshgrid(*[np.arange(-cutoff, cutoff + 1)] * dim,
                                                   indexing="ij")).reshape(dim, -1).T]
    blocks = {}
    for o in offs:
        neg = tuple(-x for x in o)
        if neg in blocks:
            blocks[o] = blocks[neg].T
        elif o == neg:
            a = rng.normal(size=(m, m))
            blocks[o] = a + a.T
        else:
            blocks[o] = rng.normal(size=(m, m))
    return {"dim": dim, "cutoff": cutoff, "atoms_per_cell": n_atoms,
            "masses": list(rng.uniform(0.5, 2.0, size=n_atoms)),
            "blocks": [{"offset": list(o), "matrix": b.ravel().tolist()} for o, b in blocks.items()]}


stencil_docs = st.builds(random_stencil_doc, st.integers(0, 2 ** 32 - 1), st.integers(1, 2),
                         st.integers(1, 2), st.integers(0, 2))


# ---------------------------------------------------------------- loading

def test_load_nnn_document():
    stencil, masses = load_stencil(NNN_DOC)
    assert (stencil.dim, stencil.cutoff, stencil.m) == (1, 2, 1)
    assert stencil.block((0,))[0, 0] == pytest.approx(5 / 3)
    assert stencil.block((1,))[0, 0] == -1.0
    assert stencil.block((-2,))[0, 0] == pytest.approx(1 / 6)
    assert stencil.symmetrization_correction == 0.0
    assert masses.cell_masses == (1.0,)


def test_preset_matches_document():
    a, _ = load_stencil("nnn-chain")
    b, _ = load_stencil(NNN_DOC)
    for off in b.offsets():
        assert np.array_equal(a.block(off), b.block(off))
    c, _ = load_stencil("presets/nnn-chain")
    assert c.offsets() == a.offsets()


def test_single_block_cutoff_zero():
    stencil, _ = load_stencil(scalar_doc({0: 3.0}, cutoff=0))
    assert stencil.cutoff == 0
    assert stencil.offsets() == [(0,)]


@pytest.mark.parametrize("doc, message", [
    (scalar_doc({0: 2.0, 1: -1.0}), "partner"),
    (scalar_doc({0: 2.0, 2: 1.0, -2: 1.0}, cutoff=1), "cutoff"),
    ({"dim": 1, "cutoff": 0, "atoms_per_cell": 2, "masses": [1, 1],
      "blocks": [{"offset": [0], "matrix": [[1, 0, 0], [0, 1, 0]]}]}, "square"),
    ({"dim": 1, "cutoff": 0, "atoms_per_cell": 2, "masses": [1, 1],
      "blocks": [{"offset": [0], "matrix": [1.0]}]}, "expected m=2"),
    ({"dim": 1, "cutoff": 0, "atoms_per_cell": 1, "masses": [1.0],
      "blocks": [{"offset": [0], "matrix": [1.0]}, {"offset": [0], "matrix": [1.0]}]}, "duplicate"),
    ({"dim": 1, "atoms_per_cell": 1, "blocks": []}, "malformed"),
])
def test_malformed_documents(doc, message):
    with pytest.raises(StencilError, match=message):
        load_stencil(doc)


def test_asymmetry_rejected_and_tiny_asymmetry_symmetrized():
    doc = {"dim": 1, "cutoff": 1, "atoms_per_cell": 2, "masses": [1, 1],
           "blocks": [{"offset": [0], "matrix": [2, -1, -1, 2]},
                      {"offset": [1], "matrix": [0, 0, -1, 0]},
                      {"offset": [-1], "matrix": [0, -0.5, 0, 0]}]}
    with pytest.raises(StencilError, match="violate"):
        load_stencil(doc)
    doc["blocks"][2]["matrix"] = [0, -1 - 1e-12, 0, 0]
    stencil, _ = load_stencil(doc)
    assert 0 < stencil.symmetrization_correction < 1e-11
    assert np.array_equal(stencil.block((-1,)), stencil.block((1,)).T)


@given(stencil_docs)
def test_loaded_stencil_has_exact_transpose_partners(doc):
    stencil, _ = load_stencil(doc)
    for off in stencil.offsets():
        neg = tuple(-x for x in off)
        assert np.array_equal(stencil.block(neg), stencil.block(off).T)


# ---------------------------------------------------------------- Fourier side

@given(st.floats(0, 2 * np.pi))
def test_nnn_symbol_is_closed_form_dispersion(theta):
    stencil, _ = load_stencil("nnn-chain")
    val = eval_dynamical_matrix(stencil, [theta])
    assert val.shape == (1, 1)
    assert val[0, 0].real == pytest.approx(5 / 3 - 2 * np.cos(theta) + np.cos(2 * theta) / 3, abs=1e-13)
    assert val[0, 0].real == pytest.approx(nnn_closed_form(theta), abs=1e-13)
    assert abs(val[0, 0].imag) < 1e-14


@given(stencil_docs)
def test_symbol_at_zero_is_block_sum(doc):
    stencil, _ = load_stencil(doc)
    val = eval_dynamical_matrix(stencil, np.zeros(stencil.dim))
    total = sum(stencil.block(o) for o in stencil.offsets())
    assert np.allclose(val, total, atol=1e-12)
    assert np.allclose(val, val.T)


def test_diatomic_symbol_at_pi():
    stencil, _ = load_stencil("diatomic")
    # brute force: D0 + D1 e^{-i pi} + D-1 e^{i pi}
    expected = np.array([[2.0, 0.0], [0.0, 2.0]])
    assert np.allclose(eval_dynamical_matrix(stencil, [np.pi]), expected, atol=1e-14)


def test_dimension_mismatch():
    stencil, _ = load_stencil("nnn-chain")
    with pytest.raises(ValueError):
        eval_dynamical_matrix(stencil, [0.1, 0.2])


@given(stencil_docs, st.integers(0, 2 ** 32 - 1))
def test_hermiticity(doc, seed):
    stencil, _ = load_stencil(doc)
    theta = np.random.default_rng(seed).uniform(0, 2 * np.pi, stencil.dim)
    P = eval_dynamical_matrix(stencil, theta)
    assert np.linalg.norm(P - P.conj().T) <= 1e-12 * max(np.linalg.norm(P), 1e-300)


@given(stencil_docs.filter(lambda d: d["dim"] == 1))
def test_fourier_consistency(doc):
    stencil, _ = load_stencil(doc)
    G = 2 * stencil.cutoff + 3
    thetas = torus_grid(1, G)
    vals = np.array([eval_dynamical_matrix(stencil, th) for th in thetas])
    for off in stencil.offsets():
        rec = np.mean(vals * np.exp(1j * thetas[:, 0] * off[0])[:, None, None], axis=0)
        assert np.allclose(rec, stencil.block(off), atol=1e-10)


# ---------------------------------------------------------------- spectra

def test_nnn_dispersion_scan():
    stencil, masses = load_stencil("nnn-chain")
    scan = dispersion_scan(stencil, masses, 256)
    theta = 2 * np.pi * np.arange(256) / 256
    assert scan.max_eig == pytest.approx(np.max(nnn_closed_form(theta)), abs=1e-12)
    assert scan.min_eig >= -1e-12
    assert np.allclose(scan.eigenvalues[:, 0], nnn_closed_form(theta), atol=1e-12)
    assert scan.hermiticity_residual <= 1e-12


def test_zero_stencil_scan():
    stencil, masses = load_stencil({"dim": 2, "cutoff": 0, "atoms_per_cell": 1,
                                    "masses": [1.0], "blocks": []})
    scan = dispersion_scan(stencil, masses, 8)
    assert scan.eigenvalues.shape == (64, 2)
    assert np.all(scan.eigenvalues == 0)
    assert debye_frequency(stencil, masses, 8) == 0.0


def test_diatomic_branches():
    stencil, masses = load_stencil("diatomic")
    assert masses.cell_masses == (1.0, 1.5)
    scan = dispersion_scan(stencil, masses, 128)
    assert scan.eigenvalues.shape == (128, 2)
    assert scan.min_eig >= -1e-12
    assert np.all(np.diff(scan.eigenvalues, axis=1) >= 0)
    # optical top at theta = 0: 5/3 + sqrt(1/9 + 8/3) = 10/3 (by hand)
    assert scan.max_eig == pytest.approx(10 / 3, abs=1e-12)
    assert scan.eigenvalues[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_debye_frequencies():
    stencil, masses = load_stencil("nnn-chain")
    # max of 2(1 - cos t) - (1 - cos 2t)/3 is 4, at t = pi
    assert debye_frequency(stencil, masses) == pytest.approx(2.0, abs=1e-12)
    stencil, masses = load_stencil("square-2d")
    # hand computation at theta = (pi, 0): eigenvalues of [[7, 1.5], [1.5, 3]]
    assert debye_frequency(stencil, masses) == pytest.approx(np.sqrt(7.5), abs=1e-12)


@given(st.floats(0.01, 100), st.floats(0.01, 100))
def test_single_oscillator_debye(k, mu):
    doc = scalar_doc({0: k}, cutoff=0)
    doc["masses"] = [mu]
    stencil, masses = load_stencil(doc)
    assert debye_frequency(stencil, masses, 4) == pytest.approx(np.sqrt(k / mu), rel=1e-12)


def test_instability_gate():
    # P(theta) = 0.5 + cos(theta): min -0.5, max 1.5
    stencil, masses = load_stencil(scalar_doc({0: 0.5, 1: 0.5, -1: 0.5}))
    assert dispersion_scan(stencil, masses, 64).min_eig == pytest.approx(-0.5)
    with pytest.raises(InstabilityError):
        debye_frequency(stencil, masses, 64)
    stencil, masses = load_stencil("nnn-chain-altsign")
    with pytest.raises(InstabilityError):
        debye_frequency(stencil, masses)


@given(st.floats(-1e-3, 1e-3))
def test_stability_gate_is_threshold_on_min_eig(shift):
    stencil, masses = load_stencil(scalar_doc({0: 2.0 + shift, 1: -1.0, -1: -1.0}))
    scan = dispersion_scan(stencil, masses, 64)
    unstable = scan.min_eig < -1e-9 * scan.max_eig
    if unstable:
        with pytest.raises(InstabilityError):
            debye_frequency(stencil, masses, 64)
    else:
        debye_frequency(stencil, masses, 64)


# ---------------------------------------------------------------- sites

def test_chain_sites():
    sites = build_site_set([127], "fixed")
    assert len(sites) == 127
    assert sites.boundary == "fixed"


def test_box_with_square_vacancy():
    mask = square_mask((128, 32), (60, 13), 6)
    sites = build_site_set((128, 32), "fixed", mask)
    assert len(sites) == 128 * 32 - 36
    assert sites.index_of(np.array([[62, 15]]))[0] == -1
    plain = build_site_set((128, 32), "fixed")
    empty = build_site_set((128, 32), "fixed", np.zeros((128, 32), bool))
    assert np.array_equal(plain.sites, empty.sites)


def test_lexicographic_order():
    sites = build_site_set((3, 4), "fixed", [[1, 2]])
    as_tuples = [tuple(s) for s in sites.sites]
    assert as_tuples == sorted(as_tuples)
    assert all(sites.index_of(np.array([s]))[0] == i for i, s in enumerate(as_tuples))


def test_periodic_with_mask_rejected():
    with pytest.raises(ValueError, match="periodic"):
        build_site_set((4, 4), "periodic", [[0, 0]])


def test_bad_extents():
    with pytest.raises(ValueError):
        build_site_set([0], "fixed")


def test_periodic_wraps_indices():
    sites = build_site_set((4, 3), "periodic")
    assert sites.index_of(np.array([[4, 3]]))[0] == sites.index_of(np.array([[0, 0]]))[0]


@pytest.mark.parametrize("shape, q, expected", [((10,), 2, 12), ((10,), 0, 10), ((3, 3), 1, 16)])
def test_padding_sizes(shape, q, expected):
    sites = build_site_set(shape, "fixed")
    padded = pad_site_set(sites, q)
    assert len(padded) == expected
    if len(shape) == 1:
        assert np.array_equal(padded.sites[:, 0], np.arange(expected))


@given(st.integers(0, 2 ** 32 - 1), st.integers(0, 2))
def test_padding_is_brute_force_union(seed, q):
    rng = np.random.default_rng(seed)
    mask = rng.random((5, 4)) < 0.3
    sites = build_site_set((5, 4), "fixed", mask)
    padded = pad_site_set(sites, q)
    union = {(int(a) + i, int(b) + j) for a, b in sites.sites for i in range(q + 1) for j in range(q + 1)}
    assert {tuple(s) for s in padded.sites} == union
    assert {tuple(s) for s in sites.sites} <= union


# ---------------------------------------------------------------- assembly

def test_nnn_chain_operator_L5():
    stencil, _ = load_stencil("nnn-chain")
    D = assemble_D(stencil, build_site_set([5])).toarray()
    a, b, c = 5 / 3, -1.0, 1 / 6
    expected = np.array([[a, b, c, 0, 0], [b, a, b, c, 0], [c, b, a, b, c],
                         [0, c, b, a, b], [0, 0, c, b, a]])
    assert np.allclose(D, expected, atol=1e-15)


def test_zero_stencil_operator():
    stencil, _ = load_stencil({"dim": 1, "cutoff": 0, "atoms_per_cell": 1, "masses": [1], "blocks": []})
    assert assemble_D(stencil, build_site_set([6])).nnz == 0


def test_periodic_nn_circulant():
    stencil, _ = load_stencil("nn-chain")
    D = assemble_D(stencil, build_site_set([4], "periodic")).toarray()
    row = np.array([2.0, -1.0, 0.0, -1.0])
    expected = np.array([np.roll(row, k) for k in range(4)])
    assert np.array_equal(D, expected)


@given(stencil_docs, st.sampled_from(["fixed", "periodic"]))
def test_assembled_operator_is_bit_symmetric(doc, boundary):
    stencil, _ = load_stencil(doc)
    L = 2 * stencil.cutoff + 2
    D = assemble_D(stencil, build_site_set([L] * stencil.dim, boundary))
    assert sp.isspmatrix_csr(D) or isinstance(D, sp.csr_array)
    assert (D != D.T).nnz == 0


def test_vacancy_couplings_dropped():
    stencil, _ = load_stencil("square-2d")
    sites = build_site_set((4, 4), "fixed", [[1, 1]])
    D = assemble_D(stencil, sites)
    assert D.shape == (30, 30)
    full = assemble_D(stencil, build_site_set((4, 4), "fixed")).toarray()
    keep = np.repeat(np.array([i for i in range(16) if i != 5]), 2) * 2
    keep = keep + np.tile([0, 1], 15)
    assert np.array_equal(D.toarray(), full[np.ix_(keep, keep)])


@pytest.mark.parametrize("name, L", [("nnn-chain", 9), ("diatomic", 8), ("square-2d", 6)])
def test_periodic_spectrum_matches_symbol(name, L):
    stencil, _ = load_stencil(name)
    sites = build_site_set([L] * stencil.dim, "periodic")
    eig = np.sort(np.linalg.eigvalsh(assemble_D(stencil, sites).toarray()))
    grid = torus_grid(stencil.dim, L)
    sym = np.sort(np.concatenate([np.linalg.eigvalsh(eval_dynamical_matrix(stencil, th))
                                  for th in grid]))
    assert np.allclose(eig, sym, atol=1e-8)


def test_mass_model():
    mm = MassModel((1.0, 1.5), 2)
    assert np.array_equal(mm.cell_dof_masses, [1.0, 1.0, 1.5, 1.5])
    assert np.array_equal(mm.dof_masses(2), [1, 1, 1.5, 1.5, 1, 1, 1.5, 1.5])
    with pytest.raises(ValueError):
        MassModel((1.0, 0.0), 1)


def test_stencil_from_dict_roundtrip():
    from lattice_tdse.lattice import stencil_to_dict
    stencil, masses = load_stencil("diatomic")
    again, m2 = stencil_from_dict(stencil_to_dict(stencil, masses))
    assert m2 == masses
    for off in stencil.offsets():
        assert np.array_equal(again.block(off), stencil.block(off))
