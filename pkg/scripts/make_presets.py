"""Regenerate the JSON stencil presets shipped in ``lattice_tdse/presets``.

The ``square-2d`` stencil is synthetic: it is built as a sum of two
squares from fixed bond blocks, so it is exactly factorizable at rank 2,
degree 1.  Its factors are written alongside as ``square-2d.factor.json``.
"""

import json
from pathlib import Path

import numpy as np

from lattice_tdse.fejer_riesz import (Factorization, factorization_to_dict,
                                      synthesize_polynomial)

OUT = Path(__file__).resolve().parents[1] / "src" / "lattice_tdse" / "presets"


def scalar_doc(coeffs, masses=(1.0,)):
    p = max(abs(k) for k in coeffs)
    return {"dim": 1, "cutoff": p, "atoms_per_cell": 1, "masses": list(masses),
            "blocks": [{"offset": [k], "matrix": [float(v)]} for k, v in sorted(coeffs.items())]}


def write(name, doc):
    (OUT / f"{name}.json").write_text(json.dumps(doc, indent=2) + "\n")


def main():
    write("nnn-chain", scalar_doc({-2: 1 / 6, -1: -1.0, 0: 5 / 3, 1: -1.0, 2: 1 / 6}))
    write("nnn-chain-altsign", scalar_doc({-2: -1 / 6, -1: 1.0, 0: 5 / 3, 1: 1.0, 2: -1 / 6}))
    write("nn-chain", scalar_doc({-1: -1.0, 0: 2.0, 1: -1.0}))
    dm1 = np.array([[0.0, -1.0], [0.0, 0.0]])
    write("diatomic", {
        "dim": 1, "cutoff": 1, "atoms_per_cell": 2, "masses": [1.0, 1.5],
        "blocks": [{"offset": [-1], "matrix": dm1.ravel().tolist()},
                   {"offset": [0], "matrix": [2.0, -1.0, -1.0, 2.0]},
                   {"offset": [1], "matrix": dm1.T.ravel().tolist()}],
    })

    # bonds: A along x, B along y, C along (1,1), G along (1,-1)
    A = np.array([[1.0, 0.0], [0.0, 0.5]])
    B = np.array([[0.5, 0.0], [0.0, 1.0]])
    C = np.array([[0.25, 0.25], [0.25, 0.25]])
    G = np.array([[0.25, -0.25], [-0.25, 0.25]])
    z = np.zeros((2, 2))
    # Q1(z) = A (1 - z1) + C (1 - z1 z2);  Q2(z) = B (1 - z2) + G (z1 - z2)
    q1 = {(0, 0): A + C, (0, 1): z, (1, 0): -A, (1, 1): -C}
    q2 = {(0, 0): B, (0, 1): -B - G, (1, 0): G, (1, 1): z}
    F = Factorization(2, 2, 1, [q1, q2], method="synthetic")
    P = synthesize_polynomial(F)
    blocks = [{"offset": list(l), "matrix": P.coeffs[l].ravel().tolist()}
              for l in sorted(P.coeffs) if np.any(P.coeffs[l])]
    write("square-2d", {"dim": 2, "cutoff": 1, "atoms_per_cell": 1, "masses": [1.0],
                        "blocks": blocks})
    F.certify(P)
    (OUT / "square-2d.factor.json").write_text(json.dumps(factorization_to_dict(F), indent=2) + "\n")

    # reference factors printed in the literature for the two 1D examples
    s3 = 1 / np.sqrt(3)
    nnn = Factorization(1, 1, 2, [{(0,): np.array([[(1 + s3) / 2]]), (1,): np.array([[-1.0]]),
                                   (2,): np.array([[(1 - s3) / 2]])}], method="closed-form")
    dia = Factorization(1, 2, 1, [{(0,): np.array([[1.0, 0.0], [1.0, -1.0]]),
                                   (1,): np.array([[0.0, -1.0], [0.0, 0.0]])}], method="closed-form")
    nn = Factorization(1, 1, 1, [{(0,): np.array([[1.0]]), (1,): np.array([[-1.0]])}],
                       method="closed-form")
    for name, fac in (("nnn-chain", nnn), ("diatomic", dia), ("nn-chain", nn)):
        doc = json.loads((OUT / f"{name}.json").read_text())
        from lattice_tdse.fejer_riesz import LaurentPolynomial
        from lattice_tdse.lattice import stencil_from_dict
        fac.certify(LaurentPolynomial.from_stencil(stencil_from_dict(doc)[0]))
        (OUT / f"{name}.factor.json").write_text(json.dumps(factorization_to_dict(fac), indent=2) + "\n")


if __name__ == "__main__":
    main()
