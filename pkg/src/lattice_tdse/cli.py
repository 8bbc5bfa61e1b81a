"""Command-line interface.

Exit codes: 0 pass, 2 verification failure, 3 convergence failure, 4 I/O.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .experiments import (FACTOR_TOL, PRESETS, Pipeline, factorization_protocol,
                          gaussian_packet, oracle_report, provenance, run_oracle, run_preset,
                          run_tdse, snapshot_times, write_snapshot_csv)
from .fejer_riesz import (FactorizationError, LaurentPolynomial, SosOptions,
                          factorization_to_dict, load_factorization, parseval_bound_check,
                          residual_coefficients, residual_torus, write_history_csv)
from .lattice import (InstabilityError, StencilError, assemble_D, build_site_set,
                      default_grid, dispersion_scan, load_stencil, square_mask)
from .qassembly import (QAssemblyError, RecoveryError, assemble_Q, export_matrix_market,
                        verify_QTQ)
from .tdse import ClassicalState, EvolutionConfig, EvolutionError
from .verlet import VerletInstability

EXIT_OK, EXIT_VERIFY, EXIT_CONVERGE, EXIT_IO = 0, 2, 3, 4

# documented pass thresholds for ``verify``
VERIFY_COEFF_TOL = 1e-7
VERIFY_TORUS_TOL = 1e-7
VERIFY_QTQ_TOL = 1e-8
PSD_REL_TOL = 1e-9
SIMULATE_GATE_TOL = 1e-6


class InputError(Exception):
    pass


def _load_stencil(source):
    try:
        return load_stencil(source)
    except (OSError, json.JSONDecodeError, StencilError, UnicodeDecodeError) as exc:
        raise InputError(f"cannot read stencil {source!r}: {exc}") from exc


def _load_factorization(path):
    try:
        return load_factorization(path)
    except (OSError, json.JSONDecodeError, FactorizationError) as exc:
        raise InputError(f"cannot read factorization {path!r}: {exc}") from exc


def _stem(source) -> str:
    name = Path(str(source)).name
    return name[:-5] if name.endswith(".json") else name


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _geometry(stencil, args):
    shape = args.shape or [8] * stencil.dim
    if len(shape) == 1 and stencil.dim > 1:
        shape = shape * stencil.dim
    if len(shape) != stencil.dim:
        raise InputError(f"--shape needs {stencil.dim} extents")
    mask = None
    if getattr(args, "vacancy", None):
        *lower, size = args.vacancy
        if len(lower) != stencil.dim:
            raise InputError(f"--vacancy needs {stencil.dim} corner coordinates and a size")
        mask = square_mask(shape, lower, size)
    try:
        return build_site_set(shape, args.boundary, mask)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


# --------------------------------------------------------------------------
# subcommands

def cmd_factorize(args) -> int:
    stencil, _ = _load_stencil(args.stencil)
    P = LaurentPolynomial.from_stencil(stencil)
    opts = SosOptions(seed=args.seed, restarts=args.restarts, max_iterations=args.max_iter)
    best, attempts = factorization_protocol(P, args.r, args.q, args.sweep, opts)
    print(f"{'method':<8} {'r':>2} {'q':>2} {'residual_coeff':>15} {'residual_torus':>15} "
          f"{'iters':>6} {'seconds':>8}  status")
    for a in attempts:
        F = a.factorization
        print(f"{a.method:<8} {a.rank:>2} {a.degree:>2} {F.residual_coeff:>15.3e} "
              f"{F.residual_torus:>15.3e} {max(len(F.history) - 1, 0):>6} {a.seconds:>8.3f}  "
              f"{'ok' if a.ok else 'FAILED'} {F.message}")
    out = _out_dir(args)
    stem = _stem(args.stencil)
    doc = factorization_to_dict(best)
    doc["provenance"] = provenance("factorize", {"stencil": str(args.stencil), "r": args.r,
                                                 "q": args.q, "sweep": args.sweep,
                                                 "restarts": args.restarts}, args.seed)
    ok = best.rank > 0 and best.residual_coeff <= FACTOR_TOL
    try:
        (out / f"{stem}.factor.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
        write_history_csv(best, out / f"{stem}.history.csv")
    except OSError as exc:
        raise InputError(str(exc)) from exc
    if best.dim == 1 and best.m == 1 and best.rank == 1:
        coeffs = ", ".join(f"{best.block(0, (j,))[0, 0]:.6f}" for j in range(best.degree + 1))
        print(f"coefficients: ({coeffs})")
    print(f"result: r={best.rank} q={best.degree} residual={best.residual_coeff:.3e} "
          f"{'converged' if ok else 'NOT converged'} -> {out / (stem + '.factor.json')}")
    return EXIT_OK if ok else EXIT_CONVERGE


def verification_report(stencil, masses, F, sites, grid=None) -> tuple[dict, bool]:
    P = LaurentPolynomial.from_stencil(stencil)
    if (F.dim, F.m) != (P.dim, P.m):
        raise InputError(f"factorization is d={F.dim}, m={F.m}; stencil is d={P.dim}, m={P.m}")
    grid = grid or default_grid(P.dim)
    rep = {}
    rep["residual_coefficients"] = residual_coefficients(P, F)
    rep["residual_torus"] = residual_torus(P, F, max(grid, 2 * F.degree + 2))
    qop = assemble_Q(F, sites, stencil, check=False)
    rep["qtq_residual"] = verify_QTQ(qop, assemble_D(stencil, sites))
    scan = dispersion_scan(stencil, masses, grid)
    rep["psd_min_eigenvalue"] = scan.min_eig
    rep["max_eigenvalue"] = scan.max_eig
    stable = scan.min_eig >= -PSD_REL_TOL * max(scan.max_eig, 0.0)
    rep["omega_debye"] = float(np.sqrt(max(scan.max_eig, 0.0))) if stable else float("nan")
    pr = parseval_bound_check(P, F, masses, grid)
    rep["parseval"] = pr.as_dict()
    checks = {
        "residual_coefficients": rep["residual_coefficients"] <= VERIFY_COEFF_TOL,
        "residual_torus": rep["residual_torus"] <= VERIFY_TORUS_TOL,
        "qtq": rep["qtq_residual"] <= VERIFY_QTQ_TOL,
        "psd": stable,
        "parseval_bound": pr.holds,
    }
    rep["checks"] = checks
    return rep, all(checks.values())


def cmd_verify(args) -> int:
    stencil, masses = _load_stencil(args.stencil)
    F = _load_factorization(args.factorization)
    sites = _geometry(stencil, args)
    rep, ok = verification_report(stencil, masses, F, sites, args.grid)
    c = rep["checks"]
    mark = {True: "pass", False: "FAIL"}
    print(f"residual_coefficients  {rep['residual_coefficients']:.3e}  (<= {VERIFY_COEFF_TOL:g})  "
          f"{mark[c['residual_coefficients']]}")
    print(f"residual_torus         {rep['residual_torus']:.3e}  (<= {VERIFY_TORUS_TOL:g})  "
          f"{mark[c['residual_torus']]}")
    print(f"Q^T Q vs D ({len(sites)} sites, {sites.boundary})  {rep['qtq_residual']:.3e}  "
          f"(<= {VERIFY_QTQ_TOL:g})  {mark[c['qtq']]}")
    print(f"PSD scan minimum       {rep['psd_min_eigenvalue']:.3e}  {mark[c['psd']]}")
    print(f"omega_D                {rep['omega_debye']:.6g}")
    pr = rep["parseval"]
    print(f"Parseval bound         {pr['block_norm_sq']:.6g} <= {pr['bound']:.6g}  "
          f"{mark[c['parseval_bound']]}")
    print(f"Debye comparison       {pr['alpha_sum']:.6g} vs alpha_D {pr['alpha_debye']:.6g}  "
          f"(report only)")
    if args.out:
        out = _out_dir(args)
        (out / "verify_report.json").write_text(json.dumps(rep, indent=2) + "\n", encoding="utf-8")
        if args.mtx:
            try:
                export_matrix_market(assemble_Q(F, sites, stencil, check=False),
                                     assemble_D(stencil, sites), out / "lattice")
            except OSError as exc:
                raise InputError(str(exc)) from exc
            print(f"wrote {out / 'lattice_Q.mtx'} and {out / 'lattice_D.mtx'}")
    print("verification " + ("passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_VERIFY


def _initial_state(stencil, masses, sites, args, rng):
    n = len(sites) * stencil.m
    if args.init == "packet":
        center = args.center or [len(sites) / 4 if stencil.dim == 1 else 16.0] + \
            [(max(sites.sites[:, i]) + 2) / 2 for i in range(1, stencil.dim)]
        return gaussian_packet(stencil, masses, sites, args.k0, args.sigma, center,
                               velocity=args.velocity)
    if args.init == "random":
        return ClassicalState(rng.normal(size=n), rng.normal(size=n))
    try:
        data = np.load(args.init)
        cs = ClassicalState(np.asarray(data["u"], float).ravel(), np.asarray(data["v"], float).ravel())
    except (OSError, KeyError, ValueError) as exc:
        raise InputError(f"cannot read initial state {args.init!r}: {exc}") from exc
    if cs.u.size != n:
        raise InputError(f"initial state has {cs.u.size} entries, geometry needs {n}")
    return cs


def cmd_simulate(args) -> int:
    stencil, masses = _load_stencil(args.stencil)
    F = _load_factorization(args.factorization)
    sites = _geometry(stencil, args)
    try:
        pipe = Pipeline.build(stencil, masses, sites, F, gate_tol=SIMULATE_GATE_TOL)
    except QAssemblyError as exc:
        print(f"gate failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    rng = np.random.default_rng(args.seed)
    cs0 = _initial_state(stencil, masses, sites, args, rng)
    times = snapshot_times(args.T, args.snapshot_every)
    cfg = EvolutionConfig(args.method, args.dt, trotter_order=args.order)
    try:
        snaps, diag, _ = run_tdse(pipe, cs0, times, cfg, args.shots, rng)
    except RecoveryError as exc:
        print(f"simulation failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except EvolutionError as exc:
        print(f"simulation failed: {exc}", file=sys.stderr)
        return EXIT_CONVERGE
    params = {k: v for k, v in vars(args).items() if k not in ("func", "out")}
    prov = provenance("simulate", params, args.seed)
    out = _out_dir(args)
    write_snapshot_csv(out / "snapshots.csv", prov, snaps, stencil.m)
    print(f"{len(sites)} sites, energy {diag['energy']:.10g}, "
          f"max |norm - 1| {diag['max_norm_deviation']:.2e}, "
          f"max energy deviation {diag['max_energy_deviation']:.2e}")
    if args.oracle:
        try:
            ref = run_oracle(pipe, cs0, times, args.oracle_dt)
        except VerletInstability as exc:
            print(f"oracle failed: {exc}", file=sys.stderr)
            return EXIT_CONVERGE
        rep = oracle_report(snaps, ref)
        write_snapshot_csv(out / "oracle_snapshots.csv", prov, ref, stencil.m)
        (out / "oracle_report.json").write_text(json.dumps(dict(provenance=prov, **rep), indent=2)
                                                + "\n", encoding="utf-8")
        print(f"oracle: max relative L2 velocity difference {rep['max_relative_velocity_error']:.3e}")
    print(f"wrote {out / 'snapshots.csv'}")
    return EXIT_OK


def cmd_dispersion(args) -> int:
    stencil, masses = _load_stencil(args.stencil)
    grid = args.grid or default_grid(stencil.dim)
    scan = dispersion_scan(stencil, masses, grid)
    stable = scan.min_eig >= -PSD_REL_TOL * max(scan.max_eig, 0.0)
    print(f"grid {grid}^{stencil.dim}: min eigenvalue {scan.min_eig:.6g}, "
          f"max eigenvalue {scan.max_eig:.6g}")
    if stable:
        print(f"omega_D = {np.sqrt(max(scan.max_eig, 0.0)):.10g}")
    else:
        print("dynamical matrix is indefinite: lattice is unstable")
    if args.out:
        out = _out_dir(args)
        d, m = stencil.dim, stencil.m
        cols = [f"theta{i}" for i in range(d)] + [f"omega2_{b}" for b in range(m)]
        lines = [",".join(cols)]
        for th, ev in zip(scan.thetas, scan.eigenvalues):
            lines.append(",".join(f"{x:.17g}" for x in np.concatenate([th, ev])))
        prov = provenance("dispersion", {"stencil": str(args.stencil), "grid": grid}, None)
        (out / f"{_stem(args.stencil)}.dispersion.csv").write_text(
            "# " + json.dumps(prov, sort_keys=True) + "\n" + "\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK if stable else EXIT_VERIFY


def _parse_overrides(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise InputError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def cmd_preset(args) -> int:
    if args.action == "list":
        for name, preset in PRESETS.items():
            print(f"{name:<18} {preset.description}")
        return EXIT_OK
    if args.name not in PRESETS:
        print(f"unknown preset {args.name!r}", file=sys.stderr)
        return EXIT_IO
    overrides = _parse_overrides(args.set)
    defaults = PRESETS[args.name].defaults
    for flag in ("method", "dt", "shots", "oracle"):
        value = getattr(args, flag)
        if value is not None and value is not False:
            if flag not in defaults:
                raise InputError(f"preset {args.name!r} has no {flag!r} parameter")
            overrides[flag] = value
    try:
        result = run_preset(args.name, args.seed, overrides, _out_dir(args))
    except KeyError as exc:
        raise InputError(str(exc)) from exc
    s = result.summary
    for key in ("energy", "max_norm_deviation", "max_energy_deviation", "max_budget_deviation"):
        if key in s:
            print(f"{key}: {s[key]:.6g}")
    if "oracle" in s:
        print(f"oracle max relative L2 velocity difference: "
              f"{s['oracle']['max_relative_velocity_error']:.3e}")
    if "second_moment" in s:
        print("second moment: " + " ".join(f"{x:.4g}" for x in s["second_moment"])
              + ("  (spreading)" if s["strictly_spreading"] else "  (NOT monotone)"))
    if "rows" in s:
        for row in s["rows"]:
            print(f"{row['stencil']:<16} r={row['rank']} q={row['degree']}  "
                  f"residual {row['residual_coeff']:.3e}  {row['status']}")
    for kind, path in result.files.items():
        print(f"{kind}: {path}")
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lattice-tdse", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def geometry(p):
        p.add_argument("--shape", type=int, nargs="+", help="cells per axis (default 8)")
        p.add_argument("--boundary", choices=["fixed", "periodic"], default="fixed")
        p.add_argument("--vacancy", type=int, nargs="+", metavar="N",
                       help="square vacancy: lower corner coordinates then the side length")

    p = sub.add_parser("factorize", help="sum-of-squares factorization of a stencil")
    p.add_argument("stencil", help="stencil JSON path or preset name")
    p.add_argument("--r", type=int, help="force the rank")
    p.add_argument("--q", type=int, help="force the degree (default: stencil cutoff)")
    p.add_argument("--sweep", action="store_true", help="try r up to 3 and q up to p+1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_factorize)

    p = sub.add_parser("verify", help="check a factorization against its stencil")
    p.add_argument("stencil")
    p.add_argument("factorization")
    geometry(p)
    p.add_argument("--grid", type=int)
    p.add_argument("--out")
    p.add_argument("--mtx", action="store_true", help="also write Q and D as Matrix Market files (needs --out)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("simulate", help="encode, evolve, decode; optional Verlet oracle")
    p.add_argument("stencil")
    p.add_argument("factorization")
    geometry(p)
    p.add_argument("--init", default="packet", help="packet, random, or an .npz with u and v")
    p.add_argument("--k0", type=float, default=1.2)
    p.add_argument("--sigma", type=float, default=6.0)
    p.add_argument("--center", type=float, nargs="+", help="packet center, atoms numbered from 1")
    p.add_argument("--velocity", choices=["in-phase", "travelling"], default="in-phase")
    p.add_argument("--T", type=float, default=60.0)
    p.add_argument("--method", choices=["krylov", "trotter"], default="krylov")
    p.add_argument("--dt", type=float, default=0.05)
    p.add_argument("--order", type=int, choices=[1, 2], default=2)
    p.add_argument("--snapshot-every", type=float, default=1.0)
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--oracle-dt", type=float, default=0.0005)
    p.add_argument("--shots", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("dispersion", help="phonon dispersion scan and Debye frequency")
    p.add_argument("stencil")
    p.add_argument("--grid", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dispersion)

    p = sub.add_parser("preset", help="list or run experiment presets")
    p.add_argument("action", choices=["list", "run"])
    p.add_argument("name", nargs="?")
    p.add_argument("--seed", type=int)
    p.add_argument("--method", choices=["krylov", "trotter"])
    p.add_argument("--dt", type=float)
    p.add_argument("--shots", type=int)
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a preset parameter")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_preset)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "preset" and args.action == "run" and not args.name:
        print("preset run needs a preset name", file=sys.stderr)
        return EXIT_IO
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except InstabilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
