"""Named experiment presets, initial states, and CSV export.

A preset is fully determined by its name, a seed, and parameter
overrides; every file it writes starts with a ``#`` comment line holding
that provenance as JSON.  CSV bodies carry no timestamps, so identical
inputs give byte-identical bodies.
"""

from __future__ import annotations

import json
import time as _time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .fejer_riesz import (Factorization, FactorizationError, LaurentPolynomial, SosOptions,
                          factorization_from_dict, factorize_bauer_1d, factorize_scalar_1d,
                          factorize_sos, synthesize_polynomial)
from .lattice import (MassModel, SiteSet, Stencil, assemble_D, build_site_set,
                      eval_dynamical_matrix, load_stencil, square_mask)
from .qassembly import QOperator, assemble_Q
from .tdse import (ClassicalState, EvolutionConfig, HamiltonianOperator, SchrodingerState,
                   decode_state, encode_state, evolve_snapshots,
                   local_kinetic_energy, sampled_velocity)
from .verlet import VerletConfig, total_energy, verlet_evolve

FACTOR_TOL = 1e-7


# --------------------------------------------------------------------------
# factorization protocol

@dataclass
class FactorAttempt:
    method: str
    rank: int
    degree: int
    factorization: Factorization
    seconds: float

    @property
    def ok(self) -> bool:
        return self.factorization.residual_coeff <= FACTOR_TOL


def factorization_protocol(P: LaurentPolynomial, rank: int | None = None,
                           degree: int | None = None, sweep: bool = False,
                           options: SosOptions | None = None) -> tuple[Factorization, list]:
    """Pick a factorization route and return ``(best, attempts)``.

    Without explicit rank: d = 1, m = 1 uses root splitting; d = 1, m > 1
    uses the block-Toeplitz Cholesky route; anything else (or a failure of
    those) runs seeded least squares at r = 1 and then r = 2.  ``sweep``
    continues through r = 3 and q = p + 1 instead of stopping at the first
    success.
    """
    q = P.degree if degree is None else degree
    attempts = []

    def record(method, r, qq, fn):
        t0 = _time.perf_counter()
        F = fn()
        attempts.append(FactorAttempt(method, r, qq, F, _time.perf_counter() - t0))
        return attempts[-1]

    if rank is None and P.dim == 1 and q == P.degree:
        try:
            if P.m == 1:
                a = record("scalar", 1, q, lambda: factorize_scalar_1d(P))
            else:
                a = record("bauer", 1, q, lambda: factorize_bauer_1d(P))
            if a.ok and not sweep:
                return a.factorization, attempts
        except FactorizationError as exc:
            attempts.append(FactorAttempt("scalar" if P.m == 1 else "bauer", 1, q,
                                          Factorization(P.dim, P.m, q, [], float("inf"),
                                                        float("inf"), False, "failed",
                                                        message=str(exc)), 0.0))
    ranks = [rank] if rank is not None else ([1, 2, 3] if sweep else [1, 2])
    degrees = [q, q + 1] if sweep and degree is None else [q]
    for qq in degrees:
        for r in ranks:
            a = record("sos", r, qq, lambda: factorize_sos(P, r, qq, options))
            if a.ok and not sweep:
                return a.factorization, attempts
    real = [a for a in attempts if a.factorization.rank > 0]
    ok = [a for a in real if a.ok]
    pool = ok or real
    best = min(pool, key=lambda a: (a.factorization.rank, a.factorization.residual_coeff)) if ok \
        else min(pool, key=lambda a: a.factorization.residual_coeff)
    return best.factorization, attempts


def shipped_factorization(name: str) -> Factorization:
    """Reference factorization stored next to a built-in stencil preset."""
    path = resources.files("lattice_tdse.presets") / f"{name}.factor.json"
    return factorization_from_dict(json.loads(path.read_text(encoding="utf-8")))


def shipped_factor_names() -> list:
    root = resources.files("lattice_tdse.presets")
    return sorted(p.name[:-len(".factor.json")] for p in root.iterdir()
                  if p.name.endswith(".factor.json"))


def synthetic_sos_instance(seed: int, dim: int = 2, m: int = 2, rank: int = 2,
                           degree: int = 1) -> tuple[LaurentPolynomial, Factorization]:
    """Polynomial synthesized from normally distributed factor blocks."""
    rng = np.random.default_rng(seed)
    K = (degree + 1) ** dim
    F = Factorization.from_stacked(rng.normal(size=(rank, K, m, m)), dim, degree,
                                   method="synthetic")
    P = synthesize_polynomial(F)
    return P, F.certify(P)


# --------------------------------------------------------------------------
# initial states

def atom_positions(sites: SiteSet) -> np.ndarray:
    """Cell coordinates numbered from 1, as in ``x_j = j`` for atom ``j``."""
    return sites.sites.astype(float) + 1.0


def gaussian_packet(stencil: Stencil, masses: MassModel, sites: SiteSet, k0: float,
                    sigma: float, center, velocity: str = "in-phase") -> ClassicalState:
    """Gaussian-enveloped plane wave along axis 0 on the acoustic branch.

    ``velocity="in-phase"`` sets ``v = -omega * u`` (same envelope and cosine as
    the displacement); ``"travelling"`` uses the quarter-period-shifted
    velocity of a right-moving plane wave instead.
    """
    d, m = stencil.dim, stencil.m
    k = np.zeros(d)
    k[0] = k0
    # u_j = e exp(i k.j) needs sum_l D_l e^{i k.l} = P(-k)
    A = eval_dynamical_matrix(stencil, -k)
    w = 1.0 / np.sqrt(masses.cell_dof_masses)
    vals, vecs = np.linalg.eigh(w[:, None] * A * w[None, :])
    nA = stencil.atoms_per_cell
    # longitudinal acoustic: largest weight on the axis-0 components
    weight = np.abs(vecs.reshape(nA, d, m)[:, 0, :]).sum(axis=0)
    branch = int(np.argmax(weight[:d]))
    omega = float(np.sqrt(max(vals[branch], 0.0)))
    pol = w * vecs[:, branch]
    idx = int(np.argmax(np.abs(pol)))
    pol = pol * np.exp(-1j * np.angle(pol[idx]))
    pol = pol / np.max(np.abs(pol))
    x = atom_positions(sites)
    c = np.broadcast_to(np.asarray(center, dtype=float), (d,))
    env = np.exp(-np.sum((x - c) ** 2, axis=1) / (2 * sigma ** 2))
    phase = np.exp(1j * (x @ k))
    wave = env[:, None] * pol[None, :] * phase[:, None]
    u = wave.real
    v = -omega * u if velocity == "in-phase" else omega * wave.imag
    return ClassicalState(u.ravel(), v.ravel())


def random_state(n: int, rng: np.random.Generator) -> ClassicalState:
    return ClassicalState(rng.normal(size=n), rng.normal(size=n))


# --------------------------------------------------------------------------
# CSV export

def provenance(preset: str, params: dict, seed) -> dict:
    return {"preset": preset, "params": params, "seed": seed, "version": __version__}


def _header(prov: dict) -> str:
    return "# " + json.dumps(prov, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, (np.ndarray, tuple)):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def write_snapshot_csv(path, prov: dict, snapshots, m: int) -> None:
    """Rows ``time, site, u_0.., v_0..`` for ``[(t, ClassicalState)]``."""
    cols = ["time", "site"] + [f"u{i}" for i in range(m)] + [f"v{i}" for i in range(m)]
    lines = [",".join(cols)]
    for t, cs in snapshots:
        u = cs.u.reshape(-1, m)
        v = cs.v.reshape(-1, m)
        tt = _fmt(t)
        for site in range(u.shape[0]):
            vals = ",".join(_fmt(x) for x in np.concatenate([u[site], v[site]]))
            lines.append(f"{tt},{site},{vals}")
    Path(path).write_text(_header(prov) + "\n".join(lines) + "\n", encoding="utf-8")


def write_ensemble_csv(path, prov: dict, times, mean, stderr) -> None:
    """Rows ``time, atom, mean_kinetic_energy, standard_error``; atoms from 1."""
    lines = ["time,atom,mean_kinetic_energy,standard_error"]
    for ti, t in enumerate(times):
        tt = _fmt(t)
        for a in range(mean.shape[1]):
            lines.append(f"{tt},{a + 1},{_fmt(mean[ti, a])},{_fmt(stderr[ti, a])}")
    Path(path).write_text(_header(prov) + "\n".join(lines) + "\n", encoding="utf-8")


def read_csv_body(path) -> str:
    """File contents without the provenance comment lines."""
    text = Path(path).read_text(encoding="utf-8")
    return "".join(line for line in text.splitlines(keepends=True) if not line.startswith("#"))


# --------------------------------------------------------------------------
# simulation pipeline

@dataclass
class Pipeline:
    stencil: Stencil
    masses: MassModel
    sites: SiteSet
    factorization: Factorization
    qop: QOperator
    D: object
    H: HamiltonianOperator

    @classmethod
    def build(cls, stencil, masses, sites, F, gate_tol: float = 1e-6) -> "Pipeline":
        qop = assemble_Q(F, sites, stencil, check=True, check_tol=gate_tol)
        return cls(stencil, masses, sites, F, qop, assemble_D(stencil, sites),
                   HamiltonianOperator(qop, masses))


def snapshot_times(T: float, every: float | None) -> list:
    if T == 0:
        return [0.0]
    if not every or every >= T:
        return [0.0, float(T)]
    n = int(round(T / every))
    if abs(n * every - T) > 1e-9 * T:
        raise ValueError(f"T={T} is not a multiple of the snapshot interval {every}")
    return [i * every for i in range(n + 1)]


def run_tdse(pipe: Pipeline, cs0: ClassicalState, times, cfg: EvolutionConfig,
             shots: int = 0, rng: np.random.Generator | None = None):
    """Encode, evolve through ``times``, decode; returns snapshots and the
    norm / energy diagnostics."""
    psi0 = encode_state(cs0, pipe.qop, pipe.masses)
    states = evolve_snapshots(psi0, pipe.H, times, cfg)
    snaps, norm_dev, energy_dev = [], 0.0, 0.0
    E = float(psi0.energy)
    for st in states:
        cs = decode_state(st, pipe.qop, pipe.masses, strict=False)
        e = float(total_energy(cs, pipe.D, pipe.masses))
        if shots:
            cs = ClassicalState(cs.u, sampled_velocity(st, pipe.masses, shots, rng))
        snaps.append((st.time, cs))
        norm_dev = max(norm_dev, abs(float(st.norm()) - 1.0))
        energy_dev = max(energy_dev, abs(e - E) / E)
    return snaps, {"energy": E, "max_norm_deviation": norm_dev,
                   "max_energy_deviation": energy_dev}, states


def run_oracle(pipe: Pipeline, cs0: ClassicalState, times, dt: float):
    """Verlet trajectory sampled at the (uniformly spaced) ``times``."""
    every = times[1] - times[0] if len(times) > 1 else None
    cfg = VerletConfig.for_time(times[-1], dt, every) if every else VerletConfig(dt, 0)
    traj = verlet_evolve(cs0, pipe.D, pipe.masses, cfg)
    return [(t, cs) for t, (_, cs) in zip(times, traj)]


def oracle_report(snaps, ref) -> dict:
    rel = []
    for (t, cs), (_, cr) in zip(snaps, ref):
        den = float(np.linalg.norm(cr.v))
        rel.append(float(np.linalg.norm(cs.v - cr.v)) / den if den > 0 else 0.0)
    return {"times": [float(t) for t, _ in snaps], "relative_velocity_error": rel,
            "max_relative_velocity_error": max(rel) if rel else 0.0,
            "final_relative_velocity_error": rel[-1] if rel else 0.0}


# --------------------------------------------------------------------------
# presets

@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    description: str
    defaults: dict
    runner: Callable = field(repr=False)
    default_seed: int = 0

    def params(self, overrides: dict | None = None) -> dict:
        params = dict(self.defaults)
        for key, value in (overrides or {}).items():
            if key not in params:
                raise KeyError(f"preset {self.name!r} has no parameter {key!r}")
            params[key] = value
        return params


@dataclass
class PresetResult:
    preset: str
    seed: int
    params: dict
    summary: dict
    files: dict


def _wavepacket(params, seed, out):
    stencil, masses = load_stencil(params["stencil"])
    sites = build_site_set([params["L"]], "fixed")
    F, _ = factorization_protocol(LaurentPolynomial.from_stencil(stencil))
    pipe = Pipeline.build(stencil, masses, sites, F)
    x0 = params["x0"] if params["x0"] is not None else params["L"] / 4
    cs0 = gaussian_packet(stencil, masses, sites, params["k0"], params["sigma"], [x0])
    times = snapshot_times(params["T"], params["snapshot_every"])
    cfg = EvolutionConfig(params["method"], params["dt"], trotter_order=params["trotter_order"])
    rng = np.random.default_rng(seed)
    snaps, diag, _ = run_tdse(pipe, cs0, times, cfg, params["shots"], rng)
    summary = dict(diag, factorization_residual=F.residual_coeff, qtq_residual=pipe.qop.self_check)
    files = {}
    prov = provenance("nnn-wavepacket", params, seed)
    if out is not None:
        files["snapshots"] = out / "snapshots.csv"
        write_snapshot_csv(files["snapshots"], prov, snaps, stencil.m)
    if params["oracle"]:
        ref = run_oracle(pipe, cs0, times, params["oracle_dt"])
        rep = oracle_report(snaps, ref)
        summary["oracle"] = rep
        if out is not None:
            files["oracle_snapshots"] = out / "oracle_snapshots.csv"
            write_snapshot_csv(files["oracle_snapshots"], prov, ref, stencil.m)
            files["oracle_report"] = out / "oracle_report.json"
            files["oracle_report"].write_text(json.dumps(dict(provenance=prov, **rep), indent=2) + "\n")
    return summary, files


def ensemble_variance(n_atoms: int, peak_atom: float, peak_variance: float, width: float,
                      floor: float) -> np.ndarray:
    a = np.arange(1, n_atoms + 1, dtype=float)
    return floor + peak_variance * np.exp(-(a - peak_atom) ** 2 / (2 * width ** 2))


def _ensemble(params, seed, out):
    stencil, masses = load_stencil(params["stencil"])
    sites = build_site_set([params["cells"]], "fixed")
    F, _ = factorization_protocol(LaurentPolynomial.from_stencil(stencil))
    pipe = Pipeline.build(stencil, masses, sites, F)
    n = pipe.qop.shape[1]
    var = ensemble_variance(n, params["peak_atom"], params["peak_variance"], params["width"],
                            params["floor"])
    R = params["realizations"]
    times = snapshot_times(params["T"], params["snapshot_every"])
    cfg = EvolutionConfig("krylov", krylov_dim=params["krylov_dim"])
    ke_sum = np.zeros((len(times), n))
    ke_sq = np.zeros((len(times), n))
    max_norm_dev = 0.0
    chunk = params["chunk"]
    for start in range(0, R, chunk):
        idx = range(start, min(start + chunk, R))
        # counter scheme: realization i draws from the stream (seed, i)
        v = np.stack([np.sqrt(var) * np.random.default_rng([seed, i]).standard_normal(n)
                      for i in idx], axis=1)
        cs0 = ClassicalState(np.zeros_like(v), v)
        states = evolve_snapshots(encode_state(cs0, pipe.qop, masses), pipe.H, times, cfg)
        for ti, st in enumerate(states):
            ke = local_kinetic_energy(st, masses)
            ke_sum[ti] += ke.sum(axis=1)
            ke_sq[ti] += (ke * ke).sum(axis=1)
            max_norm_dev = max(max_norm_dev, float(np.max(np.abs(st.norm() - 1.0))))
    mean = ke_sum / R
    var_ke = np.maximum(ke_sq / R - mean ** 2, 0.0) * R / max(R - 1, 1)
    stderr = np.sqrt(var_ke / R)
    a = np.arange(1, n + 1, dtype=float)
    moments = [float(np.sum((a - params["peak_atom"]) ** 2 * row) / np.sum(row)) for row in mean]
    summary = {"second_moment": moments,
               "strictly_spreading": bool(np.all(np.diff(moments) > 0)),
               "max_norm_deviation": max_norm_dev, "atoms": n}
    files = {}
    if out is not None:
        files["ensemble"] = out / "ensemble.csv"
        write_ensemble_csv(files["ensemble"], provenance("diatomic-ensemble", params, seed),
                           times, mean, stderr)
    return summary, files


def region_energies(state: SchrodingerState, qop: QOperator, split_x: float) -> dict:
    """Kinetic and potential energy left and right of ``x = split_x``.

    Kinetic density sits on domain sites, potential density on the codomain
    rows ``(s, k + alpha)``; both are assigned by their cell coordinate.
    """
    E = float(state.energy)
    m = qop.m
    kin = E * (np.abs(state.top) ** 2).reshape(len(qop.domain), m).sum(axis=1)
    pot = E * (np.abs(state.bottom) ** 2).reshape(qop.rank, len(qop.codomain), m).sum(axis=(0, 2))
    left_d = qop.domain.sites[:, 0] < split_x
    left_c = qop.codomain.sites[:, 0] < split_x
    out = {"reflected_kinetic": float(kin[left_d].sum()), "transmitted_kinetic": float(kin[~left_d].sum()),
           "reflected_potential": float(pot[left_c].sum()), "transmitted_potential": float(pot[~left_c].sum())}
    out["reflected"] = out["reflected_kinetic"] + out["reflected_potential"]
    out["transmitted"] = out["transmitted_kinetic"] + out["transmitted_potential"]
    return out


def _vacancy(params, seed, out):
    stencil, masses = load_stencil(params["stencil"])
    shape = tuple(params["shape"])
    mask = square_mask(shape, params["vacancy_lower"], params["vacancy_size"])
    sites = build_site_set(shape, "fixed", mask)
    if params["factorization"] == "shipped":
        F = shipped_factorization(params["stencil"])
    else:
        F, _ = factorization_protocol(LaurentPolynomial.from_stencil(stencil))
    pipe = Pipeline.build(stencil, masses, sites, F)
    cs0 = gaussian_packet(stencil, masses, sites, params["k0"], params["sigma"],
                          params["center"], velocity="travelling")
    times = snapshot_times(params["T"], params["snapshot_every"])
    cfg = EvolutionConfig(params["method"], params["dt"], trotter_order=params["trotter_order"])
    snaps, diag, states = run_tdse(pipe, cs0, times, cfg)
    split = params["vacancy_lower"][0] + params["vacancy_size"] / 2
    budget = float(total_energy(cs0, pipe.D, masses))
    regions = [region_energies(st, pipe.qop, split) for st in states]
    budget_dev = max(abs(r["reflected"] + r["transmitted"] - budget) / budget for r in regions)
    summary = dict(diag, sites=len(sites), initial_budget=budget, regions=regions,
                   times=[float(t) for t in times], max_budget_deviation=budget_dev,
                   split_x=split)
    files = {}
    if out is not None:
        prov = provenance("vacancy-scatter", params, seed)
        files["snapshots"] = out / "snapshots.csv"
        write_snapshot_csv(files["snapshots"], prov, snaps, stencil.m)
        files["energy_budget"] = out / "energy_budget.csv"
        lines = ["time,reflected_kinetic,reflected_potential,transmitted_kinetic,"
                 "transmitted_potential,total"]
        for t, r in zip(times, regions):
            vals = [r["reflected_kinetic"], r["reflected_potential"], r["transmitted_kinetic"],
                    r["transmitted_potential"], r["reflected"] + r["transmitted"]]
            lines.append(_fmt(t) + "," + ",".join(_fmt(x) for x in vals))
        files["energy_budget"].write_text(_header(prov) + "\n".join(lines) + "\n", encoding="utf-8")
    return summary, files


def _sweep(params, seed, out):
    targets = []
    for name in params["stencils"]:
        st, _ = load_stencil(name)
        targets.append((name, LaurentPolynomial.from_stencil(st)))
    for i in range(params["synthetic"]):
        targets.append((f"synthetic-{seed + i}", synthetic_sos_instance(seed + i)[0]))
    rows = []
    opts = SosOptions(seed=seed, restarts=params["restarts"])
    for name, P in targets:
        for r in params["ranks"]:
            t0 = _time.perf_counter()
            F = factorize_sos(P, r, P.degree, opts)
            rows.append({"stencil": name, "rank": r, "degree": P.degree,
                         "residual_coeff": F.residual_coeff, "residual_torus": F.residual_torus,
                         "iterations": max(len(F.history) - 1, 0), "status": F.message,
                         "seconds": _time.perf_counter() - t0})
    files = {}
    if out is not None:
        files["table"] = out / "factor_sweep.csv"
        lines = ["stencil,rank,degree,residual_coeff,residual_torus,iterations"]
        for row in rows:
            lines.append(f"{row['stencil']},{row['rank']},{row['degree']},"
                         f"{_fmt(row['residual_coeff'])},{_fmt(row['residual_torus'])},{row['iterations']}")
        files["table"].write_text(_header(provenance("factor-sweep", params, seed))
                                  + "\n".join(lines) + "\n", encoding="utf-8")
    return {"rows": rows}, files


PRESETS = {
    "nnn-wavepacket": ExperimentPreset(
        "nnn-wavepacket",
        "Gaussian packet on the next-nearest-neighbour chain, fixed ends, with optional Verlet oracle",
        {"stencil": "nnn-chain", "L": 127, "T": 60.0, "dt": 0.05, "method": "krylov",
         "trotter_order": 2, "k0": 1.2, "sigma": 6.0, "x0": None, "snapshot_every": 1.0,
         "oracle": False, "oracle_dt": 0.0005, "shots": 0},
        _wavepacket),
    "diatomic-ensemble": ExperimentPreset(
        "diatomic-ensemble",
        "Random initial velocities with a Gaussian variance profile; mean kinetic energy per atom",
        {"stencil": "diatomic", "cells": 64, "realizations": 1024, "peak_atom": 12.0,
         "peak_variance": 2.0, "width": 4.0, "floor": 0.0, "T": 40.0, "snapshot_every": 5.0,
         "krylov_dim": 32, "chunk": 128},
        _ensemble, default_seed=42),
    "vacancy-scatter": ExperimentPreset(
        "vacancy-scatter",
        "Travelling packet on the synthetic square lattice scattering off a square vacancy",
        {"stencil": "square-2d", "factorization": "shipped", "shape": [64, 16],
         "vacancy_lower": [36, 5], "vacancy_size": 6, "center": [16.0, 8.5], "sigma": 4.0,
         "k0": 0.8, "T": 30.0, "snapshot_every": 2.0, "dt": 0.05, "method": "krylov",
         "trotter_order": 2},
        _vacancy),
    "factor-sweep": ExperimentPreset(
        "factor-sweep",
        "Least-squares residual versus rank on the 2D stencil and seeded synthetic instances",
        {"stencils": ["square-2d"], "synthetic": 3, "ranks": [1, 2, 3], "restarts": 5},
        _sweep, default_seed=1000),
}


def run_preset(name: str, seed: int | None = None, overrides: dict | None = None,
               out_dir=None) -> PresetResult:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    preset = PRESETS[name]
    params = preset.params(overrides)
    seed = preset.default_seed if seed is None else int(seed)
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
    summary, files = preset.runner(params, seed, out)
    return PresetResult(name, seed, params, summary, {k: str(v) for k, v in files.items()})
