"""Velocity-Verlet reference integrator for ``M u'' = -D u``."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .lattice import MassModel
from .tdse import ClassicalState


class VerletInstability(RuntimeError):
    pass


@dataclass(frozen=True)
class VerletConfig:
    dt: float = 0.05
    steps: int = 1200
    snapshot_stride: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.steps < 0 or self.snapshot_stride < 1:
            raise ValueError("steps must be >= 0 and snapshot_stride >= 1")

    @classmethod
    def for_time(cls, T: float, dt: float, snapshot_every: float | None = None):
        steps = int(round(T / dt))
        if abs(steps * dt - T) > 1e-9 * max(T, 1.0):
            raise ValueError(f"T={T} is not a multiple of dt={dt}")
        stride = steps if snapshot_every is None else max(int(round(snapshot_every / dt)), 1)
        return cls(dt, steps, max(stride, 1))


def total_energy(cs: ClassicalState, D: sp.spmatrix, masses: MassModel):
    """``v^T M v / 2 + u^T D u / 2`` (per column for batched states)."""
    n_sites = cs.u.shape[0] // masses.cell_dof_masses.size
    M = masses.dof_masses(n_sites).reshape((-1,) + (1,) * (cs.v.ndim - 1))
    kinetic = 0.5 * np.sum(M * cs.v * cs.v, axis=0)
    potential = 0.5 * np.sum(cs.u * (D @ cs.u), axis=0)
    return kinetic + potential


def verlet_evolve(cs0: ClassicalState, D: sp.spmatrix, masses: MassModel,
                  cfg: VerletConfig, omega_debye: float | None = None):
    """Kick-drift-kick integration; returns ``[(time, ClassicalState), ...]``
    at every ``snapshot_stride`` steps, starting with the initial state.

    Aborts with VerletInstability once the energy exceeds ten times its
    initial value.
    """
    if cs0.u.shape[0] != D.shape[0]:
        raise ValueError("state and operator sizes differ")
    if omega_debye is not None and cfg.dt > 2.0 / omega_debye:
        warnings.warn(f"dt={cfg.dt} exceeds the stability limit 2/omega_D", RuntimeWarning)
    n_sites = cs0.u.shape[0] // masses.cell_dof_masses.size
    inv_m = 1.0 / masses.dof_masses(n_sites).reshape((-1,) + (1,) * (cs0.u.ndim - 1))
    D = sp.csr_matrix(D)
    u = cs0.u.copy()
    v = cs0.v.copy()
    e0 = np.max(np.abs(total_energy(cs0, D, masses)))
    check_every = max(cfg.steps // 100, 1)
    dt, half = cfg.dt, 0.5 * cfg.dt
    a = -inv_m * (D @ u)
    out = [(0.0, ClassicalState(u.copy(), v.copy()))]
    for step in range(1, cfg.steps + 1):
        v += half * a
        u += dt * v
        a = -inv_m * (D @ u)
        v += half * a
        if step % check_every == 0:
            e = np.max(np.abs(total_energy(ClassicalState(u, v), D, masses)))
            if not math.isfinite(e) or (e0 > 0 and e > 10 * e0):
                raise VerletInstability(f"energy grew to {e:.3e} (initial {e0:.3e}) at step {step}")
        if step % cfg.snapshot_stride == 0 or step == cfg.steps:
            if out[-1][0] != step * dt:
                out.append((step * dt, ClassicalState(u.copy(), v.copy())))
    return out
