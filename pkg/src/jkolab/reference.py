"""Exact heat flow on the unit torus by Fourier decay, and distances between densities."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .torus import DensityField, GridField, TorusGrid

__all__ = [
    "SpectralState",
    "heat_solve",
    "l1_distance",
    "linf_distance",
    "ConvergenceRow",
    "convergence_study",
]


@dataclass
class SpectralState:
    """DFT coefficients of a density, scaled so the zero mode is the total mass."""

    grid: TorusGrid
    coefficients: np.ndarray

    @classmethod
    def from_density(cls, rho: GridField) -> "SpectralState":
        return cls(rho.grid, np.fft.fftn(rho.values) * rho.grid.cell_volume)

    def wavenumbers_sq(self) -> np.ndarray:
        M = self.grid.points_per_dim
        m = np.fft.fftfreq(M, 1.0 / M)
        grids = np.meshgrid(*([m] * self.grid.dim), indexing="ij")
        return sum(g**2 for g in grids)

    def evolve(self, t: float) -> "SpectralState":
        decay = np.exp(-4.0 * np.pi**2 * self.wavenumbers_sq() * t)
        return SpectralState(self.grid, self.coefficients * decay)

    def to_values(self) -> np.ndarray:
        return np.fft.ifftn(self.coefficients / self.grid.cell_volume).real


def heat_solve(rho0: DensityField, t: float) -> DensityField:
    """Solution of ``u_t = Laplace u`` at time ``t`` with ``u(0) = rho0``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    vals = SpectralState.from_density(rho0).evolve(t).to_values()
    return DensityField(rho0.grid, vals)


def l1_distance(u: GridField, v: GridField) -> float:
    u.same_grid(v)
    return float(np.sum(np.abs(u.values - v.values)) * u.grid.cell_volume)


def linf_distance(u: GridField, v: GridField) -> float:
    u.same_grid(v)
    return float(np.max(np.abs(u.values - v.values)))


@dataclass
class ConvergenceRow:
    N: int
    l1_gap: float
    linf_gap: float
    runtime_ms: float


def convergence_study(rho0: DensityField, K: float, N_list, grid: TorusGrid | None = None,
                      inner=None, record_timing: bool = True) -> list[ConvergenceRow]:
    """Gap between the JKO endpoint and the exact heat flow at ``t = K`` for each N.

    With ``record_timing=False`` the runtime column is written as 0 so that
    repeated runs produce identical tables.
    """
    from .jko import InnerSettings, JkoConfig, run_trajectory

    grid = grid or rho0.grid
    if rho0.grid != grid:
        raise ValueError("rho0 must live on the study grid")
    N_list = [int(n) for n in N_list]
    if not N_list or any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise ValueError("N_list must be non-empty and strictly increasing")
    exact = heat_solve(rho0, K)
    rows = []
    for N in N_list:
        cfg = JkoConfig(K, N, grid, inner or InnerSettings())
        start = time.perf_counter()
        traj = run_trajectory(rho0, cfg, residuals=False)
        ms = (time.perf_counter() - start) * 1e3 if record_timing else 0.0
        end = traj.densities[-1]
        rows.append(ConvergenceRow(N, l1_distance(end, exact), linf_distance(end, exact), ms))
    return rows
