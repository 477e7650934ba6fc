"""Periodic grids on the unit flat torus and finite-difference calculus on them.

The torus has period 1 in every coordinate. Nodes sit at ``i * h`` with
``h = 1 / M``; fields are stored as arrays of shape ``(M,) * dim`` and
flattened in row-major (C) order whenever a node index is needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import GridMismatchError

__all__ = [
    "TorusGrid",
    "GridField",
    "DensityField",
    "SymMatField",
    "torus_distance_sq",
    "wrap_displacement",
    "gradient",
    "hessian",
    "min_eig_stats",
    "interpolate",
    "TrigInterpolant",
]


@dataclass(frozen=True)
class TorusGrid:
    dim: int
    points_per_dim: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        # differential operators need M >= 8; they check that themselves
        if self.points_per_dim < 2:
            raise ValueError("points_per_dim must be >= 2")

    @property
    def M(self) -> int:
        return self.points_per_dim

    @property
    def spacing(self) -> float:
        return 1.0 / self.points_per_dim

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.points_per_dim,) * self.dim

    @property
    def size(self) -> int:
        return self.points_per_dim**self.dim

    def axis(self) -> np.ndarray:
        return np.arange(self.points_per_dim) * self.spacing

    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``(size, dim)``, row-major node order."""
        axes = np.meshgrid(*([self.axis()] * self.dim), indexing="ij")
        return np.stack([a.ravel() for a in axes], axis=-1)

    def mesh(self) -> list[np.ndarray]:
        return np.meshgrid(*([self.axis()] * self.dim), indexing="ij")

    def sample(self, fn) -> "GridField":
        return GridField(self, np.asarray(fn(*self.mesh()), dtype=float))

    def node_index(self, multi_index) -> int:
        return int(np.ravel_multi_index(tuple(multi_index), self.shape))


@dataclass
class GridField:
    grid: TorusGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.size != self.grid.size:
            raise ValueError(
                f"field has {vals.size} values, grid needs {self.grid.size}"
            )
        self.values = vals.reshape(self.grid.shape)

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def integral(self) -> float:
        return float(np.sum(self.values) * self.grid.cell_volume)

    def same_grid(self, other: "GridField") -> None:
        if self.grid != other.grid:
            raise GridMismatchError(f"grid mismatch: {self.grid} vs {other.grid}")


@dataclass
class DensityField(GridField):
    """Strictly positive grid density with unit mass."""

    mass_tol: float = field(default=1e-9, repr=False)

    def __post_init__(self):
        super().__post_init__()
        if not np.all(np.isfinite(self.values)) or np.min(self.values) <= 0:
            raise ValueError("density must be finite and strictly positive")
        mass = self.integral()
        if abs(mass - 1.0) > self.mass_tol:
            raise ValueError(f"density mass {mass!r} differs from 1")

    @classmethod
    def normalized(cls, grid: TorusGrid, values) -> "DensityField":
        vals = np.asarray(values, dtype=float)
        return cls(grid, vals / (np.sum(vals) * grid.cell_volume))

    @classmethod
    def uniform(cls, grid: TorusGrid) -> "DensityField":
        return cls(grid, np.ones(grid.shape))

    def log(self) -> GridField:
        return GridField(self.grid, np.log(self.values))


@dataclass
class SymMatField:
    """Symmetric ``dim x dim`` matrix per node; only the upper triangle is kept.

    ``upper`` has shape ``(dim * (dim + 1) // 2, *grid.shape)`` ordered as
    ``xx`` (dim 1) or ``xx, xy, yy`` (dim 2).
    """

    grid: TorusGrid
    upper: np.ndarray

    def __post_init__(self):
        n = self.grid.dim
        self.upper = np.asarray(self.upper, dtype=float).reshape(
            (n * (n + 1) // 2, *self.grid.shape)
        )

    def component(self, i: int, j: int) -> np.ndarray:
        i, j = min(i, j), max(i, j)
        n = self.grid.dim
        k = i * n - i * (i - 1) // 2 + (j - i)
        return self.upper[k]

    def matrix(self) -> np.ndarray:
        """Full matrices, shape ``(*grid.shape, dim, dim)``."""
        n = self.grid.dim
        out = np.empty(self.grid.shape + (n, n))
        for i in range(n):
            for j in range(n):
                out[..., i, j] = self.component(i, j)
        return out


def wrap_displacement(d):
    """Map coordinate differences to the minimal image in ``[-1/2, 1/2)``."""
    return (np.asarray(d, dtype=float) + 0.5) % 1.0 - 0.5


def torus_distance_sq(x, y) -> np.ndarray | float:
    """Squared geodesic distance on the unit torus.

    Broadcasts over leading axes; the last axis holds coordinates. Scalars
    are treated as points in one dimension.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float)) % 1.0
    y = np.atleast_1d(np.asarray(y, dtype=float)) % 1.0
    diff = x - y
    per_dim = np.minimum(np.minimum((diff - 1.0) ** 2, diff**2), (diff + 1.0) ** 2)
    out = np.sum(per_dim, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def _require_fd_grid(grid: TorusGrid) -> None:
    if grid.points_per_dim < 8:
        raise ValueError("finite differences need at least 8 points per dimension")


def _shift(u: np.ndarray, step: int, axis: int) -> np.ndarray:
    # value at index i + step
    return np.roll(u, -step, axis=axis)


def gradient(f: GridField) -> np.ndarray:
    """Centered periodic differences; returns shape ``(dim, *grid.shape)``."""
    _require_fd_grid(f.grid)
    h = f.grid.spacing
    u = f.values
    return np.stack(
        [(_shift(u, 1, d) - _shift(u, -1, d)) / (2 * h) for d in range(f.grid.dim)]
    )


def hessian(f: GridField) -> SymMatField:
    _require_fd_grid(f.grid)
    h = f.grid.spacing
    u = f.values
    n = f.grid.dim
    comps = []
    for i in range(n):
        for j in range(i, n):
            if i == j:
                comps.append((_shift(u, 1, i) - 2 * u + _shift(u, -1, i)) / h**2)
            else:
                di = (_shift(u, 1, i) - _shift(u, -1, i)) / (2 * h)
                comps.append((_shift(di, 1, j) - _shift(di, -1, j)) / (2 * h))
    return SymMatField(f.grid, np.stack(comps))


def _min_eig(H: SymMatField) -> np.ndarray:
    if H.grid.dim == 1:
        return H.upper[0].copy()
    a, b, c = H.upper
    return 0.5 * (a + c) - np.sqrt(0.25 * (a - c) ** 2 + b**2)


def min_eig_stats(H: SymMatField) -> tuple[GridField, float, int]:
    """Per-node smallest eigenvalue, its global minimum, and the first node attaining it."""
    eig = _min_eig(H)
    idx = int(np.argmin(eig.ravel()))
    return GridField(H.grid, eig), float(eig.ravel()[idx]), idx


def interpolate(f: GridField, points) -> np.ndarray:
    """Periodic multilinear interpolation of ``f`` at ``points`` (shape ``(P, dim)``)."""
    grid = f.grid
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    M = grid.points_per_dim
    s = (pts / grid.spacing) % M
    i0 = np.floor(s).astype(np.int64)
    w = s - i0
    i0 %= M
    i1 = (i0 + 1) % M
    out = np.zeros(pts.shape[0])
    for corner in range(2**grid.dim):
        idx = []
        weight = np.ones(pts.shape[0])
        for d in range(grid.dim):
            if (corner >> d) & 1:
                idx.append(i1[:, d])
                weight = weight * w[:, d]
            else:
                idx.append(i0[:, d])
                weight = weight * (1.0 - w[:, d])
        out += weight * f.values[tuple(idx)]
    return out


class TrigInterpolant:
    """Band-limited periodic interpolant of a grid field.

    Passes exactly through the node values. Used where a smooth
    continuation between nodes is needed (sub-grid minimization).
    """

    def __init__(self, f: GridField):
        self.grid = f.grid
        M = f.grid.points_per_dim
        self.coef = np.fft.fftn(f.values) / f.grid.size
        self.freq = np.fft.fftfreq(M, 1.0 / M)
        self.nyquist = self.freq == -(M // 2) if M % 2 == 0 else np.zeros(M, bool)

    def _basis(self, y: np.ndarray):
        # per-dimension basis functions and their first two derivatives
        M = self.grid.points_per_dim
        m = self.freq
        E = np.exp(2j * np.pi * np.outer(y, m))
        B0, B1, B2 = E.copy(), 2j * np.pi * m * E, -((2 * np.pi * m) ** 2) * E
        if self.nyquist.any():
            arg = np.pi * M * y
            B0[:, self.nyquist] = np.cos(arg)[:, None]
            B1[:, self.nyquist] = (-np.pi * M * np.sin(arg))[:, None]
            B2[:, self.nyquist] = (-((np.pi * M) ** 2) * np.cos(arg))[:, None]
        return B0, B1, B2

    def evaluate(self, points, derivatives: bool = True):
        """Values, gradients ``(P, dim)`` and Hessians ``(P, dim, dim)`` at points."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        P = pts.shape[0]
        if self.grid.dim == 1:
            B0, B1, B2 = self._basis(pts[:, 0])
            c = self.coef
            val = (B0 @ c).real
            if not derivatives:
                return val
            grad = (B1 @ c).real[:, None]
            hess = (B2 @ c).real.reshape(P, 1, 1)
            return val, grad, hess
        X0, X1, X2 = self._basis(pts[:, 0])
        Y0, Y1, Y2 = self._basis(pts[:, 1])
        c = self.coef

        def contract(A, B):
            return np.sum((A @ c) * B, axis=1).real

        val = contract(X0, Y0)
        if not derivatives:
            return val
        grad = np.stack([contract(X1, Y0), contract(X0, Y1)], axis=-1)
        hxy = contract(X1, Y1)
        hess = np.empty((P, 2, 2))
        hess[:, 0, 0] = contract(X2, Y0)
        hess[:, 1, 1] = contract(X0, Y2)
        hess[:, 0, 1] = hess[:, 1, 0] = hxy
        return val, grad, hess
