"""Optimal transport on the torus grid for the cost ``c(x, y) = d(x, y)**2 / 2``.

Contents:

* ``w2_exact_small``: exact squared Wasserstein distance between tiny atomic
  measures, computed in rational arithmetic.
* ``sinkhorn``: entropic transport between grid densities, log-domain with
  epsilon scaling. The Gibbs kernel factorizes over coordinates, so every
  kernel application is a sequence of one-dimensional passes.
* ``c_transform`` and the checks built on it.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import (
    ConvergenceError,
    DegenerateMapError,
    InstanceTooLargeError,
    KernelUnderflowError,
    UnbalancedError,
)
from .torus import (
    DensityField,
    GridField,
    SymMatField,
    TorusGrid,
    TrigInterpolant,
    gradient,
    hessian,
    interpolate,
    torus_distance_sq,
    wrap_displacement,
)

__all__ = [
    "CostMatrix",
    "DiscreteMeasure",
    "TransportPlan",
    "SinkhornResult",
    "CTransformField",
    "CTransformCheck",
    "GibbsKernel",
    "axis_half_cost",
    "eps_schedule",
    "w2_exact_small",
    "sinkhorn",
    "entropic_cost",
    "sinkhorn_divergence",
    "c_transform",
    "verify_ctransform_identities",
    "fest_residual",
    "potential_psd_margin",
]

DENSE_PLAN_LIMIT = 2**22
MAX_ATOMS = 8


def axis_half_cost(grid: TorusGrid) -> np.ndarray:
    """Half squared periodic distance between the nodes of one axis, ``(M, M)``."""
    x = grid.axis()
    d = np.abs(x[:, None] - x[None, :])
    d = np.minimum(d, 1.0 - d)
    return 0.5 * d**2


@dataclass
class CostMatrix:
    grid: TorusGrid
    entries: np.ndarray

    @classmethod
    def from_grid(cls, grid: TorusGrid) -> "CostMatrix":
        if grid.size**2 > DENSE_PLAN_LIMIT:
            raise InstanceTooLargeError("dense cost matrix too large for this grid")
        c1 = axis_half_cost(grid)
        if grid.dim == 1:
            return cls(grid, c1.copy())
        M = grid.points_per_dim
        full = c1[:, None, :, None] + c1[None, :, None, :]
        return cls(grid, full.reshape(M * M, M * M))


@dataclass
class DiscreteMeasure:
    """Finitely many weighted atoms on the torus."""

    points: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        self.points = pts.reshape(-1, 1) if pts.ndim == 1 else pts
        self.masses = np.asarray(self.masses, dtype=float)
        if self.points.shape[0] != self.masses.shape[0]:
            raise ValueError("points and masses differ in length")
        if np.any(self.masses < 0):
            raise ValueError("masses must be nonnegative")

    @classmethod
    def uniform(cls, points) -> "DiscreteMeasure":
        pts = np.asarray(points, dtype=float)
        k = pts.shape[0]
        return cls(pts.reshape(k, -1), np.full(k, 1.0 / k))


@dataclass
class TransportPlan:
    gamma: np.ndarray | None
    source: object
    target: object
    cost_value: float
    exact_value: Fraction | None = None

    def marginal_residuals(self) -> tuple[float, float]:
        if self.gamma is None:
            raise ValueError("plan was not materialized")
        a = _masses(self.source)
        b = _masses(self.target)
        return (
            float(np.sum(np.abs(self.gamma.sum(axis=1) - a))),
            float(np.sum(np.abs(self.gamma.sum(axis=0) - b))),
        )


def _masses(measure) -> np.ndarray:
    if isinstance(measure, DiscreteMeasure):
        return measure.masses
    return measure.flat * measure.grid.cell_volume


# ---------------------------------------------------------------------------
# exact solver for tiny atomic instances


def _exact_sq_dist(x: np.ndarray, y: np.ndarray) -> Fraction:
    total = Fraction(0)
    for xd, yd in zip(x, y):
        diff = Fraction(float(xd) % 1.0) - Fraction(float(yd) % 1.0)
        total += min((diff + m) ** 2 for m in (-1, 0, 1))
    return total


def _permutation_search(cost: list[list[Fraction]], mass: Fraction):
    k = len(cost)
    best, best_perm = None, None
    for perm in itertools.permutations(range(k)):
        total = sum(cost[i][perm[i]] for i in range(k))
        if best is None or total < best:
            best, best_perm = total, perm
    moves = [(i, best_perm[i], mass) for i in range(k)]
    return best * mass, moves


def _tree_path(basis: set, rows: int, src: int, dst: int):
    """Cells on the tree path from row ``src`` to column ``dst`` (nodes: rows, then columns)."""
    adj: dict[int, list[tuple[int, tuple[int, int]]]] = {}
    for i, j in basis:
        adj.setdefault(i, []).append((rows + j, (i, j)))
        adj.setdefault(rows + j, []).append((i, (i, j)))
    prev = {src: None}
    stack = [src]
    target = rows + dst
    while stack:
        node = stack.pop()
        if node == target:
            break
        for nxt, cell in adj.get(node, []):
            if nxt not in prev:
                prev[nxt] = (node, cell)
                stack.append(nxt)
    path = []
    node = target
    while prev[node] is not None:
        node, cell = prev[node]
        path.append(cell)
    return path[::-1]


def _simplex_search(a: list[Fraction], b: list[Fraction], cost: list[list[Fraction]]):
    """Exact transportation simplex over the vertices of the transport polytope.

    Starts from the north-west corner vertex and pivots with Bland's rule,
    so degenerate vertices cannot cause cycling.
    """
    m, n = len(a), len(b)
    flow: dict[tuple[int, int], Fraction] = {}
    ra, rb = list(a), list(b)
    i = j = 0
    while i < m and j < n:
        x = min(ra[i], rb[j])
        flow[(i, j)] = x
        ra[i] -= x
        rb[j] -= x
        if ra[i] == 0 and i < m - 1:
            i += 1
        else:
            j += 1
    basis = set(flow)

    while True:
        u: dict[int, Fraction] = {0: Fraction(0)}
        v: dict[int, Fraction] = {}
        pending = list(basis)
        while pending:
            rest = []
            for (p, q) in pending:
                if p in u and q not in v:
                    v[q] = cost[p][q] - u[p]
                elif q in v and p not in u:
                    u[p] = cost[p][q] - v[q]
                elif p not in u and q not in v:
                    rest.append((p, q))
            if len(rest) == len(pending):
                break
            pending = rest
        entering = None
        for p in range(m):
            for q in range(n):
                if (p, q) not in basis and cost[p][q] - u[p] - v[q] < 0:
                    entering = (p, q)
                    break
            if entering:
                break
        if entering is None:
            break
        path = _tree_path(basis, m, entering[0], entering[1])
        # cycle: entering (+), then alternate along the path back to it
        minus = path[0::2]
        plus = path[1::2]
        theta = min(flow[c] for c in minus)
        leaving = min(c for c in minus if flow[c] == theta)
        for c in minus:
            flow[c] -= theta
        for c in plus:
            flow[c] += theta
        flow[entering] = theta
        basis.add(entering)
        basis.discard(leaving)
        del flow[leaving]

    value = sum(flow[c] * cost[c[0]][c[1]] for c in basis)
    return value, [(p, q, flow[(p, q)]) for (p, q) in sorted(basis)]


def w2_exact_small(
    mu: DiscreteMeasure, nu: DiscreteMeasure, method: str = "auto"
) -> tuple[float, TransportPlan]:
    """Exact squared Wasserstein distance (no 1/2 factor) between small atomic measures.

    ``method`` is ``"permutation"`` (equal counts, uniform masses only),
    ``"simplex"`` or ``"auto"``. Arithmetic is exact: atom coordinates and
    masses are converted to rationals, and the plan's exact cost is kept in
    ``plan.exact_value``.
    """
    ka, kb = len(mu.masses), len(nu.masses)
    if ka > MAX_ATOMS or kb > MAX_ATOMS:
        raise InstanceTooLargeError(f"instance too large: {ka}x{kb} atoms (max {MAX_ATOMS})")
    if abs(mu.masses.sum() - nu.masses.sum()) > 1e-12:
        raise UnbalancedError(
            f"unbalanced: total masses {mu.masses.sum()!r} and {nu.masses.sum()!r}"
        )
    a = [Fraction(float(m)) for m in mu.masses]
    b = [Fraction(float(m)) for m in nu.masses]
    # float round-off can leave the totals a few ulps apart
    sa, sb = sum(a), sum(b)
    if sb != sa and sb > 0:
        b = [m * sa / sb for m in b]
    cost = [[_exact_sq_dist(x, y) for y in nu.points] for x in mu.points]

    uniform = ka == kb and len(set(a)) == 1 and len(set(b)) == 1 and a[0] == b[0]
    if method == "auto":
        method = "permutation" if uniform else "simplex"
    if method == "permutation":
        if not uniform:
            raise ValueError("permutation search needs equal counts and uniform masses")
        value, moves = _permutation_search(cost, a[0])
    elif method == "simplex":
        value, moves = _simplex_search(a, b, cost)
    else:
        raise ValueError(f"unknown method {method!r}")

    gamma = np.zeros((ka, kb))
    for i, j, m in moves:
        gamma[i, j] += float(m)
    plan = TransportPlan(gamma, mu, nu, float(value), exact_value=value)
    return float(value), plan


# ---------------------------------------------------------------------------
# Gibbs kernel and Sinkhorn


def eps_schedule(start: float = 1e-1, stop: float = 1e-4, factor: float = 0.5) -> list[float]:
    """Geometric epsilon ladder from ``start`` down to ``stop`` (inclusive)."""
    if not (start > 0 and stop > 0 and 0 < factor < 1):
        raise ValueError("invalid epsilon schedule parameters")
    out = []
    eps = start
    while eps > stop * (1 + 1e-12):
        out.append(eps)
        eps *= factor
    out.append(stop)
    return out


def _lse_last(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.sum(np.exp(z - m), axis=-1)) + m[..., 0]


class GibbsKernel:
    """``exp(-c / eps)`` on a torus grid, applied one axis at a time."""

    def __init__(self, grid: TorusGrid, eps: float):
        self.grid = grid
        self.eps = eps
        self.axis_cost = axis_half_cost(grid)
        self.log_axis = -self.axis_cost / eps
        with np.errstate(divide="ignore"):
            self.log_axis_sqdist = self.log_axis + np.log(2.0 * self.axis_cost)

    def softmin(self, w: np.ndarray, weighted_axis: int | None = None) -> np.ndarray:
        """``log sum_j exp(w_j - c_ij / eps)``; optionally times ``d_axis(i, j)**2``."""
        out = w
        for ax in range(self.grid.dim):
            L = self.log_axis_sqdist if ax == weighted_axis else self.log_axis
            moved = np.moveaxis(out, ax, -1)
            red = _lse_last(moved[..., None, :] + L)
            out = np.moveaxis(red, -1, ax)
        return out

    def apply(self, v: np.ndarray) -> np.ndarray:
        K = np.exp(self.log_axis)
        if np.any(K == 0.0):
            raise KernelUnderflowError(
                f"kernel underflow at eps={self.eps:g}; use a larger terminal eps "
                "or log-domain updates"
            )
        out = v
        for ax in range(self.grid.dim):
            moved = np.moveaxis(out, ax, -1)
            out = np.moveaxis(moved @ K.T, -1, ax)
        return out


def _anderson(step, x0: np.ndarray, tol: float, max_iters: int, memory: int = 6):
    """Anderson-accelerated fixed-point iteration.

    ``step(x)`` returns ``(T(x), err(x))``. Stops at the first iterate with
    ``err <= tol`` and returns ``(x, T(x), err, iterations)``.
    """
    x = x0
    Gs, Fs = [], []
    best_err = np.inf
    err = np.inf
    tx = x
    for it in range(max_iters):
        tx, err = step(x)
        if not np.isfinite(err):
            raise ConvergenceError("non-finite iterate in fixed-point solve", err)
        if err <= tol:
            return x, tx, err, it
        r = tx - x
        if memory and err < 10 * best_err:
            Gs.append(tx)
            Fs.append(r)
            if len(Fs) > memory + 1:
                Gs.pop(0)
                Fs.pop(0)
        else:
            Gs, Fs = [tx], [r]
        best_err = min(best_err, err)
        if len(Fs) > 1:
            dF = np.stack([(Fs[i + 1] - Fs[i]).ravel() for i in range(len(Fs) - 1)], axis=1)
            dG = np.stack([(Gs[i + 1] - Gs[i]).ravel() for i in range(len(Gs) - 1)], axis=1)
            coef, *_ = np.linalg.lstsq(dF, r.ravel(), rcond=None)
            x = tx - (dG @ coef).reshape(x.shape)
            if not np.all(np.isfinite(x)):
                x, Gs, Fs = tx, [], []
        else:
            x = tx
    return x, tx, err, max_iters


@dataclass
class SinkhornResult:
    value: float
    plan: TransportPlan
    potentials: tuple[GridField, GridField]
    eps: float
    iterations: int
    marginal_residual: float

    def regularized_value(self) -> float:
        f, g = self.potentials
        return entropic_cost(f.values, g.values, self.plan.source, self.plan.target, self.eps)


def _transport_value(kernel: GibbsKernel, f: np.ndarray, g: np.ndarray) -> float:
    eps = kernel.eps
    total = 0.0
    for ax in range(kernel.grid.dim):
        total += float(np.sum(np.exp(f / eps + kernel.softmin(g / eps, weighted_axis=ax))))
    return total


def _dense_plan(grid: TorusGrid, f: np.ndarray, g: np.ndarray, eps: float) -> np.ndarray | None:
    if grid.size**2 > DENSE_PLAN_LIMIT:
        return None
    C = CostMatrix.from_grid(grid).entries
    return np.exp((f.ravel()[:, None] + g.ravel()[None, :] - C) / eps)


def entropic_cost(f: np.ndarray, g: np.ndarray, mu: GridField, nu: GridField, eps: float) -> float:
    """Dual value ``<f, a> + <g, b> - eps * sum(gamma)`` of the entropic problem.

    At the optimum this equals ``<c, gamma> + eps * sum(gamma * (log gamma - 1))``;
    the dual form is stationary there, so potential errors enter only at
    second order.
    """
    kernel = GibbsKernel(mu.grid, eps)
    a = mu.values * mu.grid.cell_volume
    b = nu.values * nu.grid.cell_volume
    return _dual_value(kernel, f, g, a, b)


def _dual_value(kernel, f, g, a, b) -> float:
    eps = kernel.eps
    mass = float(np.sum(np.exp(f / eps + kernel.softmin(g / eps))))
    return float(np.sum(f * a) + np.sum(g * b) - eps * mass)


def _balanced_solve(kernel, la, lb, g0, tol, max_iters, memory=6):
    eps = kernel.eps
    b = np.exp(lb)

    def step(g):
        f = eps * (la - kernel.softmin(g / eps))
        g_new = eps * (lb - kernel.softmin(f / eps))
        err = float(np.sum(b * np.abs(np.expm1((g - g_new) / eps))))
        return g_new, err

    g, _, err, its = _anderson(step, g0, tol, max_iters, memory)
    f = eps * (la - kernel.softmin(g / eps))
    return f, g, err, its


def sinkhorn(
    mu: DensityField,
    nu: DensityField,
    eps_schedule_: list[float] | None = None,
    max_iters: int = 20000,
    tol: float = 1e-9,
    log_domain: str | bool = "auto",
    stage_tol: float = 1e-4,
    anderson: int = 6,
) -> SinkhornResult:
    """Entropic optimal transport between two grid densities.

    Works through ``eps_schedule_`` (decreasing), warm-starting each stage
    from the previous potentials. Stages with ``eps < 1e-3`` always run in
    the log domain; with ``log_domain=False`` an underflowing kernel raises
    ``KernelUnderflowError``. The reported ``value`` is the transport cost
    ``sum(gamma * d**2)`` of the final plan, entropic term excluded.
    """
    mu.same_grid(nu)
    grid = mu.grid
    sched = list(eps_schedule_) if eps_schedule_ is not None else eps_schedule()
    if not sched or any(e <= 0 for e in sched) or any(
        sched[i + 1] > sched[i] for i in range(len(sched) - 1)
    ):
        raise ValueError("eps schedule must be positive and decreasing")
    if tol <= 0:
        raise ValueError("tol must be positive")

    a = mu.values * grid.cell_volume
    b = nu.values * grid.cell_volume
    la, lb = np.log(a), np.log(b)
    f = np.zeros(grid.shape)
    g = np.zeros(grid.shape)
    total_iters = 0
    err = np.inf
    for s, eps in enumerate(sched):
        terminal = s == len(sched) - 1
        kernel = GibbsKernel(grid, eps)
        use_log = log_domain is True or (log_domain == "auto" and eps < 1e-3)
        target = tol if terminal else max(tol, stage_tol)
        if use_log:
            f, g, err, its = _balanced_solve(
                kernel, la, lb, g, target, max_iters, anderson
            )
        else:
            u = np.exp(f / eps)
            v = np.exp(g / eps)
            its = max_iters
            for it in range(max_iters):
                Kv = kernel.apply(v)
                with np.errstate(divide="ignore", invalid="ignore"):
                    u = a / Kv
                    Ku = kernel.apply(u)
                    v_new = b / Ku
                if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v_new))):
                    raise KernelUnderflowError(
                        f"kernel underflow at eps={eps:g}; switch to log-domain updates"
                    )
                err = float(np.sum(np.abs(v * Ku - b)))
                v = v_new
                if err <= target:
                    its = it
                    break
            with np.errstate(divide="ignore"):
                f, g = eps * np.log(u), eps * np.log(v)
        total_iters += its
        if terminal and err > tol:
            raise ConvergenceError(
                f"sinkhorn did not converge at eps={eps:g}: marginal residual {err:.3e}",
                err,
            )
    eps = sched[-1]
    kernel = GibbsKernel(grid, eps)
    # recompute rows exactly; the column residual is what remains
    f = eps * (la - kernel.softmin(g / eps))
    col = np.exp(g / eps + kernel.softmin(f / eps))
    resid = float(np.sum(np.abs(col - b)))
    value = _transport_value(kernel, f, g)
    plan = TransportPlan(_dense_plan(grid, f, g, eps), mu, nu, value)
    return SinkhornResult(
        value, plan, (GridField(grid, f), GridField(grid, g)), eps, total_iters, resid
    )


def _self_potential(kernel: GibbsKernel, la: np.ndarray, tol: float, max_iters: int):
    eps = kernel.eps
    a = np.exp(la)

    def step(f):
        t = eps * (la - kernel.softmin(f / eps))
        err = float(np.sum(a * np.abs(np.expm1((f - t) / eps))))
        return 0.5 * (f + t), err

    f, _, err, its = _anderson(step, 0.5 * eps * la, tol, max_iters)
    if err > tol:
        raise ConvergenceError(f"symmetric sinkhorn stalled at residual {err:.3e}", err)
    return f


def sinkhorn_divergence(
    mu: DensityField,
    nu: DensityField,
    eps: float,
    tol: float = 1e-12,
    max_iters: int = 20000,
    potentials: tuple[np.ndarray, np.ndarray] | None = None,
) -> float:
    """``OT_eps(mu, nu) - OT_eps(mu, mu) / 2 - OT_eps(nu, nu) / 2``.

    Approximates ``W2**2 / 2`` without the blur bias that the raw plan cost
    carries when ``eps`` is comparable to the squared grid spacing. Optimal
    potentials for ``(mu, nu)`` may be passed in to skip that solve.
    """
    mu.same_grid(nu)
    grid = mu.grid
    kernel = GibbsKernel(grid, eps)
    la = np.log(mu.values * grid.cell_volume)
    lb = np.log(nu.values * grid.cell_volume)
    if potentials is None:
        f, g, err, _ = _balanced_solve(kernel, la, lb, 0.5 * eps * lb, tol, max_iters)
        if err > tol:
            raise ConvergenceError(f"sinkhorn stalled at residual {err:.3e}", err)
    else:
        f, g = potentials
    fa = _self_potential(kernel, la, tol, max_iters)
    fb = _self_potential(kernel, lb, tol, max_iters)
    a, b = np.exp(la), np.exp(lb)
    ab = _dual_value(kernel, f, g, a, b)
    aa = _dual_value(kernel, fa, fa, a, a)
    bb = _dual_value(kernel, fb, fb, b, b)
    return ab - 0.5 * aa - 0.5 * bb


# ---------------------------------------------------------------------------
# c-transform


@dataclass
class CTransformField:
    """``f(x) = min_y [d(x, y)**2 / 2 + tau * log_rho(y)] / tau`` with its minimizers.

    ``argmin_map`` is the minimizing node (lowest index on ties). When the
    transform was refined between nodes, ``argmin_point`` holds the
    continuous minimizer and ``refined`` marks the nodes where it beat every
    node value.
    """

    f: GridField
    argmin_map: np.ndarray
    tau: float
    argmin_point: np.ndarray
    refined: np.ndarray = field(repr=False)

    @property
    def grid(self) -> TorusGrid:
        return self.f.grid


def _pair_blocks(grid: TorusGrid, block_entries: int = 2**21):
    X = grid.coords()
    rows = max(1, block_entries // grid.size)
    for start in range(0, grid.size, rows):
        stop = min(grid.size, start + rows)
        d2 = torus_distance_sq(X[start:stop, None, :], X[None, :, :])
        yield start, stop, 0.5 * d2


def _subgrid_minimize(interp: TrigInterpolant, X: np.ndarray, Y: np.ndarray, tau: float):
    """Damped Newton on ``y -> |y - x|**2 / 2 + tau * L(y)`` from starting points ``Y``."""
    n = X.shape[1]
    eye = np.eye(n)

    def phi(Yc, Xc=X):
        return 0.5 * np.sum((Yc - Xc) ** 2, axis=1) + tau * interp.evaluate(Yc, derivatives=False)

    ok = np.ones(X.shape[0], dtype=bool)
    cur = phi(Y)
    for _ in range(60):
        _, grad, hess = interp.evaluate(Y)
        gphi = (Y - X) + tau * grad
        hphi = eye + tau * hess
        eig = np.linalg.eigvalsh(hphi)
        ok &= eig[:, 0] > 1e-12
        step = np.zeros_like(Y)
        if ok.any():
            step[ok] = np.linalg.solve(hphi[ok], gphi[ok][..., None])[..., 0]
        t = np.ones(X.shape[0])
        trial = Y - step
        new = phi(trial)
        for _ in range(40):
            bad = new > cur + 1e-15 * np.abs(cur)
            if not bad.any():
                break
            t[bad] *= 0.5
            trial[bad] = Y[bad] - t[bad, None] * step[bad]
            new[bad] = phi(trial[bad], X[bad])
        bad = new > cur + 1e-15 * np.abs(cur)
        trial[bad] = Y[bad]
        new[bad] = cur[bad]
        moved = np.max(np.abs(trial - Y))
        Y, cur = trial, new
        if moved < 1e-15:
            break
    return Y, cur, ok


def c_transform(log_rho: GridField, tau: float, subgrid: bool = True) -> CTransformField:
    """c-transform of ``tau * log_rho`` divided by ``tau``.

    The minimization over all nodes is exhaustive. With ``subgrid=True`` the
    node minimizer is then polished by Newton's method on the band-limited
    interpolant of ``log_rho``; the refined value is kept only where it is
    lower, so the pairwise inequality against every node still holds.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if not np.all(np.isfinite(log_rho.values)):
        raise ValueError("log_rho must be finite")
    grid = log_rho.grid
    L = log_rho.flat
    best = np.empty(grid.size)
    arg = np.empty(grid.size, dtype=np.int64)
    for start, stop, c in _pair_blocks(grid):
        V = c + tau * L[None, :]
        j = np.argmin(V, axis=1)
        arg[start:stop] = j
        best[start:stop] = V[np.arange(stop - start), j]

    X = grid.coords()
    points = X[arg].copy()
    refined = np.zeros(grid.size, dtype=bool)
    if subgrid and grid.points_per_dim >= 4:
        Y0 = X + wrap_displacement(X[arg] - X)
        Y, val, ok = _subgrid_minimize(TrigInterpolant(log_rho), X, Y0, tau)
        # |y - x|^2 is the torus cost only inside the minimal-image box
        near = np.all(np.abs(Y - X) < 0.5, axis=1)
        refined = ok & near & (val < best)
        best = np.where(refined, val, best)
        points[refined] = Y[refined] % 1.0
    return CTransformField(
        GridField(grid, best / tau), arg.reshape(grid.shape), tau, points, refined
    )


@dataclass
class CTransformCheck:
    ineq_violation: float
    ineq_worst_pair: tuple[int, int]
    equal_gap: float
    equal_gap_signed: float
    equal_worst_node: int

    def passed(self, tol: float = 1e-12) -> bool:
        return self.ineq_violation <= tol and self.equal_gap <= tol


def verify_ctransform_identities(ct: CTransformField, log_rho: GridField) -> CTransformCheck:
    """Worst violations of the two defining relations, in units of ``tau * f``.

    ``ineq_violation`` is ``max_{i,j} tau f_i - c_ij - tau log_rho_j`` (positive
    means violated). ``equal_gap`` is the largest ``|tau f_i - value at the
    recorded minimizer|``.
    """
    ct.f.same_grid(log_rho)
    grid = log_rho.grid
    tau = ct.tau
    tf = tau * ct.f.flat
    L = log_rho.flat
    worst, worst_pair = -np.inf, (0, 0)
    for start, stop, c in _pair_blocks(grid):
        V = tf[start:stop, None] - c - tau * L[None, :]
        k = int(np.argmax(V))
        i, j = divmod(k, grid.size)
        if V[i, j] > worst:
            worst, worst_pair = float(V[i, j]), (start + i, j)

    X = grid.coords()
    at_min = 0.5 * torus_distance_sq(X, ct.argmin_point) + tau * L[ct.argmin_map.ravel()]
    if ct.refined.any():
        interp = TrigInterpolant(log_rho)
        r = ct.refined
        at_min[r] = 0.5 * torus_distance_sq(X[r], ct.argmin_point[r]) + tau * interp.evaluate(
            ct.argmin_point[r], derivatives=False
        )
    gap = tf - at_min
    node = int(np.argmax(np.abs(gap)))
    return CTransformCheck(worst, worst_pair, float(abs(gap[node])), float(gap[node]), node)


def _sym_inv_apply(A: np.ndarray, tau: float) -> np.ndarray:
    """``A (I + tau A)^{-1}`` for a stack of symmetric matrices; checks definiteness."""
    n = A.shape[-1]
    B = np.eye(n) + tau * A
    if np.min(np.linalg.eigvalsh(B)[..., 0]) <= 0:
        raise DegenerateMapError(
            "degenerate map: I + tau * hess(log rho) is not positive definite "
            "(tau too large for this density)"
        )
    return A @ np.linalg.inv(B)


def fest_residual(ct: CTransformField, log_rho: GridField, tau: float,
                  interpolation: str = "multilinear") -> GridField:
    """Per-node max-norm gap in the Hessian transfer identity.

    Compares ``hess f`` at the forward image ``x + tau * grad log_rho(x)``
    with ``A (I + tau A)^{-1}``, ``A = hess log_rho(x)``. The finite-difference
    Hessian of ``f`` is carried to the image by multilinear interpolation, or
    by the band-limited interpolant with ``interpolation="trigonometric"``
    (a diagnostic that isolates the finite-difference error).
    """
    if interpolation not in ("multilinear", "trigonometric"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    ct.f.same_grid(log_rho)
    grid = log_rho.grid
    n = grid.dim
    A = hessian(log_rho).matrix()
    rhs = _sym_inv_apply(A, tau)
    Hf = hessian(ct.f)
    X = grid.coords()
    img = X + tau * gradient(log_rho).reshape(n, -1).T
    lhs = np.empty((grid.size, n, n))
    for i in range(n):
        for j in range(i, n):
            comp = GridField(grid, Hf.component(i, j))
            if interpolation == "multilinear":
                vals = interpolate(comp, img)
            else:
                vals = TrigInterpolant(comp).evaluate(img, derivatives=False)
            lhs[:, i, j] = vals
            lhs[:, j, i] = vals
    diff = np.abs(lhs - rhs.reshape(grid.size, n, n)).max(axis=(1, 2))
    return GridField(grid, diff)


def potential_psd_margin(ct: CTransformField) -> tuple[float, float]:
    """Smallest eigenvalue of ``I - tau * hess f`` over nodes, and a scale for it.

    The scale is ``max(1, largest |eigenvalue| of tau * hess f)``.
    """
    H = hessian(ct.f).matrix() * ct.tau
    eig = np.linalg.eigvalsh(H)
    return float(1.0 - eig.max()), float(max(1.0, np.abs(eig).max()))


def sym_mat_from(grid: TorusGrid, mats: np.ndarray) -> SymMatField:
    n = grid.dim
    comps = [mats[..., i, j] for i in range(n) for j in range(i, n)]
    return SymMatField(grid, np.stack(comps))


def plan_dense_value(plan: TransportPlan, grid: TorusGrid) -> float:
    """Transport cost of a materialized plan, recomputed from the dense cost."""
    if plan.gamma is None:
        raise ValueError("plan was not materialized")
    C = CostMatrix.from_grid(grid).entries
    return float(math.fsum((2.0 * C * plan.gamma).ravel()))
