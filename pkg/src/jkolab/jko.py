"""JKO proximal steps for the entropy on the torus, trajectories, and step residuals.

One step solves

    min_rho  W2(rho_prev, rho)**2 / 2 + tau * int rho log rho

with entropic regularization of the transport term. The scaling iteration
alternates ``u <- a / (K v)`` and ``v <- (K^T u / h^n) ** (-w / (w + eps))``
on the Gibbs kernel ``K = exp(-d**2 / (2 eps))``, carried out on log-domain
potentials and accelerated with Anderson mixing.

The entropic transport cost behaves like ``W2**2 / 2 + (eps / 2) H(rho) + const``
in the target, so an entropy weight ``w = tau`` would take a step of
length about ``tau + eps / 2``. By default the weight is ``w = tau - eps / 2``,
which removes that bias to first order in ``eps``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConvergenceError,
    DegenerateMapError,
    DegeneratePotentialError,
    JkoLabError,
    PositivityLostError,
)
from .torus import (
    DensityField,
    GridField,
    TorusGrid,
    gradient,
    hessian,
    interpolate,
    min_eig_stats,
)
from .transport import (
    GibbsKernel,
    _anderson,
    _balanced_solve,
    _dual_value,
    _transport_value,
    c_transform,
    sinkhorn_divergence,
)

__all__ = [
    "InnerSettings",
    "JkoConfig",
    "StepDiagnostics",
    "JkoTrajectory",
    "initial_density",
    "entropy",
    "jko_step",
    "mirror_descent_step",
    "run_trajectory",
    "monge_ampere_residual",
    "optimality_residual",
]

ORACLE_MAX_M = 32


@dataclass
class InnerSettings:
    """Settings of the entropic scaling solver used inside every step.

    The terminal ``eps`` defaults to ``min(tau / 10, eps_grid_factor * h**2)``:
    the entropic blur then shrinks with the grid, so step residuals keep
    their second-order decay under refinement.
    """

    eps_terminal: float | None = None
    eps_grid_factor: float = 1.0
    eps_start_factor: float = 4.0
    tol: float = 1e-11
    max_iters: int = 20000
    anderson: int = 6
    oracle: bool = False
    debias: bool = True
    bias_correction: bool = True

    def terminal_eps(self, tau: float, grid: TorusGrid) -> float:
        if self.eps_terminal is not None:
            return self.eps_terminal
        return min(tau / 10.0, self.eps_grid_factor * grid.spacing**2)

    def entropy_weight(self, tau: float, eps: float) -> float:
        """Weight of the entropy in the regularized step: ``tau - eps / 2`` or ``tau``."""
        return tau - 0.5 * eps if self.bias_correction else tau

    def schedule(self, tau: float, grid: TorusGrid) -> list[float]:
        eps = self.terminal_eps(tau, grid)
        out = []
        e = eps * self.eps_start_factor
        while e > eps * (1 + 1e-12):
            out.append(e)
            e *= 0.5
        out.append(eps)
        return out


@dataclass
class JkoConfig:
    K: float
    N: int
    grid: TorusGrid
    inner: InnerSettings = field(default_factory=InnerSettings)

    def __post_init__(self):
        if not self.K > 0:
            raise ValueError("K must be positive")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError("N must be a positive integer")
        self.N = int(self.N)

    @property
    def tau(self) -> float:
        return self.K / self.N


@dataclass
class StepDiagnostics:
    """What one step reports.

    ``w2_plan`` is the transport cost of the entropic plan; it contains the
    kernel blur. ``w2_debiased`` is twice the Sinkhorn divergence, which
    vanishes for identical marginals and is the value used for descent.
    ``objective`` is ``w2_plan / 2 + tau * entropy``.
    """

    k: int
    eps: float
    iterations: int
    fixed_point_residual: float
    entropy: float
    w2_plan: float
    w2_debiased: float | None
    objective: float
    debiased_objective: float | None
    ma_residual: float | None = None
    ma_residual_mirrored: float | None = None
    optimality_residual: float | None = None
    oracle_objective_gap: float | None = None
    oracle_l1: float | None = None
    potentials: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    def summary(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "potentials"}
        return out


@dataclass
class JkoTrajectory:
    config: JkoConfig
    densities: list[DensityField]
    diagnostics: list[StepDiagnostics] = field(default_factory=list)

    @property
    def tau(self) -> float:
        return self.config.tau

    def u(self, t: float) -> DensityField:
        """Piecewise-constant interpolant: ``rho_k`` on ``[k tau, (k+1) tau)``, ``rho_N`` at ``K``."""
        if t < 0 or t > self.config.K * (1 + 1e-12):
            raise ValueError(f"t={t} outside [0, K]")
        k = min(int(math.floor(t / self.tau + 1e-9)), self.config.N)
        return self.densities[k]

    def entropies(self) -> list[float]:
        return [entropy(r) for r in self.densities]


def initial_density(grid: TorusGrid, family: str = "cosine", amplitude: float = 0.5,
                    second: float = 0.0) -> DensityField:
    """Smooth positive test densities.

    ``cosine``: ``1 + a cos(2 pi x)`` (times ``cos(2 pi y)`` in 2-D).
    ``two_mode``: adds ``second * sin(4 pi x)``; not symmetric about any node.
    ``uniform``: constant 1.
    """
    X = grid.mesh()
    if family == "uniform":
        vals = np.ones(grid.shape)
    elif family == "cosine":
        vals = 1.0 + amplitude * np.prod([np.cos(2 * np.pi * x) for x in X], axis=0)
    elif family == "two_mode":
        vals = (1.0 + amplitude * np.prod([np.cos(2 * np.pi * x) for x in X], axis=0)
                + second * np.sin(4 * np.pi * X[0]))
    else:
        raise ValueError(f"unknown density family {family!r}")
    if np.min(vals) <= 0:
        raise ValueError("initial density parameters give a non-positive density")
    return DensityField.normalized(grid, vals)


def entropy(rho: GridField) -> float:
    """``sum(rho log rho) * h**n``."""
    if np.min(rho.values) <= 0:
        raise ValueError("entropy needs a strictly positive density")
    return float(np.sum(rho.values * np.log(rho.values)) * rho.grid.cell_volume)


def _fold_check(rho: DensityField, tau: float) -> None:
    _, a, _ = min_eig_stats(hessian(rho.log()))
    if 1.0 + tau * a <= 0:
        raise DegenerateMapError(
            f"degenerate map: 1 + tau * min eig hess log rho = {1 + tau * a:.3g} <= 0 "
            f"(tau={tau:g} is too large for this density)"
        )


def _prox_solve(rho_prev: DensityField, tau: float, inner: InnerSettings):
    grid = rho_prev.grid
    hn = grid.cell_volume
    la = np.log(rho_prev.values * hn)
    g = -tau * np.log(rho_prev.values)
    total = 0
    sched = inner.schedule(tau, grid)
    err = np.inf
    for s, eps in enumerate(sched):
        kernel = GibbsKernel(grid, eps)
        w = inner.entropy_weight(tau, eps)
        p = w / (w + eps)
        shift = eps * math.log(hn)

        def step(g, kernel=kernel, eps=eps, p=p, shift=shift, scale=w + eps):
            f = eps * (la - kernel.softmin(g / eps))
            s_ = eps * kernel.softmin(f / eps)
            g_new = -p * (s_ - shift)
            return g_new, float(np.max(np.abs(g_new - g))) / scale

        terminal = s == len(sched) - 1
        target = inner.tol if terminal else max(inner.tol, 1e-8)
        g, _, err, its = _anderson(step, g, target, inner.max_iters, inner.anderson)
        total += its
        if terminal and err > inner.tol:
            raise ConvergenceError(
                f"JKO scaling iteration did not converge at eps={eps:g}: residual {err:.3e}",
                err,
            )
    eps = sched[-1]
    kernel = GibbsKernel(grid, eps)
    f = eps * (la - kernel.softmin(g / eps))
    log_b = g / eps + kernel.softmin(f / eps)
    return f, g, np.exp(log_b) / hn, kernel, total, err


def jko_step(rho_prev: DensityField, cfg: JkoConfig, k: int | None = None):
    """One proximal step. Returns ``(rho_next, StepDiagnostics)``."""
    if rho_prev.grid != cfg.grid:
        raise ValueError("density grid differs from the configured grid")
    tau = cfg.tau
    _fold_check(rho_prev, tau)
    f, g, rho, kernel, its, err = _prox_solve(rho_prev, tau, cfg.inner)
    if not np.all(np.isfinite(rho)) or np.min(rho) < 1e-12:
        raise PositivityLostError(
            f"positivity lost: min density {np.min(rho):.3e} (eps too small or tau too large)"
        )
    rho_next = DensityField(cfg.grid, rho)
    ent = entropy(rho_next)
    w2_plan = _transport_value(kernel, f, g)
    w2_deb = deb_obj = None
    if cfg.inner.debias:
        sd = sinkhorn_divergence(rho_prev, rho_next, kernel.eps, potentials=(f, g))
        w2_deb = 2.0 * sd
        deb_obj = sd + tau * ent
    diag = StepDiagnostics(
        k=k if k is not None else 1,
        eps=kernel.eps,
        iterations=its,
        fixed_point_residual=err,
        entropy=ent,
        w2_plan=w2_plan,
        w2_debiased=w2_deb,
        objective=0.5 * w2_plan + tau * ent,
        debiased_objective=deb_obj,
        potentials=(f, g),
    )
    if cfg.inner.oracle and cfg.grid.points_per_dim <= ORACLE_MAX_M:
        ref = mirror_descent_step(rho_prev, cfg)
        w = cfg.inner.entropy_weight(tau, kernel.eps)
        mine = regularized_objective(rho_prev, rho_next, w, kernel.eps)
        theirs = regularized_objective(rho_prev, ref, w, kernel.eps)
        diag.oracle_objective_gap = abs(mine - theirs)
        diag.oracle_l1 = float(np.sum(np.abs(rho - ref.values)) * cfg.grid.cell_volume)
    return rho_next, diag


def regularized_objective(rho_prev: DensityField, rho: DensityField, weight: float, eps: float,
                          tol: float = 1e-13) -> float:
    """``OT_eps(rho_prev, rho) + weight * entropy(rho)``.

    With ``weight = InnerSettings.entropy_weight(tau, eps)`` this is the
    functional ``jko_step`` minimizes.
    """
    grid = rho.grid
    kernel = GibbsKernel(grid, eps)
    hn = grid.cell_volume
    a, b = rho_prev.values * hn, rho.values * hn
    f, g, resid, _ = _balanced_solve(kernel, np.log(a), np.log(b), 0.5 * eps * np.log(b),
                                     tol, 50000)
    if resid > tol:
        raise ConvergenceError(f"sinkhorn stalled at residual {resid:.3e}", resid)
    return _dual_value(kernel, f, g, a, b) + weight * entropy(rho)


def mirror_descent_step(rho_prev: DensityField, cfg: JkoConfig, max_iters: int = 5000,
                        tol: float = 1e-10) -> DensityField:
    """Cross-check minimizer: entropic mirror descent on the simplex.

    Minimizes the same regularized functional as ``jko_step``, taking the
    transport gradient from a balanced Sinkhorn solve at every iterate.
    Meant for grids with at most 32 points per dimension.
    """
    grid = cfg.grid
    if grid.points_per_dim > ORACLE_MAX_M:
        raise ValueError("mirror-descent oracle is limited to M <= 32")
    eps = cfg.inner.terminal_eps(cfg.tau, grid)
    tau = cfg.inner.entropy_weight(cfg.tau, eps)
    kernel = GibbsKernel(grid, eps)
    hn = grid.cell_volume
    la = np.log(rho_prev.values * hn)

    def evaluate(lb, g0):
        f, g, resid, _ = _balanced_solve(kernel, la, lb, g0, 1e-14, 50000)
        b = np.exp(lb)
        J = _dual_value(kernel, f, g, np.exp(la), b) + tau * float(np.sum(b * (lb - math.log(hn))))
        grad = g + tau * (lb - math.log(hn))
        return J, grad, g

    lb = la.copy()
    J, grad, g = evaluate(lb, 0.5 * eps * lb)
    eta = 1.0 / (tau + eps)
    for _ in range(max_iters):
        b = np.exp(lb)
        stat = float(np.max(np.abs(grad - np.sum(grad * b))))
        if stat < tol:
            break
        trial = lb - eta * grad
        trial -= np.log(np.sum(np.exp(trial - trial.max()))) + trial.max()
        Jt, gt, g_t = evaluate(trial, g)
        if Jt <= J:
            lb, J, grad, g = trial, Jt, gt, g_t
        else:
            eta *= 0.5
            if eta < 1e-8 / (tau + eps):
                break
    return DensityField.normalized(grid, np.exp(lb) / hn)


def _with_step(exc: JkoLabError, k: int) -> JkoLabError:
    exc.step = k
    exc.args = (f"step {k}: {exc.args[0] if exc.args else exc}",) + tuple(exc.args[1:])
    return exc


def run_trajectory(rho0: DensityField, cfg: JkoConfig, residuals: bool = True,
                   progress=None) -> JkoTrajectory:
    """Iterate ``jko_step`` N times from ``rho0``.

    With ``residuals=True`` every step also records the Monge-Ampere
    residual (both map orientations) and the optimality residual.
    """
    densities = [rho0]
    diags = []
    rho = rho0
    for k in range(1, cfg.N + 1):
        try:
            nxt, diag = jko_step(rho, cfg, k=k)
            if residuals:
                diag.ma_residual = monge_ampere_residual(rho, nxt, cfg.tau)[1]
                diag.ma_residual_mirrored = monge_ampere_residual(nxt, rho, cfg.tau)[1]
                diag.optimality_residual = optimality_residual(rho, nxt, cfg.tau)[1]
        except JkoLabError as exc:
            raise _with_step(exc, k) from exc
        densities.append(nxt)
        diags.append(diag)
        rho = nxt
        if progress is not None:
            progress(k, diag)
    return JkoTrajectory(cfg, densities, diags)


def monge_ampere_residual(rho_prev: DensityField, rho_next: DensityField, tau: float):
    """``|rho_next(x) - rho_prev(phi(x)) det(d phi(x))|`` with ``phi = id + tau grad log rho_next``.

    Swapping the arguments checks the opposite orientation of the map.
    Returns ``(residual field, max residual)``.
    """
    rho_prev.same_grid(rho_next)
    grid = rho_next.grid
    n = grid.dim
    L = rho_next.log()
    dphi = np.eye(n) + tau * hessian(L).matrix()
    eig = np.linalg.eigvalsh(dphi)
    if np.min(eig[..., 0]) <= 0:
        raise DegenerateMapError("map not orientation-preserving: I + tau hess log rho has "
                                 "a non-positive eigenvalue")
    det = np.linalg.det(dphi).ravel()
    img = grid.coords() + tau * gradient(L).reshape(n, -1).T
    pulled = interpolate(rho_prev, img) * det
    r = np.abs(rho_next.flat - pulled)
    return GridField(grid, r), float(r.max())


def optimality_residual(rho_prev: DensityField, rho_next: DensityField, tau: float):
    """``f - log rho_prev + log det(I - tau hess f) - tau |grad f|**2 / 2``.

    ``f`` is the (sub-grid refined) c-transform of ``log rho_next``.
    Returns ``(residual field, max |residual|)``.
    """
    rho_prev.same_grid(rho_next)
    grid = rho_next.grid
    n = grid.dim
    ct = c_transform(rho_next.log(), tau, subgrid=True)
    B = np.eye(n) - tau * hessian(ct.f).matrix()
    if np.min(np.linalg.eigvalsh(B)[..., 0]) <= 0:
        raise DegeneratePotentialError(
            "degenerate potential: I - tau hess f is not positive definite"
        )
    _, logdet = np.linalg.slogdet(B)
    grad = gradient(ct.f)
    r = ct.f.values - np.log(rho_prev.values) + logdet - 0.5 * tau * np.sum(grad**2, axis=0)
    return GridField(grid, r), float(np.max(np.abs(r)))
