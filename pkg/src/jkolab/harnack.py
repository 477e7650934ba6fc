"""Checks of the Hessian lower bound and the Harnack inequalities along a JKO trajectory.

Notation: ``a_k`` is the smallest eigenvalue of the finite-difference Hessian
of ``log rho_k`` over all nodes, ``tau = K / N``, ``n`` the dimension.
Every check returns a pydantic report that serializes to JSON and renders
as an aligned text table.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from pydantic import BaseModel

from .errors import NoAdmissiblePairsError, PosViolatedError, ThresholdUndefinedError
from .jko import JkoTrajectory
from .torus import (
    DensityField,
    TorusGrid,
    hessian,
    interpolate,
    min_eig_stats,
    torus_distance_sq,
    wrap_displacement,
)

__all__ = [
    "DiffHarnackRecord",
    "DiffHarnackReport",
    "RecursionRow",
    "RecursionReport",
    "LemmaRow",
    "LemmaReport",
    "StepHarnackReport",
    "HarnackWindow",
    "HarnackReport",
    "ChainReport",
    "min_hessian_values",
    "check_diff_harnack",
    "single_mode_diff_harnack",
    "recursion_sides",
    "check_recursion",
    "scalar_lemma",
    "check_step_harnack",
    "sample_nodes",
    "admissible",
    "check_harnack_pair",
    "check_chain",
    "format_table",
]


def format_table(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    """Right-aligned plain-text table; floats in ``%.6g``."""
    if not rows:
        return "(no rows)"
    columns = list(columns or rows[0].keys())

    def cell(v):
        if isinstance(v, bool):
            return "yes" if v else "no"
        if isinstance(v, float):
            return f"{v:.6g}"
        if v is None:
            return "-"
        return str(v)

    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.rjust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def _verdict(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


def min_hessian_values(traj: JkoTrajectory) -> list[float]:
    """``a_k`` for ``k = 0..N``."""
    return [min_eig_stats(hessian(r.log()))[1] for r in traj.densities]


# ---------------------------------------------------------------------------
# differential Harnack


class DiffHarnackRecord(BaseModel):
    k: int
    t: float
    a_k: float
    bound: float
    slack: float
    passed: bool


class DiffHarnackReport(BaseModel):
    C: float
    tau: float
    tol_rel: float
    tol_abs: float
    strict: bool
    records: list[DiffHarnackRecord]
    passed: bool
    worst_slack: float
    smallest_C: float | None

    def to_text(self) -> str:
        head = (f"Hessian lower bound a_k >= -C/(tau (k+1)), C={self.C:g}: {_verdict(self.passed)}; "
                f"smallest passing C in [1/2, 1]: {self.smallest_C}")
        return head + "\n" + format_table([r.model_dump() for r in self.records])


def _diff_pass(a, bounds, tol_rel, tol_abs):
    return a - bounds >= -(tol_abs + tol_rel * np.abs(bounds))


def check_diff_harnack(traj: JkoTrajectory, C: float = 1.0, tol_rel: float = 1e-3,
                       tol_abs: float = 0.0, strict: bool = False,
                       a_values: Sequence[float] | None = None) -> DiffHarnackReport:
    """``a_k >= -C / (tau (k + 1))`` for ``k = 1..N``.

    The tolerance is ``tol_abs + tol_rel * |bound|``; ``strict`` sets both to 0.
    Also bisects (to 1e-3) for the smallest ``C`` in ``[1/2, 1]`` that passes.
    """
    if not 0.5 <= C <= 1.0:
        raise ValueError("C must lie in [1/2, 1]")
    if strict:
        tol_rel = tol_abs = 0.0
    tau = traj.tau
    a_all = np.asarray(a_values if a_values is not None else min_hessian_values(traj))
    ks = np.arange(1, len(a_all))
    a = a_all[1:]

    def bounds(c):
        return -c / (tau * (ks + 1))

    ok = _diff_pass(a, bounds(C), tol_rel, tol_abs)
    records = [
        DiffHarnackRecord(k=int(k), t=float(k * tau), a_k=float(ak), bound=float(b),
                          slack=float(ak - b), passed=bool(o))
        for k, ak, b, o in zip(ks, a, bounds(C), ok)
    ]

    def passes(c):
        return bool(np.all(_diff_pass(a, bounds(c), tol_rel, tol_abs)))

    smallest = None
    if passes(1.0):
        if passes(0.5):
            smallest = 0.5
        else:
            lo, hi = 0.5, 1.0
            while hi - lo > 1e-3:
                mid = 0.5 * (lo + hi)
                lo, hi = (lo, mid) if passes(mid) else (mid, hi)
            smallest = hi
    return DiffHarnackReport(
        C=C, tau=tau, tol_rel=tol_rel, tol_abs=tol_abs, strict=strict, records=records,
        passed=bool(np.all(ok)), worst_slack=float(np.min(a - bounds(C))) if len(a) else 0.0,
        smallest_C=smallest,
    )


def single_mode_diff_harnack(b0: float, times, C: float = 1.0) -> list[dict]:
    """Exact heat flow of ``1 + b0 cos(2 pi x)``: ``(log u)'' >= -4 pi^2 b / (1 + b)`` at the peak.

    The minimum over x of ``(log u)''`` sits at ``x = 0``; compare with ``-C / t``.
    """
    rows = []
    for t in times:
        b = b0 * math.exp(-4 * math.pi**2 * t)
        a = -4 * math.pi**2 * b / (1 + b)
        rows.append({"t": float(t), "a": a, "bound": -C / t, "passed": a >= -C / t})
    return rows


# ---------------------------------------------------------------------------
# recursion on the lower bounds


class RecursionRow(BaseModel):
    k: int
    a_prev: float
    a_k: float
    lhs: float | None
    rhs: float
    skipped: bool
    satisfied: bool | None


class RecursionReport(BaseModel):
    tau: float
    tol_abs: float
    rows: list[RecursionRow]
    passed: bool
    min_slack: float | None

    def to_text(self) -> str:
        head = f"Recursion (1 - sqrt(1 - 4 tau a_(k-1)))/2 <= tau a_k/(1 + tau a_k): {_verdict(self.passed)}"
        return head + "\n" + format_table([r.model_dump() for r in self.rows])


def recursion_sides(a_prev: float, a_k: float, tau: float) -> tuple[float | None, float]:
    """``(lhs, rhs)``; ``lhs`` is None when the radicand ``1 - 4 tau a_prev`` is negative."""
    if 1 + tau * a_k <= 0:
        raise PosViolatedError(
            f"positivity (pos) violated: 1 + tau * a_k = {1 + tau * a_k:.3g} <= 0"
        )
    rhs = tau * a_k / (1 + tau * a_k)
    rad = 1 - 4 * tau * a_prev
    if rad < 0:
        return None, rhs
    return (1 - math.sqrt(rad)) / 2, rhs


def check_recursion(traj: JkoTrajectory, tol_abs: float = 1e-6,
                    a_values: Sequence[float] | None = None) -> RecursionReport:
    tau = traj.tau
    a = list(a_values if a_values is not None else min_hessian_values(traj))
    rows = []
    for k in range(1, len(a)):
        try:
            lhs, rhs = recursion_sides(a[k - 1], a[k], tau)
        except PosViolatedError as exc:
            exc.step = k
            raise
        skipped = lhs is None
        rows.append(RecursionRow(k=k, a_prev=a[k - 1], a_k=a[k], lhs=lhs, rhs=rhs,
                                 skipped=skipped,
                                 satisfied=None if skipped else bool(lhs <= rhs + tol_abs)))
    live = [r for r in rows if not r.skipped]
    return RecursionReport(
        tau=tau, tol_abs=tol_abs, rows=rows,
        passed=all(r.satisfied for r in live),
        min_slack=min((r.rhs - r.lhs for r in live), default=None),
    )


class LemmaRow(BaseModel):
    k: int
    left: float
    right: float
    inequality: bool
    threshold_predicate: bool
    agree: bool


class LemmaReport(BaseModel):
    C: float
    threshold: float
    rows: list[LemmaRow]
    agree: bool
    first_k_holding: int | None

    def to_text(self) -> str:
        head = (f"Scalar lemma, C={self.C:g}, threshold (1-C)^2/(2C-1) = {self.threshold:.6g}: "
                f"predicates {'agree' if self.agree else 'DISAGREE'}")
        return head + "\n" + format_table([r.model_dump() for r in self.rows])


def scalar_lemma(C: float, k_max: int = 50) -> LemmaReport:
    """Compare ``(1 - s)/(1 + s) >= -C/(k+1)``, ``s = sqrt(1 + 4C/k)``, with ``k >= (1-C)^2/(2C-1)``."""
    if C <= 0.5:
        raise ThresholdUndefinedError("threshold undefined: need C > 1/2 (division by 2C - 1)")
    if C > 1:
        raise ValueError("C must be at most 1")
    thr = (1 - C) ** 2 / (2 * C - 1)
    rows = []
    for k in range(1, k_max + 1):
        s = math.sqrt(1 + 4 * C / k)
        left = (1 - s) / (1 + s)
        right = -C / (k + 1)
        # exact equality at an integer threshold counts as holding
        ineq = left >= right - 1e-13 * abs(right)
        pred = k >= thr * (1 - 1e-13)
        rows.append(LemmaRow(k=k, left=left, right=right, inequality=ineq,
                             threshold_predicate=pred, agree=ineq == pred))
    first = next((r.k for r in rows if r.inequality), None)
    return LemmaReport(C=C, threshold=thr, rows=rows, agree=all(r.agree for r in rows),
                       first_k_holding=first)


# ---------------------------------------------------------------------------
# Harnack inequalities


def _pair_d2(grid: TorusGrid, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    X = grid.coords()
    return torus_distance_sq(X[xs][:, None, :], X[ys][None, :, :])


def _all_pairs_blocks(grid: TorusGrid, xs, ys, block: int = 2**22):
    rows = max(1, block // max(1, len(ys)))
    for s in range(0, len(xs), rows):
        sub = xs[s:s + rows]
        yield sub, _pair_d2(grid, sub, ys)


class StepHarnackReport(BaseModel):
    k: int
    tau: float
    C: float
    tol_rel: float
    n_pairs: int
    violations: int
    worst_ratio: float
    worst_x: int
    worst_y: int
    flagged: list[tuple[int, int, float]]
    passed: bool

    def to_text(self) -> str:
        return (f"Step bound k={self.k}: {_verdict(self.passed)}; pairs={self.n_pairs}, "
                f"violations={self.violations}, worst ratio {self.worst_ratio:.6g} "
                f"at (x={self.worst_x}, y={self.worst_y})")


def check_step_harnack(rho_prev: DensityField, rho_next: DensityField, k: int, tau: float,
                       C: float = 1.0, sample_pairs=None, tol_rel: float = 1e-3,
                       max_flagged: int = 100) -> StepHarnackReport:
    """``rho_prev(x) <= ((k+1)/(k+1-C))^n exp(d(x,y)^2 / (2 tau)) rho_next(y)``.

    ``sample_pairs`` is an array of node-index pairs ``(x, y)``; by default
    every pair of nodes is checked. The ratio is left side over right side.
    """
    rho_prev.same_grid(rho_next)
    if k < 1:
        raise ValueError("k must be >= 1")
    grid = rho_prev.grid
    n = grid.dim
    lp, ln = np.log(rho_prev.flat), np.log(rho_next.flat)
    log_factor = n * math.log((k + 1) / (k + 1 - C))
    worst = (-np.inf, 0, 0)
    count = viol = 0
    flagged = []
    limit = math.log1p(tol_rel)

    def consume(xi, yi, lr):
        # xi, yi, lr are flat and aligned
        nonlocal worst, count, viol
        count += lr.size
        j = int(np.argmax(lr))
        if lr[j] > worst[0]:
            worst = (float(lr[j]), int(xi[j]), int(yi[j]))
        bad = np.flatnonzero(lr > limit)
        viol += len(bad)
        for b in bad[: max(0, max_flagged - len(flagged))]:
            flagged.append((int(xi[b]), int(yi[b]), float(math.exp(lr[b]))))

    if sample_pairs is None:
        nodes = np.arange(grid.size)
        for xs, d2 in _all_pairs_blocks(grid, nodes, nodes):
            lr = lp[xs][:, None] - log_factor - d2 / (2 * tau) - ln[None, :]
            consume(np.repeat(xs, len(nodes)), np.tile(nodes, len(xs)), lr.ravel())
    else:
        pairs = np.asarray(sample_pairs, dtype=np.int64).reshape(-1, 2)
        X = grid.coords()
        d2 = np.atleast_1d(torus_distance_sq(X[pairs[:, 0]], X[pairs[:, 1]]))
        lr = lp[pairs[:, 0]] - log_factor - d2 / (2 * tau) - ln[pairs[:, 1]]
        consume(pairs[:, 0], pairs[:, 1], lr)
    return StepHarnackReport(
        k=k, tau=tau, C=C, tol_rel=tol_rel, n_pairs=count, violations=viol,
        worst_ratio=math.exp(worst[0]), worst_x=worst[1], worst_y=worst[2],
        flagged=flagged, passed=viol == 0,
    )


def sample_nodes(grid: TorusGrid, seed: int = 0, full_limit: int = 4096,
                 per_dim: int = 16) -> np.ndarray:
    """All nodes when there are at most ``full_limit``; else a stratified ``per_dim``-per-axis subgrid.

    The stratified subgrid uses a common stride ``M // per_dim`` and a
    per-axis offset drawn from ``seed``.
    """
    if grid.size <= full_limit:
        return np.arange(grid.size)
    M = grid.points_per_dim
    stride = max(1, M // per_dim)
    rng = np.random.default_rng(seed)
    axes = [(rng.integers(stride) + stride * np.arange(min(per_dim, M))) % M
            for _ in range(grid.dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.sort(np.ravel_multi_index(tuple(m.ravel() for m in mesh), grid.shape))


def admissible(t1: float, t2: float, tau: float, N: int) -> tuple[int, int] | None:
    """Map ``(t1, t2)`` to ``(k1, k2)``, or None when the tuple is not admissible.

    ``u(t1) = rho_(k1-1)`` with ``k1 = floor(t1/tau) + 1`` and
    ``u(t2) = rho_k2`` with ``k2 = floor(t2/tau)``. Admissible means
    ``t1 >= tau``, ``t2 - t1 - tau > 0`` and ``k2 <= N``.
    """
    if t1 < tau * (1 - 1e-12) or t2 - t1 - tau <= 1e-12 * tau:
        return None
    k1 = int(math.floor(t1 / tau + 1e-9)) + 1
    k2 = int(math.floor(t2 / tau + 1e-9))
    if k2 > N:
        return None
    return k1, k2


class HarnackWindow(BaseModel):
    t1: float
    t2: float
    k1: int
    k2: int
    n_pairs: int
    violations: int
    worst_ratio: float
    worst_x: int
    worst_y: int


class HarnackReport(BaseModel):
    tau: float
    tol_rel: float
    n_nodes: int
    rejected: int
    windows: list[HarnackWindow]
    worst_ratio: float
    passed: bool

    def to_text(self) -> str:
        head = (f"Harnack u(t1,x) <= ((t2+tau)/t1)^n exp(d^2/(2(t2-t1-tau))) u(t2,y): "
                f"{_verdict(self.passed)}; worst ratio {self.worst_ratio:.6g}, "
                f"{len(self.windows)} time windows, {self.n_nodes} nodes, {self.rejected} rejected")
        return head + "\n" + format_table([w.model_dump() for w in self.windows])


def check_harnack_pair(traj: JkoTrajectory, times=None, nodes=None, tol_rel: float = 1e-3,
                       seed: int = 0) -> HarnackReport:
    """Pointwise Harnack inequality on every (x, y) node pair for each sampled time pair.

    ``times`` is a list of ``(t1, t2)``; by default all grid-time pairs
    ``(j tau, k tau)`` are offered and the inadmissible ones rejected.
    ``nodes`` defaults to ``sample_nodes(grid, seed)``. Nothing assumes the
    densities are symmetric, so ``(x, y)`` and ``(y, x)`` are separate pairs.
    """
    tau = traj.tau
    N = traj.config.N
    grid = traj.config.grid
    n = grid.dim
    if times is None:
        times = [(j * tau, k * tau) for j in range(0, N + 1) for k in range(0, N + 1)]
    nodes = np.asarray(sample_nodes(grid, seed) if nodes is None else nodes, dtype=np.int64)
    logs = [np.log(r.flat[nodes]) for r in traj.densities]
    d2 = _pair_d2(grid, nodes, nodes)
    limit = math.log1p(tol_rel)
    windows, rejected = [], 0
    for t1, t2 in times:
        ks = admissible(t1, t2, tau, N)
        if ks is None:
            rejected += 1
            continue
        k1, k2 = ks
        gap = t2 - t1 - tau
        lr = (logs[k1 - 1][:, None] - n * math.log((t2 + tau) / t1) - d2 / (2 * gap)
              - logs[k2][None, :])
        j = np.unravel_index(int(np.argmax(lr)), lr.shape)
        windows.append(HarnackWindow(
            t1=t1, t2=t2, k1=k1, k2=k2, n_pairs=int(lr.size),
            violations=int(np.count_nonzero(lr > limit)),
            worst_ratio=float(math.exp(lr[j])), worst_x=int(nodes[j[0]]), worst_y=int(nodes[j[1]]),
        ))
    if not windows:
        raise NoAdmissiblePairsError("no admissible pairs: need t1 >= tau and t2 - t1 - tau > 0")
    worst = max(w.worst_ratio for w in windows)
    return HarnackReport(tau=tau, tol_rel=tol_rel, n_nodes=len(nodes), rejected=rejected,
                         windows=windows, worst_ratio=worst,
                         passed=all(w.violations == 0 for w in windows))


class ChainReport(BaseModel):
    k1: int
    k2: int
    C: float
    n_cases: int
    link_violations: int
    end_violations: int
    worst_link_ratio: float
    worst_end_ratio: float
    passed: bool

    def to_text(self) -> str:
        return (f"Chain k1={self.k1} k2={self.k2}: {_verdict(self.passed)}; cases={self.n_cases}, "
                f"worst link ratio {self.worst_link_ratio:.6g}, "
                f"chain/direct {self.worst_end_ratio:.12g}")


def check_chain(traj: JkoTrajectory, k1: int, k2: int, C: float = 1.0, nodes=None,
                tol_rel: float = 1e-3, seed: int = 0) -> ChainReport:
    """Chain the one-step bound along the minimizing geodesic from x to y.

    With ``L = k2 - k1 + 1`` steps and equally spaced points ``z_m`` on the
    geodesic, ``E_m = prod_(i<m) ((k1+i+1)/(k1+i+1-C))^n
    exp(m d^2 / (2 L^2 tau)) rho_(k1-1+m)(z_m)``. Checks
    ``E_0 = rho_(k1-1)(x) <= E_1 <= ... <= E_L`` (each link up to ``tol_rel``)
    and ``E_L <= ((k2+1)/(k1+1-C))^n exp(d^2/(2 L tau)) rho_k2(y)`` up to round-off.
    Default nodes: all of them up to 256, else the stratified subgrid.
    """
    if not 1 <= k1 <= k2 <= traj.config.N:
        raise ValueError("need 1 <= k1 <= k2 <= N")
    tau = traj.tau
    grid = traj.config.grid
    n = grid.dim
    if nodes is None:
        nodes = sample_nodes(grid, seed, full_limit=256)
    nodes = np.asarray(nodes, dtype=np.int64)
    X = grid.coords()[nodes]
    L = k2 - k1 + 1
    xs = np.repeat(X, len(nodes), axis=0)
    ys = np.tile(X, (len(nodes), 1))
    v = wrap_displacement(ys - xs)
    d2 = np.sum(v**2, axis=1)

    def rho_at(k, pts):
        return np.log(interpolate(traj.densities[k], pts % 1.0))

    logE = [rho_at(k1 - 1, xs)]
    log_prod = 0.0
    for m in range(1, L + 1):
        k = k1 + m - 1
        log_prod += n * math.log((k + 1) / (k + 1 - C))
        z = xs + (m / L) * v
        logE.append(log_prod + m * d2 / (2 * L**2 * tau) + rho_at(k, z))
    links = np.stack([logE[m] - logE[m + 1] for m in range(L)])
    direct = (n * math.log((k2 + 1) / (k1 + 1 - C)) + d2 / (2 * L * tau)
              + np.log(traj.densities[k2].flat[np.tile(nodes, len(nodes))]))
    end = logE[-1] - direct
    link_viol = int(np.count_nonzero(links > math.log1p(tol_rel)))
    end_viol = int(np.count_nonzero(end > 1e-12))
    return ChainReport(k1=k1, k2=k2, C=C, n_cases=len(d2), link_violations=link_viol,
                       end_violations=end_viol, worst_link_ratio=float(np.exp(links.max())),
                       worst_end_ratio=float(np.exp(end.max())),
                       passed=link_viol == 0 and end_viol == 0)
