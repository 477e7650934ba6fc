"""Oracle battery for the transport solvers.

Two kinds of instances:

* ``discrete``: small uniform atomic measures. The exact simplex route of
  ``w2_exact_small`` must equal brute force over all permutations, in
  rational arithmetic.
* ``grid``: densities on a small torus grid. The entropic solver at the
  battery's terminal ``eps`` must match the exact linear program.
"""

from __future__ import annotations

import itertools
import json
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np
from pydantic import BaseModel
from scipy.optimize import linprog

from .torus import DensityField, TorusGrid, torus_distance_sq
from .transport import (
    DiscreteMeasure,
    _exact_sq_dist,
    eps_schedule,
    sinkhorn,
    w2_exact_small,
)

__all__ = [
    "BatteryError",
    "SelftestRow",
    "SelftestReport",
    "load_battery",
    "brute_force_permutation",
    "exact_lp_value",
    "run_battery",
]


class BatteryError(ValueError):
    pass


class SelftestRow(BaseModel):
    name: str
    kind: str
    reference: float
    value: float
    error: float
    tolerance: float
    passed: bool


class SelftestReport(BaseModel):
    sinkhorn_eps: float
    rows: list[SelftestRow]
    passed: bool
    worst: str | None

    def to_text(self) -> str:
        from .harnack import format_table

        bad = sum(not r.passed for r in self.rows)
        head = (f"OT self-test ({len(self.rows)} instances, sinkhorn eps {self.sinkhorn_eps:g}): "
                f"{'PASS' if self.passed else 'FAIL'}, {bad} mismatches")
        return head + "\n" + format_table([r.model_dump() for r in self.rows])


def load_battery(path=None) -> dict:
    """Read a battery JSON; ``None`` loads the bundled one."""
    if path is None:
        text = resources.files("jkolab.data").joinpath("ot_battery.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        battery = json.loads(text)
    except json.JSONDecodeError as exc:
        raise BatteryError(f"battery is not valid JSON: {exc}") from exc
    if not isinstance(battery, dict):
        raise BatteryError("battery must be a JSON object")
    unknown = set(battery) - {"sinkhorn_eps", "sinkhorn_tol", "discrete", "grid"}
    if unknown:
        raise BatteryError(f"unknown battery keys: {sorted(unknown)}")
    if not battery.get("discrete") and not battery.get("grid"):
        raise BatteryError("battery holds no instances")
    return battery


def brute_force_permutation(mu: DiscreteMeasure, nu: DiscreteMeasure) -> Fraction:
    """Exact minimum over all bijections; uniform equal-count measures only."""
    k = len(mu.masses)
    if len(nu.masses) != k:
        raise ValueError("need equal atom counts")
    cost = [[_exact_sq_dist(x, y) for y in nu.points] for x in mu.points]
    best = min(sum(cost[i][p[i]] for i in range(k)) for p in itertools.permutations(range(k)))
    return best * Fraction(float(mu.masses[0]))


def exact_lp_value(mu: DensityField, nu: DensityField) -> float:
    """``min sum gamma_ij d_ij**2`` over couplings, solved as a dense LP."""
    grid = mu.grid
    X = grid.coords()
    C = torus_distance_sq(X[:, None, :], X[None, :, :])
    a = mu.flat * grid.cell_volume
    b = nu.flat * grid.cell_volume
    b = b * (a.sum() / b.sum())
    P = grid.size
    A_rows = np.kron(np.eye(P), np.ones((1, P)))
    A_cols = np.kron(np.ones((1, P)), np.eye(P))
    res = linprog(C.ravel(), A_eq=np.vstack([A_rows, A_cols[:-1]]),
                  b_eq=np.concatenate([a, b[:-1]]), bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"LP oracle failed: {res.message}")
    return float(res.fun)


def _measure(desc: dict) -> DiscreteMeasure:
    pts = np.asarray(desc["points"], dtype=float)
    if "masses" in desc:
        return DiscreteMeasure(pts, np.asarray(desc["masses"], dtype=float))
    return DiscreteMeasure.uniform(pts)


def run_battery(battery: dict, eps: float | None = None) -> SelftestReport:
    """Run every instance; ``eps`` overrides the battery's terminal sinkhorn eps."""
    eps = float(eps if eps is not None else battery.get("sinkhorn_eps", 1e-5))
    tol = float(battery.get("sinkhorn_tol", 1e-3))
    rows = []
    for inst in battery.get("discrete", []):
        mu, nu = _measure(inst["mu"]), _measure(inst["nu"])
        ref = brute_force_permutation(mu, nu)
        _, plan = w2_exact_small(mu, nu, method="simplex")
        err = abs(plan.exact_value - ref)
        rows.append(SelftestRow(name=inst["name"], kind="discrete", reference=float(ref),
                                value=float(plan.exact_value), error=float(err),
                                tolerance=0.0, passed=err == 0))
    for inst in battery.get("grid", []):
        grid = TorusGrid(int(inst["dim"]), int(inst["M"]))
        mu = DensityField.normalized(grid, inst["mu"])
        nu = DensityField.normalized(grid, inst["nu"])
        ref = exact_lp_value(mu, nu)
        sched = [e for e in eps_schedule(stop=eps) if e > eps] + [eps]
        val = sinkhorn(mu, nu, sched, tol=1e-9, max_iters=50000).value
        err = abs(val - ref)
        rows.append(SelftestRow(name=inst["name"], kind="grid", reference=ref, value=val,
                                error=err, tolerance=tol, passed=err <= tol))
    worst = max(rows, key=lambda r: (not r.passed, r.error / max(r.tolerance, 1e-300)))
    ok = all(r.passed for r in rows)
    return SelftestReport(sinkhorn_eps=eps, rows=rows, passed=ok,
                          worst=None if ok else worst.name)


def instance_by_name(battery: dict, name: str) -> dict | None:
    for key in ("discrete", "grid"):
        for inst in battery.get(key, []):
            if inst["name"] == name:
                return {"kind": key, **inst}
    return None
