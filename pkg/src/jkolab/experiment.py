"""Run a configured experiment: trajectory, requested checks, artifacts on disk."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from pydantic import BaseModel

from . import harnack as H
from .config import ExperimentConfig
from .io import save_trajectory, write_dat, write_field, write_json
from .jko import JkoTrajectory, run_trajectory
from .reference import convergence_study, heat_solve
from .selftest import load_battery, run_battery
from .transport import (
    c_transform,
    fest_residual,
    potential_psd_margin,
    verify_ctransform_identities,
)

__all__ = [
    "InvariantRow",
    "InvariantsReport",
    "ResidualRow",
    "ResidualReport",
    "CTransformRow",
    "CTransformReport",
    "ConvergenceReport",
    "ChainSummary",
    "RunSummary",
    "check_invariants",
    "residual_report",
    "ctransform_report",
    "convergence_report",
    "chain_summary",
    "run_experiment",
    "recheck_directory",
]


class InvariantRow(BaseModel):
    k: int
    mass_error: float
    min_density: float
    entropy: float
    entropy_drop: float
    descent_slack: float | None


class InvariantsReport(BaseModel):
    mass_tol: float
    rows: list[InvariantRow]
    passed: bool

    def to_text(self) -> str:
        head = f"Mass, positivity and descent: {'PASS' if self.passed else 'FAIL'}"
        return head + "\n" + H.format_table([r.model_dump() for r in self.rows])


def check_invariants(traj: JkoTrajectory, mass_tol: float = 1e-9,
                     descent_tol: float = 1e-12) -> InvariantsReport:
    """Unit mass, positivity, and descent of each step against the previous density.

    Descent uses the debiased transport term when the step recorded one:
    ``S_eps(rho_(k-1), rho_k) + tau H(rho_k) <= tau H(rho_(k-1))``.
    """
    tau = traj.tau
    ents = traj.entropies()
    rows = []
    ok = True
    for k, rho in enumerate(traj.densities):
        mass_err = abs(rho.integral() - 1.0)
        drop = ents[k - 1] - ents[k] if k else 0.0
        slack = None
        if k and k <= len(traj.diagnostics):
            d = traj.diagnostics[k - 1]
            if d.debiased_objective is not None:
                slack = tau * ents[k - 1] - d.debiased_objective
        row_ok = (mass_err <= mass_tol and rho.values.min() > 0
                  and drop >= -descent_tol and (slack is None or slack >= -descent_tol))
        ok &= bool(row_ok)
        rows.append(InvariantRow(k=k, mass_error=mass_err, min_density=float(rho.values.min()),
                                 entropy=ents[k], entropy_drop=drop, descent_slack=slack))
    return InvariantsReport(mass_tol=mass_tol, rows=rows, passed=ok)


class ResidualRow(BaseModel):
    k: int
    value: float
    mirrored: float | None = None


class ResidualReport(BaseModel):
    name: str
    tolerance: float
    rows: list[ResidualRow]
    max_value: float
    max_mirrored: float | None
    passed: bool

    def to_text(self) -> str:
        head = (f"{self.name} residual: {'PASS' if self.passed else 'FAIL'}; max {self.max_value:.6g} "
                f"(tolerance {self.tolerance:g})")
        if self.max_mirrored is not None:
            head += f"; opposite map orientation max {self.max_mirrored:.6g} (reported only)"
        return head + "\n" + H.format_table([r.model_dump() for r in self.rows])


def residual_report(traj: JkoTrajectory, which: str, tolerance: float) -> ResidualReport:
    """Per-step Monge-Ampere (``which='ma'``) or optimality (``'optimality'``) maxima."""
    from .jko import monge_ampere_residual, optimality_residual

    rows = []
    for k, d in enumerate(traj.diagnostics, start=1):
        prev, nxt = traj.densities[k - 1], traj.densities[k]
        if which == "ma":
            val = d.ma_residual
            if val is None:
                val = monge_ampere_residual(prev, nxt, traj.tau)[1]
            mir = d.ma_residual_mirrored
            if mir is None:
                mir = monge_ampere_residual(nxt, prev, traj.tau)[1]
            rows.append(ResidualRow(k=k, value=val, mirrored=mir))
        else:
            val = d.optimality_residual
            if val is None:
                val = optimality_residual(prev, nxt, traj.tau)[1]
            rows.append(ResidualRow(k=k, value=val))
    mx = max(r.value for r in rows)
    mirrored = [r.mirrored for r in rows if r.mirrored is not None]
    name = "Monge-Ampere" if which == "ma" else "Optimality"
    return ResidualReport(name=name, tolerance=tolerance, rows=rows, max_value=mx,
                          max_mirrored=max(mirrored) if mirrored else None,
                          passed=mx <= tolerance)


class CTransformRow(BaseModel):
    k: int
    ineq_violation: float
    equal_gap: float
    psd_margin: float
    psd_scale: float
    fest_max: float
    passed: bool


class CTransformReport(BaseModel):
    tol: float
    psd_tol: float
    fest_tol: float
    rows: list[CTransformRow]
    passed: bool

    def to_text(self) -> str:
        head = f"c-transform identities, I - tau hess f >= 0, Hessian transfer: {'PASS' if self.passed else 'FAIL'}"
        return head + "\n" + H.format_table([r.model_dump() for r in self.rows])


def ctransform_report(traj: JkoTrajectory, tol: float = 1e-12, psd_tol: float = 5e-3,
                      fest_tol: float = 5e-2) -> CTransformReport:
    tau = traj.tau
    rows = []
    for k in range(1, len(traj.densities)):
        L = traj.densities[k].log()
        ct = c_transform(L, tau)
        chk = verify_ctransform_identities(ct, L)
        margin, scale = potential_psd_margin(ct)
        fest = float(fest_residual(ct, L, tau).values.max())
        ok = chk.passed(tol) and margin >= -psd_tol * scale and fest <= fest_tol
        rows.append(CTransformRow(k=k, ineq_violation=chk.ineq_violation, equal_gap=chk.equal_gap,
                                  psd_margin=margin, psd_scale=scale, fest_max=fest, passed=ok))
    return CTransformReport(tol=tol, psd_tol=psd_tol, fest_tol=fest_tol, rows=rows,
                            passed=all(r.passed for r in rows))


class ConvergenceReport(BaseModel):
    K: float
    rows: list[dict]
    monotone: bool
    passed: bool

    def to_text(self) -> str:
        head = f"L1 convergence to the heat flow at t=K: {'PASS' if self.passed else 'FAIL'}"
        return head + "\n" + H.format_table(self.rows)


def convergence_report(cfg: ExperimentConfig) -> ConvergenceReport:
    rows = convergence_study(cfg.initial_density(), cfg.K, cfg.convergence.N_list, cfg.grid(),
                             inner=cfg.jko_config().inner,
                             record_timing=cfg.convergence.record_timing)
    gaps = [r.l1_gap for r in rows]
    monotone = all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))
    return ConvergenceReport(K=cfg.K, rows=[r.__dict__ for r in rows], monotone=monotone,
                             passed=monotone or max(gaps) <= 1e-9)


class ChainSummary(BaseModel):
    offsets: list[int]
    reports: list[H.ChainReport]
    passed: bool

    def to_text(self) -> str:
        head = f"Geodesic chaining of the one-step bound: {'PASS' if self.passed else 'FAIL'}"
        rows = [r.model_dump() for r in self.reports]
        return head + "\n" + H.format_table(rows)


def chain_summary(traj: JkoTrajectory, offsets, C: float = 1.0, tol_rel: float = 1e-3,
                  seed: int = 0) -> ChainSummary:
    """Chain check for every ``k1`` with ``k2 = k1 + offset <= N``."""
    N = traj.config.N
    reps = [H.check_chain(traj, k1, k1 + dk, C=C, tol_rel=tol_rel, seed=seed)
            for dk in offsets for k1 in range(1, N - dk + 1)]
    return ChainSummary(offsets=list(offsets), reports=reps, passed=all(r.passed for r in reps))


class RunSummary(BaseModel):
    passed: bool
    checks: dict[str, bool]
    K: float
    N: int
    M: int
    n: int


def _emit(out: Path, name: str, report) -> bool:
    write_json(out / "reports" / f"{name}.json", report)
    (out / "reports" / f"{name}.txt").write_text(report.to_text() + "\n")
    return bool(report.passed)


def _harnack_checks(traj, settings: dict, checks, out: Path, results: dict,
                    a_values=None) -> None:
    tol = settings["tolerances"]
    C = settings["C"]
    if a_values is None:
        a_values = H.min_hessian_values(traj)
    if "diff-harnack" in checks:
        rep = H.check_diff_harnack(traj, C=C, tol_rel=tol["diff_harnack_rel"], a_values=a_values)
        results["diff-harnack"] = _emit(out, "diff_harnack", rep)
    if "recursion" in checks:
        rep = H.check_recursion(traj, tol_abs=tol["recursion_abs"], a_values=a_values)
        results["recursion"] = _emit(out, "recursion", rep)
    if "harnack" in checks:
        rep = H.check_harnack_pair(traj, tol_rel=tol["harnack_rel"], seed=settings["seed"])
        results["harnack"] = _emit(out, "harnack", rep)
        offsets = [d for d in settings["chain_offsets"] if d < traj.config.N]
        if offsets:
            chain = chain_summary(traj, offsets, C=C, tol_rel=tol["harnack_rel"],
                                  seed=settings["seed"])
            results["harnack-chain"] = _emit(out, "harnack_chain", chain)


def _settings(cfg: ExperimentConfig) -> dict:
    return {"C": cfg.C, "seed": cfg.seed, "chain_offsets": cfg.chain_offsets,
            "tolerances": cfg.tolerances.model_dump(), "checks": list(cfg.checks)}


def run_experiment(cfg: ExperimentConfig, out_dir=None, progress=None) -> RunSummary:
    """Run the trajectory and every requested check; write all artifacts under ``out_dir``.

    Runtime failures propagate as ``JkoLabError``; check verdicts are in the summary.
    """
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg.model_dump())
    checks = set(cfg.checks)
    tol = cfg.tolerances
    jcfg = cfg.jko_config()
    rho0 = cfg.initial_density()
    need_res = bool(checks & {"ma-residual", "optimality"})
    traj = run_trajectory(rho0, jcfg, residuals=need_res, progress=progress)
    save_trajectory(out / "trajectory", traj, extra={"settings": _settings(cfg)})

    results: dict[str, bool] = {}
    results["invariants"] = _emit(out, "invariants", check_invariants(traj, tol.mass))
    a_values = H.min_hessian_values(traj)
    _harnack_checks(traj, _settings(cfg), checks, out, results, a_values)
    if "ma-residual" in checks:
        results["ma-residual"] = _emit(out, "ma_residual", residual_report(traj, "ma", tol.ma_residual))
    if "optimality" in checks:
        results["optimality"] = _emit(out, "optimality",
                                      residual_report(traj, "optimality", tol.optimality))
    if "ctransform" in checks:
        rep = ctransform_report(traj, tol.ctransform, tol.psd_margin, tol.fest)
        results["ctransform"] = _emit(out, "ctransform", rep)
    if "convergence" in checks:
        conv = convergence_report(cfg)
        results["convergence"] = _emit(out, "convergence", conv)
        _write_convergence_csv(out / "convergence.csv", conv.rows)
        write_dat(out / "plots" / "convergence.dat",
                  {k: [r[k] for r in conv.rows] for k in ("N", "l1_gap", "linf_gap")})
    if "ot-selftest" in checks:
        results["ot-selftest"] = _emit(out, "ot_selftest", run_battery(load_battery()))

    _write_plots(out / "plots", traj, a_values, cfg.C)
    summary = RunSummary(passed=all(results.values()), checks=results, K=cfg.K, N=cfg.N,
                         M=cfg.M, n=cfg.dim)
    write_json(out / "summary.json", summary)
    return summary


def _write_convergence_csv(path: Path, rows: list[dict]) -> None:
    lines = ["N,l1_gap,linf_gap,runtime_ms"]
    lines += [f"{r['N']},{r['l1_gap']:.17g},{r['linf_gap']:.17g},{r['runtime_ms']:.17g}"
              for r in rows]
    path.write_text("\n".join(lines) + "\n")


def _write_plots(plots: Path, traj: JkoTrajectory, a_values, C: float) -> None:
    tau = traj.tau
    ks = np.arange(len(traj.densities))
    write_dat(plots / "entropy.dat", {"k": ks, "t": ks * tau, "entropy": traj.entropies()})
    write_dat(plots / "min_hessian.dat",
              {"k": ks[1:], "t": ks[1:] * tau, "a_k": a_values[1:],
               "bound": -C / (tau * (ks[1:] + 1))})
    if traj.diagnostics and traj.diagnostics[0].ma_residual is not None:
        d = traj.diagnostics
        write_dat(plots / "residuals.dat",
                  {"k": ks[1:], "monge_ampere": [x.ma_residual for x in d],
                   "monge_ampere_mirrored": [x.ma_residual_mirrored for x in d],
                   "optimality": [x.optimality_residual for x in d]})
    grid = traj.config.grid
    heat = heat_solve(traj.densities[0], traj.config.K)
    if grid.dim == 1:
        write_dat(plots / "final_density.dat",
                  {"x": grid.axis(), "jko": traj.densities[-1].flat, "heat": heat.flat})
    else:
        X = grid.coords()
        write_dat(plots / "final_density.dat",
                  {"x": X[:, 0], "y": X[:, 1], "jko": traj.densities[-1].flat, "heat": heat.flat})
    write_field(plots.parent / "heat_at_K.csv", heat, kind="density")


def recheck_directory(directory, out=None) -> RunSummary:
    """Re-run the inequality checks on a stored trajectory (``run`` output or its ``trajectory/``)."""
    from .io import load_trajectory

    directory = Path(directory)
    if not (directory / "manifest.json").exists() and (directory / "trajectory" / "manifest.json").exists():
        directory = directory / "trajectory"
    traj, manifest = load_trajectory(directory)
    settings = manifest.get("settings") or _settings(ExperimentConfig())
    out = Path(out or directory / "recheck")
    results: dict[str, bool] = {}
    _harnack_checks(traj, settings, {"diff-harnack", "recursion", "harnack"}, out, results)
    grid = traj.config.grid
    summary = RunSummary(passed=all(results.values()), checks=results, K=traj.config.K,
                         N=traj.config.N, M=grid.points_per_dim, n=grid.dim)
    write_json(out / "summary.json", summary)
    return summary

