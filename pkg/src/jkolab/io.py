"""Serialization: grid-field CSVs, sparse plan triplets, trajectory directories, reports.

All writers are deterministic: floats use ``%.17g`` (or ``repr`` inside
JSON), keys are sorted, and nothing time-dependent is written.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .torus import DensityField, GridField, TorusGrid

__all__ = [
    "write_json",
    "read_json",
    "write_field",
    "read_field",
    "write_plan",
    "read_plan",
    "save_trajectory",
    "load_trajectory",
    "write_dat",
]


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if hasattr(obj, "model_dump"):
        return _plain(obj.model_dump())
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


def _header_path(path: Path) -> Path:
    return path.with_suffix(".json")


def write_field(path, field: GridField, kind: str = "field") -> Path:
    """``node,value`` CSV in row-major node order plus a ``{dim, M, kind}`` JSON header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["node,value"]
    lines += [f"{i},{v:.17g}" for i, v in enumerate(field.flat)]
    path.write_text("\n".join(lines) + "\n")
    write_json(_header_path(path), {"dim": field.grid.dim, "M": field.grid.points_per_dim,
                                    "kind": kind})
    return path


def read_field(path, density: bool | None = None) -> GridField:
    path = Path(path)
    head = read_json(_header_path(path))
    grid = TorusGrid(int(head["dim"]), int(head["M"]))
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[0] != grid.size or not np.array_equal(data[:, 0], np.arange(grid.size)):
        raise ValueError(f"{path}: expected nodes 0..{grid.size - 1} in order")
    if density is None:
        density = head.get("kind") == "density"
    cls = DensityField if density else GridField
    return cls(grid, data[:, 1])


def write_plan(path, gamma: np.ndarray, cost_value: float, threshold: float = 0.0) -> Path:
    """Sparse ``i,j,mass`` triplets of entries above ``threshold`` plus a JSON header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    gamma = np.asarray(gamma)
    ii, jj = np.nonzero(gamma > threshold)
    lines = ["i,j,mass"] + [f"{i},{j},{gamma[i, j]:.17g}" for i, j in zip(ii, jj)]
    path.write_text("\n".join(lines) + "\n")
    write_json(_header_path(path), {"kind": "plan", "rows": gamma.shape[0],
                                    "cols": gamma.shape[1], "nnz": len(ii),
                                    "cost_value": float(cost_value), "threshold": threshold})
    return path


def read_plan(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    head = read_json(_header_path(path))
    gamma = np.zeros((head["rows"], head["cols"]))
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size:
        gamma[data[:, 0].astype(int), data[:, 1].astype(int)] = data[:, 2]
    return gamma, head


def save_trajectory(directory, traj, extra: dict | None = None) -> Path:
    """Write ``rho_XXXX.csv`` (+ headers) and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfg = traj.config
    files = []
    for k, rho in enumerate(traj.densities):
        name = f"rho_{k:04d}.csv"
        write_field(directory / name, rho, kind="density")
        files.append(name)
    diags = traj.diagnostics

    def col(attr):
        return [getattr(d, attr) for d in diags]

    manifest = {
        "K": cfg.K,
        "N": cfg.N,
        "M": cfg.grid.points_per_dim,
        "n": cfg.grid.dim,
        "tau": cfg.tau,
        "files": files,
        "entropies": traj.entropies(),
        "objectives": col("objective"),
        "debiased_objectives": col("debiased_objective"),
        "eps": col("eps"),
        "iterations": col("iterations"),
        "residual_maxima": {
            "monge_ampere": col("ma_residual"),
            "monge_ampere_mirrored": col("ma_residual_mirrored"),
            "optimality": col("optimality_residual"),
            "fixed_point": col("fixed_point_residual"),
        },
    }
    if extra:
        manifest.update(extra)
    write_json(directory / "manifest.json", manifest)
    return directory


def load_trajectory(directory):
    """Rebuild a trajectory (densities only) from ``save_trajectory`` output.

    Returns ``(trajectory, manifest)``.
    """
    from .jko import JkoConfig, JkoTrajectory

    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    densities = [read_field(directory / f, density=True) for f in manifest["files"]]
    grid = TorusGrid(int(manifest["n"]), int(manifest["M"]))
    if len(densities) != int(manifest["N"]) + 1:
        raise ValueError("manifest lists the wrong number of density files")
    if any(d.grid != grid for d in densities):
        raise ValueError("density grid differs from manifest")
    cfg = JkoConfig(float(manifest["K"]), int(manifest["N"]), grid)
    return JkoTrajectory(cfg, densities, []), manifest


def write_dat(path, columns: dict) -> Path:
    """Whitespace-separated columns with a ``#`` header line (gnuplot-ready)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(columns)
    cols = [np.asarray(columns[n], dtype=float).ravel() for n in names]
    lines = ["# " + " ".join(names)]
    for row in zip(*cols):
        lines.append(" ".join(f"{v:.17g}" for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path
