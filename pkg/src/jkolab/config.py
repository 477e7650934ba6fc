"""Experiment configuration: one JSON document, unknown keys rejected."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .jko import InnerSettings, JkoConfig, initial_density
from .torus import DensityField, TorusGrid

__all__ = ["CHECKS", "ExperimentConfig", "load_config"]

CheckName = Literal[
    "diff-harnack", "harnack", "recursion", "ma-residual", "optimality",
    "ctransform", "convergence", "ot-selftest",
]
CHECKS: tuple[str, ...] = CheckName.__args__


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class InnerConfig(_Strict):
    eps_terminal: float | None = Field(None, gt=0)
    eps_grid_factor: float = Field(1.0, gt=0)
    eps_start_factor: float = Field(4.0, ge=1)
    tol: float = Field(1e-11, gt=0)
    max_iters: int = Field(20000, ge=1)
    anderson: int = Field(6, ge=0)
    oracle: bool = False
    debias: bool = True
    bias_correction: bool = True


class InitialConfig(_Strict):
    family: Literal["cosine", "two_mode", "uniform"] = "cosine"
    amplitude: float = 0.5
    second: float = 0.0


class Tolerances(_Strict):
    diff_harnack_rel: float = Field(1e-3, ge=0)
    recursion_abs: float = Field(1e-6, ge=0)
    harnack_rel: float = Field(1e-3, ge=0)
    ma_residual: float = Field(1e-2, gt=0)
    optimality: float = Field(2e-2, gt=0)
    ctransform: float = Field(1e-12, ge=0)
    psd_margin: float = Field(5e-3, ge=0)
    fest: float = Field(5e-2, gt=0)
    mass: float = Field(1e-9, gt=0)


class ConvergenceConfig(_Strict):
    N_list: list[int] = Field(default_factory=lambda: [4, 8, 16, 32], min_length=1)
    record_timing: bool = False

    @field_validator("N_list")
    @classmethod
    def _increasing(cls, v):
        if any(n < 1 for n in v) or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("N_list must be positive and strictly increasing")
        return v


class ExperimentConfig(_Strict):
    K: float = Field(0.05, gt=0)
    N: int = Field(32, ge=1)
    dim: Literal[1, 2] = 1
    M: int = Field(128, ge=8)
    inner: InnerConfig = Field(default_factory=InnerConfig)
    initial: InitialConfig = Field(default_factory=InitialConfig)
    checks: list[CheckName] = Field(
        default_factory=lambda: ["diff-harnack", "recursion", "harnack", "ma-residual",
                                 "optimality", "ctransform"]
    )
    C: float = Field(1.0, ge=0.5, le=1.0)
    chain_offsets: list[int] = Field(default_factory=lambda: [1, 2, 4])
    tolerances: Tolerances = Field(default_factory=Tolerances)
    convergence: ConvergenceConfig = Field(default_factory=ConvergenceConfig)
    output_dir: str = "jko_out"
    seed: int = 0

    @model_validator(mode="after")
    def _unique_checks(self):
        if len(set(self.checks)) != len(self.checks):
            raise ValueError("checks must not repeat")
        return self

    def grid(self) -> TorusGrid:
        return TorusGrid(self.dim, self.M)

    def jko_config(self, N: int | None = None) -> JkoConfig:
        inner = InnerSettings(**self.inner.model_dump())
        return JkoConfig(self.K, N or self.N, self.grid(), inner)

    def initial_density(self) -> DensityField:
        return initial_density(self.grid(), self.initial.family, self.initial.amplitude,
                               self.initial.second)


def load_config(path) -> ExperimentConfig:
    """Parse a config file; raises ``ValueError`` (or pydantic's subclass) on bad input."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON ({exc})") from exc
    return ExperimentConfig.model_validate(data)
