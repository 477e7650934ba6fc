"""JSON schemas for every JSON file the tools write.

Report schemas are generated from the pydantic models and shipped under
``jkolab/schemas``; the manifest and CSV-header schemas are hand-written
there. ``schema_name_for`` maps an output path to its schema.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

from . import harnack as H
from . import experiment as E
from .config import ExperimentConfig
from .selftest import SelftestReport

__all__ = ["MODEL_SCHEMAS", "HAND_SCHEMAS", "load_schema", "schema_name_for", "generated_schema"]

MODEL_SCHEMAS = {
    "config": ExperimentConfig,
    "summary": E.RunSummary,
    "invariants_report": E.InvariantsReport,
    "residual_report": E.ResidualReport,
    "ctransform_report": E.CTransformReport,
    "convergence_report": E.ConvergenceReport,
    "chain_report": E.ChainSummary,
    "diff_harnack_report": H.DiffHarnackReport,
    "recursion_report": H.RecursionReport,
    "harnack_report": H.HarnackReport,
    "selftest_report": SelftestReport,
}

HAND_SCHEMAS = ("manifest", "field_header", "plan_header", "selftest_worst")

_REPORTS = {
    "invariants": "invariants_report",
    "diff_harnack": "diff_harnack_report",
    "recursion": "recursion_report",
    "harnack": "harnack_report",
    "harnack_chain": "chain_report",
    "ma_residual": "residual_report",
    "optimality": "residual_report",
    "ctransform": "ctransform_report",
    "convergence": "convergence_report",
    "ot_selftest": "selftest_report",
}


def generated_schema(name: str) -> dict:
    return MODEL_SCHEMAS[name].model_json_schema(mode="serialization")


def load_schema(name: str) -> dict:
    text = resources.files("jkolab.schemas").joinpath(f"{name}.schema.json").read_text()
    return json.loads(text)


def schema_name_for(path) -> str:
    """Schema for a JSON file written by ``run``, ``convergence``, ``harnack`` or ``ot-selftest``."""
    p = Path(path)
    stem = p.stem
    if p.parent.name == "reports":
        return _REPORTS[stem]
    if stem in ("config", "summary"):
        return stem
    if stem == "manifest":
        return "manifest"
    if stem == "convergence":
        return "convergence_report"
    if stem == "ot_selftest_worst":
        return "selftest_worst"
    if p.with_suffix(".csv").exists():
        head = json.loads(p.read_text())
        return "plan_header" if head.get("kind") == "plan" else "field_header"
    raise KeyError(f"no schema for {path}")
