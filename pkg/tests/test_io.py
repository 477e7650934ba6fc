import json
import math

import jsonschema
import numpy as np
import pytest

from jkolab.io import (
    load_trajectory,
    read_field,
    read_json,
    read_plan,
    save_trajectory,
    write_dat,
    write_field,
    write_json,
    write_plan,
)
from jkolab.schema import HAND_SCHEMAS, MODEL_SCHEMAS, generated_schema, load_schema
from jkolab.torus import DensityField, GridField, TorusGrid

from oracles import random_smooth_density


def test_field_roundtrip_is_exact(tmp_path):
    g = TorusGrid(2, 8)
    rho = DensityField(g, random_smooth_density(g, np.random.default_rng(0)))
    path = write_field(tmp_path / "rho.csv", rho, kind="density")
    assert path.read_text().splitlines()[0] == "node,value"
    back = read_field(path)
    assert isinstance(back, DensityField)
    assert np.array_equal(back.values, rho.values)
    head = read_json(tmp_path / "rho.json")
    assert head == {"dim": 2, "M": 8, "kind": "density"}
    jsonschema.validate(head, load_schema("field_header"))


def test_field_rejects_shuffled_nodes(tmp_path):
    g = TorusGrid(1, 8)
    path = write_field(tmp_path / "f.csv", GridField(g, np.arange(8.0)))
    lines = path.read_text().splitlines()
    lines[1], lines[2] = lines[2], lines[1]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError):
        read_field(path)


def test_plan_roundtrip(tmp_path):
    gamma = np.array([[0.25, 0.0], [0.0, 0.75]])
    path = write_plan(tmp_path / "plan.csv", gamma, cost_value=0.125)
    back, head = read_plan(path)
    assert np.array_equal(back, gamma)
    assert head["nnz"] == 2 and head["kind"] == "plan"
    jsonschema.validate(head, load_schema("plan_header"))


def test_json_is_sorted_and_nan_free(tmp_path):
    path = write_json(tmp_path / "x.json", {"b": math.nan, "a": np.float64(1.5), "c": np.arange(2)})
    text = path.read_text()
    assert text.index('"a"') < text.index('"b"')
    assert json.loads(text) == {"a": 1.5, "b": None, "c": [0, 1]}


def test_write_dat(tmp_path):
    path = write_dat(tmp_path / "p.dat", {"k": [0, 1], "v": [0.5, 0.25]})
    assert path.read_text() == "# k v\n0 0.5\n1 0.25\n"


def test_trajectory_roundtrip(tmp_path, uniform_traj):
    save_trajectory(tmp_path / "traj", uniform_traj, extra={"settings": {"C": 1.0}})
    manifest = read_json(tmp_path / "traj" / "manifest.json")
    jsonschema.validate(manifest, load_schema("manifest"))
    assert manifest["N"] == 8 and len(manifest["files"]) == 9
    traj, man = load_trajectory(tmp_path / "traj")
    assert man["settings"] == {"C": 1.0}
    for a, b in zip(traj.densities, uniform_traj.densities):
        assert np.array_equal(a.values, b.values)
    assert traj.tau == uniform_traj.tau


def test_trajectory_manifest_mismatch(tmp_path, uniform_traj):
    save_trajectory(tmp_path / "t", uniform_traj)
    man = read_json(tmp_path / "t" / "manifest.json")
    man["N"] = 3
    write_json(tmp_path / "t" / "manifest.json", man)
    with pytest.raises(ValueError):
        load_trajectory(tmp_path / "t")


@pytest.mark.parametrize("name", sorted(MODEL_SCHEMAS))
def test_shipped_schemas_match_models(name):
    assert load_schema(name) == generated_schema(name)


@pytest.mark.parametrize("name", sorted(MODEL_SCHEMAS) + list(HAND_SCHEMAS))
def test_shipped_schemas_are_valid(name):
    jsonschema.Draft202012Validator.check_schema(load_schema(name))
