import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jkolab.torus import (
    DensityField,
    GridField,
    SymMatField,
    TorusGrid,
    TrigInterpolant,
    gradient,
    hessian,
    interpolate,
    min_eig_stats,
    torus_distance_sq,
)

from oracles import torus_sq

unit = st.floats(0.0, 1.0, exclude_max=True, allow_nan=False)


def test_grid_geometry():
    for M in (8, 64, 1000):
        g = TorusGrid(1, M)
        assert abs(g.points_per_dim * g.spacing - 1.0) <= 1e-15
        assert g.cell_volume == g.spacing
    g = TorusGrid(2, 8)
    X = g.coords()
    assert X.shape == (64, 2)
    assert np.allclose(X[9], [1 / 8, 1 / 8])
    assert g.node_index((1, 1)) == 9


def test_grid_rejects_bad_input():
    with pytest.raises(ValueError):
        TorusGrid(3, 16)
    with pytest.raises(ValueError):
        GridField(TorusGrid(1, 8), np.ones(7))
    with pytest.raises(ValueError):
        gradient(GridField(TorusGrid(1, 4), np.ones(4)))


def test_density_invariants():
    g = TorusGrid(1, 16)
    with pytest.raises(ValueError):
        DensityField(g, np.full(16, 2.0))
    with pytest.raises(ValueError):
        DensityField(g, np.r_[0.0, np.full(15, 16 / 15)])
    rho = DensityField.normalized(g, np.arange(1, 17))
    assert abs(rho.integral() - 1) < 1e-12


def test_distance_examples():
    assert torus_distance_sq(0.2, 0.9) == pytest.approx(0.09, abs=1e-15)
    assert torus_distance_sq(0.37, 0.37) == 0.0
    assert torus_distance_sq([0, 0], [0.5, 0.5]) == pytest.approx(0.5, abs=1e-15)


@given(st.lists(unit, min_size=2, max_size=2), st.lists(unit, min_size=2, max_size=2),
       st.lists(unit, min_size=2, max_size=2))
@settings(max_examples=200, deadline=None)
def test_distance_is_a_metric(x, y, z):
    dxy = torus_distance_sq(x, y)
    assert dxy == pytest.approx(torus_sq(np.array(x), np.array(y)), abs=1e-14)
    assert dxy == torus_distance_sq(y, x)
    if x == y:
        assert dxy == 0
    if dxy == 0:
        assert np.abs(np.subtract(x, y)).max() < 1e-150
    d = lambda a, b: math.sqrt(torus_distance_sq(a, b))
    assert d(x, z) <= d(x, y) + d(y, z) + 1e-12


@given(st.integers(8, 40), st.integers(1, 2), st.floats(-5, 5))
@settings(max_examples=30, deadline=None)
def test_operators_annihilate_constants(M, dim, c):
    g = TorusGrid(dim, M if dim == 1 else min(M, 16))
    f = GridField(g, np.full(g.size, c))
    assert np.all(gradient(f) == 0)
    assert np.all(hessian(f).upper == 0)


def _grad_error(M):
    g = TorusGrid(1, M)
    f = g.sample(lambda x: np.sin(2 * np.pi * x))
    x = g.axis()
    return np.abs(gradient(f)[0] - 2 * np.pi * np.cos(2 * np.pi * x)).max()


def _hess_error(M):
    g = TorusGrid(1, M)
    f = g.sample(lambda x: np.cos(2 * np.pi * x))
    x = g.axis()
    return np.abs(hessian(f).component(0, 0) + 4 * np.pi**2 * np.cos(2 * np.pi * x)).max()


def test_gradient_accuracy_and_order():
    assert _grad_error(128) <= 3e-3
    assert 4 * 0.8 <= _grad_error(64) / _grad_error(128) <= 4 * 1.2
    assert 4 * 0.8 <= _grad_error(128) / _grad_error(256) <= 4 * 1.2


def test_hessian_accuracy_and_order():
    h = 1 / 128
    # leading error term of the second difference is u''''h^2/12
    assert _hess_error(128) <= (2 * np.pi) ** 4 * h**2 / 12 * 1.01
    assert 4 * 0.8 <= _hess_error(64) / _hess_error(128) <= 4 * 1.2


def test_hessian_mixed_derivative_2d():
    def err(M):
        g = TorusGrid(2, M)
        f = g.sample(lambda x, y: np.cos(2 * np.pi * x) * np.cos(2 * np.pi * y))
        x, y = g.mesh()
        exact = 4 * np.pi**2 * np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y)
        return np.abs(hessian(f).component(0, 1) - exact).max()

    assert err(64) <= 4 * np.pi**2 * 2 * (2 * np.pi / 64) ** 2 / 6 * 1.05
    assert 4 * 0.8 <= err(32) / err(64) <= 4 * 1.2


def test_hessian_symmetric_by_construction():
    g = TorusGrid(2, 16)
    rng = np.random.default_rng(1)
    H = hessian(GridField(g, rng.standard_normal(g.size))).matrix()
    assert np.array_equal(H, np.swapaxes(H, -1, -2))


def test_min_eig_examples():
    g = TorusGrid(2, 8)
    zero = SymMatField(g, np.zeros((3, 8, 8)))
    field, gmin, node = min_eig_stats(zero)
    assert gmin == 0 and node == 0 and np.all(field.values == 0)
    diag = SymMatField(g, np.stack([np.ones((8, 8)), np.zeros((8, 8)), -2 * np.ones((8, 8))]))
    assert min_eig_stats(diag)[1] == -2
    g1 = TorusGrid(1, 128)
    L = g1.sample(lambda x: np.log(1 + 0.5 * np.cos(2 * np.pi * x)))
    _, gmin, node = min_eig_stats(hessian(L))
    assert abs(gmin - (-4 * np.pi**2 * 0.5 / 1.5)) <= 2e-2
    assert node == 0


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_min_eig_matches_eigvalsh_and_bounds_diagonal(seed):
    rng = np.random.default_rng(seed)
    g = TorusGrid(2, 8)
    H = SymMatField(g, rng.standard_normal((3, 8, 8)))
    field, gmin, node = min_eig_stats(H)
    ref = np.linalg.eigvalsh(H.matrix())[..., 0]
    assert np.allclose(field.values, ref, atol=1e-12)
    assert np.all(field.values <= H.component(0, 0) + 1e-12)
    assert np.all(field.values <= H.component(1, 1) + 1e-12)
    assert gmin == field.flat.min() and node == int(np.argmin(field.flat))


def test_interpolation_exact_at_nodes_and_on_linear_pieces():
    g = TorusGrid(2, 16)
    rng = np.random.default_rng(3)
    f = GridField(g, rng.standard_normal(g.size))
    assert np.allclose(interpolate(f, g.coords()), f.flat, atol=1e-14)
    # halfway between nodes the interpolant is the average
    mid = g.coords()[:1] + 0.5 * g.spacing * np.array([[1.0, 0.0]])
    assert interpolate(f, mid)[0] == pytest.approx(0.5 * (f.values[0, 0] + f.values[1, 0]))
    # periodic wrap
    wrap = np.array([[1.0 - 0.5 * g.spacing, 0.0]])
    assert interpolate(f, wrap)[0] == pytest.approx(0.5 * (f.values[-1, 0] + f.values[0, 0]))


def test_trig_interpolant_reproduces_band_limited_fields():
    g = TorusGrid(2, 16)
    f = g.sample(lambda x, y: np.cos(2 * np.pi * x) + np.sin(2 * np.pi * (x + 2 * y)))
    pts = np.random.default_rng(0).uniform(size=(20, 2))
    val, grad, hess = TrigInterpolant(f).evaluate(pts)
    x, y = pts[:, 0], pts[:, 1]
    s = np.sin(2 * np.pi * (x + 2 * y))
    assert np.allclose(val, np.cos(2 * np.pi * x) + s, atol=1e-12)
    c = np.cos(2 * np.pi * (x + 2 * y))
    assert np.allclose(grad[:, 1], 4 * np.pi * c, atol=1e-10)
    assert np.allclose(hess[:, 0, 1], -8 * np.pi**2 * s, atol=1e-9)
