import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eulerext.fields import PeriodicGrid
from eulerext.geometry import (build_metric, covariant_derivative_oneform, divergence,
                               flat_metric, leray_project, lower, raise_index,
                               vorticity_two_form)
from eulerext.geometry import _leray_flat, _pcg_pressure

TWO_PI = 2 * np.pi
GRID = PeriodicGrid((32, 32))


def diag_metric(grid=GRID):
    def g(x1, x2):
        out = np.zeros((2, 2) + x1.shape)
        out[0, 0] = 1.0
        out[1, 1] = 1.0 + 0.5 * np.sin(TWO_PI * x1)
        return out
    return build_metric(grid, g)


def skew_metric(grid=GRID):
    def g(x1, x2):
        out = np.zeros((2, 2) + x1.shape)
        out[0, 0] = 1.3 + 0.2 * np.cos(TWO_PI * x2)
        out[1, 1] = 1.0 + 0.3 * np.sin(TWO_PI * x1)
        out[0, 1] = out[1, 0] = 0.2 * np.sin(TWO_PI * (x1 + x2))
        return out
    return build_metric(grid, g)


def test_flat_lower_is_identity():
    u = np.random.default_rng(0).standard_normal((2,) + GRID.n)
    assert np.array_equal(lower(flat_metric(GRID), u), u)


def test_lower_diag_metric():
    m = diag_metric()
    x1, _ = GRID.mesh()
    u = np.random.default_rng(1).standard_normal((2,) + GRID.n)
    w = lower(m, u)
    assert np.abs(w[1] - (1 + 0.5 * np.sin(TWO_PI * x1)) * u[1]).max() < 1e-14
    assert np.abs(w[0] - u[0]).max() < 1e-14


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_raise_lower_roundtrip(seed):
    m = skew_metric()
    u = np.random.default_rng(seed).standard_normal((3, 2) + GRID.n)
    assert np.abs(raise_index(m, lower(m, u)) - u).max() < 1e-12


def test_non_positive_metric_rejected():
    def g(x1, x2):
        out = np.zeros((2, 2) + x1.shape)
        out[0, 0] = 1.0
        out[1, 1] = np.sin(TWO_PI * x1)
        return out
    with pytest.raises(ValueError, match="positive definite"):
        build_metric(GRID, g)


def test_covariant_derivative_constant_flat():
    w = np.ones((2,) + GRID.n)
    assert np.abs(covariant_derivative_oneform(flat_metric(GRID), w)).max() == 0


def test_covariant_derivative_christoffel_oracle():
    m = diag_metric()
    x1, _ = GRID.mesh()
    w = np.zeros((2,) + GRID.n)
    w[1] = 1.0
    g22 = 1 + 0.5 * np.sin(TWO_PI * x1)
    gamma = 0.5 * (0.5 * TWO_PI * np.cos(TWO_PI * x1)) / g22  # Gamma^2_12
    nab = covariant_derivative_oneform(m, w)
    assert np.abs(nab[0, 1] + gamma).max() < 1e-10


def test_antisymmetric_part_is_metric_free():
    m = skew_metric()
    w = np.random.default_rng(2).standard_normal((2,) + GRID.n)
    nab = covariant_derivative_oneform(m, w)
    anti = nab - np.swapaxes(nab, 0, 1)
    assert np.abs(anti - vorticity_two_form(GRID, w)).max() < 1e-10


def test_divergence_of_stream_function_field():
    m = skew_metric()
    x1, x2 = GRID.mesh()
    psi = np.sin(TWO_PI * x1) * np.cos(2 * TWO_PI * x2)
    u = np.stack([-GRID.differentiate(psi, 1), GRID.differentiate(psi, 0)]) / m.sqrt_det
    assert np.abs(divergence(m, u)).max() < 1e-10
    assert np.abs(divergence(m, np.ones((2,) + GRID.n))).max() > 0.1


def test_divergence_flat_sine():
    x1, _ = GRID.mesh()
    u = np.stack([np.sin(TWO_PI * x1), np.zeros(GRID.n)])
    assert np.abs(divergence(flat_metric(GRID), u) - TWO_PI * np.cos(TWO_PI * x1)).max() < 1e-12


def test_vorticity_of_gradient_and_rotation():
    x1, x2 = GRID.mesh()
    phi = np.cos(TWO_PI * x1) * np.sin(TWO_PI * x2)
    om = vorticity_two_form(GRID, GRID.gradient(phi))
    assert np.abs(om).max() < 1e-10
    assert np.all(om + np.swapaxes(om, 0, 1) == 0)
    # w = (-sin 2 pi x2, sin 2 pi x1) gives d_1 w_2 - d_2 w_1 = 2 pi (cos 2 pi x1 + cos 2 pi x2)
    w = np.stack([-np.sin(TWO_PI * x2), np.sin(TWO_PI * x1)])
    om = vorticity_two_form(GRID, w)
    assert np.abs(om[0, 1] - TWO_PI * (np.cos(TWO_PI * x1) + np.cos(TWO_PI * x2))).max() < 1e-10


@pytest.mark.parametrize("metric", [flat_metric(GRID), skew_metric()], ids=["flat", "curved"])
def test_leray_gradient_input(metric):
    x1, x2 = GRID.mesh()
    phi = np.sin(TWO_PI * x1) + 0.3 * np.cos(TWO_PI * (x1 - x2)) + 0.7
    res, p = leray_project(metric, GRID.gradient(phi))
    assert np.abs(res).max() < 1e-8
    assert np.abs(p - (phi - phi.mean())).max() < 1e-8


def test_leray_divergence_free_input_unchanged():
    m = skew_metric()
    x1, x2 = GRID.mesh()
    psi = np.sin(TWO_PI * x1) * np.sin(TWO_PI * x2)
    u = np.stack([-GRID.differentiate(psi, 1), GRID.differentiate(psi, 0)]) / m.sqrt_det
    w = lower(m, u)
    res, p = leray_project(m, w)
    assert np.abs(res - w).max() < 1e-8 and np.abs(p).max() < 1e-8


def test_leray_fourier_matches_iterative():
    m = flat_metric(GRID)
    L = np.random.default_rng(5).standard_normal((2,) + GRID.n)
    r1, p1 = _leray_flat(GRID, L)
    p2, _, _ = _pcg_pressure(m, L, 1e-13, 500)
    assert np.abs(p1 - p2).max() < 1e-10


def test_leray_projects_onto_divergence_free():
    m = skew_metric()
    L = np.random.default_rng(6).standard_normal((3, 2) + GRID.n)
    res, _ = leray_project(m, L)
    assert res.shape == L.shape
    assert np.abs(divergence(m, raise_index(m, res))).max() < 1e-6
