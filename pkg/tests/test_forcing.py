import numpy as np
import pytest

from eulerext.fields import PeriodicGrid
from eulerext.flowgen import canonical_shear, constant_flow, make_drift_flow
from eulerext.forcing import (ForcingSamples, SampleSet, SeparableForcing, fit_separable,
                              forcing_residual, image_samples, material_force)
from eulerext.lagrange import label_map

EPS = 1 / 32


@pytest.fixture(scope="module")
def shear():
    flow = canonical_shear(1.0, EPS, 64)
    labels = label_map(flow, 256)
    G = material_force(flow)
    return flow, labels, G, image_samples(labels, G)


def planted_samples(P=4000, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.random((P, 2))
    y = rng.random(P)
    v = np.sin(2 * np.pi * a[:, 0]) * np.cos(2 * np.pi * y)
    return ForcingSamples(2, {0: SampleSet(a, y, v)}), a, y, v


def test_constant_flow_has_no_force():
    flow = constant_flow(PeriodicGrid((16, 16)), [0.2, 0.2])
    assert np.abs(material_force(flow)).max() == 0


def test_shear_force_closed_form(shear):
    flow, _, G, _ = shear
    x1 = flow.grid.mesh()[0]
    assert np.abs(G[:, 0]).max() < 1e-12
    assert np.abs(G[:, 1] + 3 * np.pi / 256 * np.cos(2 * np.pi * x1)).max() < 1e-12


def test_force_needs_five_frames():
    with pytest.raises(ValueError):
        material_force(canonical_shear(1.0, EPS, 16, frames=4))


def test_steady_rotational_force_time_independent():
    # a steady solenoidal field: the force is -u.grad u at every frame
    grid = PeriodicGrid((16, 16))
    x1, x2 = grid.mesh()
    u = np.stack([0.2 + 0.01 * np.sin(2 * np.pi * x2), 0.2 + 0.01 * np.sin(2 * np.pi * x1)])
    from eulerext.flowgen import _steady
    from eulerext.geometry import flat_metric
    from eulerext.fields import uniform_times
    G = material_force(_steady(grid, uniform_times(1, 9), u, flat_metric(grid), "rot"))
    assert np.abs(G - G[:1]).max() < 1e-14 and np.abs(G).max() > 1e-3


def test_constant_flow_samples():
    grid = PeriodicGrid((8, 8))
    flow = constant_flow(grid, [3 / 16, 3 / 16], frames=5)
    L = label_map(flow, 64)
    S = image_samples(L, material_force(flow))
    s = S.directions[0]
    assert np.all(s.values == 0)
    # A = x - c t, so every sample label sits on the shifted grid
    assert len(s) == 5 * 64


def test_shear_sample_counts(shear):
    _, _, _, S = shear
    assert len(S.directions[1]) == 17 * 64 * 64
    assert np.abs(S.directions[0].values).max() < 1e-12


def test_zero_force_fits_zero():
    S = ForcingSamples(2, {0: SampleSet(np.random.rand(300, 2), np.random.rand(300), np.zeros(300))})
    sep = fit_separable(S, 2)
    assert np.abs(sep.coefficients[0]).max() == 0 and sep.term_count(0) == 0


def test_planted_single_mode_recovered():
    S, a, y, v = planted_samples()
    sep = fit_separable(S, 2, ridge=1e-12 * len(v), tol=1e-13)
    c = sep.coefficients[0]  # axes: k1, k2 in -2..2, n in (-2, -1, 1, 2)
    expect = np.zeros_like(c)
    # sin(2 pi a) cos(2 pi y) = sum over k, n = +-1 of (-i k / 4) e^{2 pi i (k a + n y)}
    for k in (-1, 1):
        for n, col in ((-1, 1), (1, 2)):
            expect[2 + k, 2, col] = -0.25j * k
    assert np.abs(c - expect).max() < 1e-8
    assert sep.term_count(0) <= 2
    assert np.abs(sep.evaluate(0, a, y) - v).max() < 1e-8


def test_negative_K_rejected():
    S, *_ = planted_samples(50)
    with pytest.raises(ValueError):
        fit_separable(S, -1)


def test_fit_residual_decreases_with_K(shear):
    _, _, _, S = shear
    P = len(S.directions[1])
    rms = [fit_separable(S, K, ridge=1e-9 * P, tol=1e-8).reports[1].rms for K in (4, 8)]
    assert rms[0] / rms[1] >= 4


def test_exact_separable_force_has_small_residual():
    flow = make_drift_flow(1.0, 2, seed=2, n=16)
    labels = label_map(flow, 64)
    G = np.zeros((17, 2) + flow.grid.n)
    a = np.mod(labels.A, 1.0)
    x2 = flow.grid.mesh()[1]
    G[:, 1] = np.sin(2 * np.pi * a[:, 0]) * np.cos(2 * np.pi * x2)
    S = image_samples(labels, G)
    sep = fit_separable(S, 2, ridge=1e-12 * len(S.directions[1]), tol=1e-13)
    rep = forcing_residual(sep, flow, labels, G)
    assert rep.sup.max() < 1e-8


def test_shear_projected_residual_regression(shear):
    flow, labels, G, S = shear
    P = len(S.directions[1])
    proj = [forcing_residual(fit_separable(S, K, ridge=1e-9 * P, tol=1e-8), flow, labels, G)
            .projected_sup for K in (2, 4, 8)]
    assert proj[-1] <= 1e-3
    assert all(b <= a for a, b in zip(proj, proj[1:]))


def test_separable_roundtrip(tmp_path):
    S, a, y, v = planted_samples(800, 1)
    sep = fit_separable(S, 2, ridge=1e-10 * 800, tol=1e-12)
    sep.save(tmp_path / "F.bin")
    back = SeparableForcing.load(tmp_path / "F.bin")
    assert back.K == 2 and back.term_count(0) == sep.term_count(0)
    assert np.array_equal(back.evaluate(0, a, y), sep.evaluate(0, a, y))
    (tmp_path / "bad.bin").write_bytes((tmp_path / "F.bin").read_bytes() + b"\0")
    with pytest.raises(ValueError):
        SeparableForcing.load(tmp_path / "bad.bin")
