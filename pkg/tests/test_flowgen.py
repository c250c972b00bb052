import numpy as np
import pytest

from eulerext.fields import PeriodicGrid
from eulerext.flowgen import (canonical_shear, check_in_U, constant_flow, load_flow,
                              load_metric, make_drift_flow, save_flow, save_metric)
from eulerext.geometry import build_metric


def wavy_metric(grid):
    def g(x1, x2):
        out = np.zeros((2, 2) + x1.shape)
        out[0, 0] = 1.0 + 0.2 * np.sin(2 * np.pi * x2)
        out[1, 1] = 1.0 + 0.1 * np.cos(2 * np.pi * x1)
        out[0, 1] = out[1, 0] = 0.05 * np.sin(2 * np.pi * (x1 + x2))
        return out
    return build_metric(grid, g)


def test_canonical_shear_in_U():
    flow = canonical_shear(1.0, 1 / 32, 64)
    rep = check_in_U(flow)
    assert rep.passed
    assert rep.component_min[1] >= 0.15625 - 1e-15 and rep.component_max[1] <= 0.21875 + 1e-15
    assert flow.max_divergence() == 0.0


def test_canonical_shear_zero_epsilon_is_constant():
    flow = canonical_shear(1.0, 0.0, 16)
    assert np.all(flow.velocity == 3 / 16)
    assert check_in_U(flow).passed


def test_canonical_shear_rejects_large_epsilon():
    with pytest.raises(ValueError):
        canonical_shear(1.0, 1 / 16, 16)


def test_constant_flow_margin():
    flow = constant_flow(PeriodicGrid((8, 8)), [3 / 16, 3 / 16])
    rep = check_in_U(flow)
    assert rep.passed and rep.margin == pytest.approx(1 / 16)


def test_zero_component_fails_lower_bound():
    rep = check_in_U(constant_flow(PeriodicGrid((8, 8)), [3 / 16, 0.0]))
    assert not rep.passed and "lower" in rep.worst and "in U: no" in rep.summary()


def test_drift_flow_zero_amplitude_is_constant():
    flow = make_drift_flow(1.0, 2, amplitude=0.0, n=16)
    assert np.all(flow.velocity == 3 / 16)


@pytest.mark.parametrize("d", [2, 3])
def test_drift_flow_in_U_and_solenoidal(d):
    flow = make_drift_flow(1.0, d, seed=7, n=16)
    assert check_in_U(flow).passed
    assert flow.max_divergence() <= 1e-10


def test_drift_flow_curved_metric():
    grid = PeriodicGrid((16, 16))
    flow = make_drift_flow(1.0, 2, wavy_metric(grid), seed=2)
    assert check_in_U(flow).passed
    assert flow.max_divergence() <= 1e-10


def test_drift_flow_bad_amplitude_names_bound():
    with pytest.raises(ValueError, match="bound"):
        make_drift_flow(1.0, 2, amplitude=0.5, n=16)


def test_drift_flow_deterministic():
    a = make_drift_flow(1.0, 2, seed=3, n=16)
    b = make_drift_flow(1.0, 2, seed=3, n=16)
    assert np.array_equal(a.velocity, b.velocity)


def test_time_interpolation_without_generator(tmp_path):
    flow = make_drift_flow(1.0, 2, seed=1, n=16, frames=33)
    save_flow(tmp_path / "f.bin", flow)
    loaded = load_flow(tmp_path / "f.bin")
    assert loaded.generator is None
    assert np.array_equal(loaded.velocity, flow.velocity)
    t = 0.37
    assert np.abs(loaded.at(t) - flow.at(t)).max() < 1e-7


def test_flow_and_metric_roundtrip(tmp_path):
    grid = PeriodicGrid((8, 8))
    m = wavy_metric(grid)
    save_metric(tmp_path / "g.bin", m)
    back = load_metric(tmp_path / "g.bin")
    assert np.array_equal(back.g, m.g)
    flow = canonical_shear(1.0, 1 / 32, 16)
    save_flow(tmp_path / "c.bin", flow)
    loaded = load_flow(tmp_path / "c.bin")
    assert loaded.generator is not None and np.array_equal(loaded.at(0.3), flow.velocity[0])
