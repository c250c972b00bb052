import csv

import numpy as np
import pytest

from eulerext.extender import ExtensionData, Slot, build_extension, trig_profile
from eulerext.fields import PeriodicGrid, uniform_times
from eulerext.flowgen import Flow, canonical_shear, constant_flow, make_drift_flow
from eulerext.geometry import flat_metric
from eulerext.verifier import (chain_gap, energy_report, positivity_failures, pressure_gap,
                               transport_residuals, verify_boussinesq_form, verify_extension,
                               verify_incompressible, verify_reduced_system,
                               verify_volume_condition, write_report_csv)


@pytest.fixture(scope="module")
def trivial():
    flow = constant_flow(PeriodicGrid((16, 16)), [3 / 16, 3 / 16])
    return flow, build_extension(flow, 2, substeps=64).extension


def test_trivial_case_passes(trivial):
    flow, ext = trivial
    cert = verify_extension(flow, ext)
    assert cert.passed and cert.summary().endswith("verify: pass")
    assert cert.boussinesq.momentum <= 1e-10 and cert.reduced.momentum <= 1e-10
    assert cert.boussinesq.raw_sup.max() <= 1e-10
    assert verify_volume_condition(ext) == 0 and chain_gap(cert.boussinesq, cert.reduced) == 0


def test_empty_extension_volume():
    ext = ExtensionData(PeriodicGrid((8, 8)), uniform_times(1, 5), np.zeros((5, 2, 8, 8)),
                        [], [], [], [], np.zeros((5, 8, 8)))
    assert verify_volume_condition(ext) == 0.0


def test_pipeline_passes_at_default_tolerances(pipelines):
    for K in (4, 16):
        cert = verify_extension(pipelines.flow, pipelines(K).extension)
        assert cert.passed, cert.summary()


def test_k16_regression_bounds(pipelines):
    rep = verify_boussinesq_form(pipelines.flow, pipelines(16).extension)
    assert rep.momentum <= 1e-3
    assert rep.transport_max <= 1e-5


def test_chain_equivalence(pipelines):
    flow, ext = pipelines.flow, pipelines(4).extension
    b = verify_boussinesq_form(flow, ext)
    r = verify_reduced_system(flow, ext)
    assert chain_gap(b, r) <= 1e-8
    # the swirl transport residual is the rho residual divided by u~_s
    for s in ext.forcing_slots()[:4]:
        assert r.transport[s] <= b.transport[s] / np.sqrt(2.0 * ext.rho(s).min()) + 1e-15


def test_stored_pressure_absorbs_gradient_part(pipelines):
    assert pressure_gap(pipelines.flow, pipelines(4).extension) <= 1e-10


def test_unclosed_extension_reports_deviation(pipelines):
    ext = pipelines(4).extension
    unclosed = ext.drop_slot(ext.m - 1)
    assert verify_volume_condition(unclosed) > 1e-3
    assert verify_volume_condition(ext) <= 1e-12


def test_positivity_failure_names_slot(pipelines):
    ext = pipelines(4).extension
    s = ext.forcing_slots()[5]
    msgs = positivity_failures(ext.flip_slot(s))
    assert msgs and msgs[0].startswith(f"slot {s + 1} ")


def test_incompressibility_check():
    assert verify_incompressible(make_drift_flow(1.0, 2, seed=3, n=16)) <= 1e-10
    grid = PeriodicGrid((16, 16))
    assert verify_incompressible(constant_flow(grid, [0.2, 0.2])) == 0
    x1, _ = grid.mesh()
    u = np.stack([np.sin(2 * np.pi * x1), np.zeros(grid.n)])
    times = uniform_times(1, 5)
    flow = Flow(grid, times, np.broadcast_to(u, (5, 2) + grid.n).copy(), flat_metric(grid))
    assert verify_incompressible(flow) > 1


def test_energy_static_translation():
    # u constant, rho carried by translation, g~ = 1: both energies constant.
    # 13 frames on 64 nodes make every frame shift exactly one cell.
    grid = PeriodicGrid((64, 64))
    c = 3 / 16
    flow = constant_flow(grid, [c, c], frames=13)
    m = len(flow.times)
    disp = -c * np.broadcast_to(flow.times.reshape(-1, 1, 1, 1), (m, 2) + grid.n).copy()
    base = np.zeros((5, 5), dtype=complex)
    base[3, 2] = base[1, 2] = 0.5
    flat = trig_profile(np.array([1.0 + 0j]))
    ext = ExtensionData(grid, flow.times, disp, [base], [flat], [0],
                        [Slot(0, 0, 0, rho_shift=2.0)], np.zeros((m,) + grid.n))
    rep = energy_report(flow, ext)
    assert np.ptp(rep.horizontal) == 0 and np.ptp(rep.vertical) < 1e-12
    assert transport_residuals(flow, ext).max() < 1e-12


def test_energy_trivial_extension(trivial):
    flow, ext = trivial
    rep = energy_report(flow, ext)
    assert rep.horizontal_variation == 0 and rep.drift == 0


def test_energy_drift_bounded_by_residuals(pipelines):
    flow, ext = pipelines.flow, pipelines(4).extension
    rep = energy_report(flow, ext)
    b = verify_boussinesq_form(flow, ext)
    u = flow.velocity
    rate = max(flow.grid.integrate(np.abs((u[j] * b.projected[j]).sum(0))) for j in range(len(u)))
    rate += sum(np.abs(ext.g_upper(s)).max() * b.transport[s] for s in ext.forcing_slots())
    assert rep.drift <= rate * flow.T


def test_incompatible_inputs_rejected(pipelines):
    with pytest.raises(ValueError):
        verify_extension(canonical_shear(1.0, 1 / 32, 32), pipelines(4).extension)


def test_report_csv(pipelines, tmp_path):
    cert = verify_extension(pipelines.flow, pipelines(4).extension)
    write_report_csv(tmp_path / "r.csv", cert)
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0][0] == "t" and len(rows) == 1 + len(pipelines.flow.times)
