"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line."""

import random
import time

import numpy as np
import pytest

from eulerext.boussinesq import (conserved_energy_check, default_stability_setup, solve,
                                 stability_experiment)
from eulerext.dof import (count_table, divergence_rank, dim_VN, dim_WN, find_threshold,
                          jet_matches, kernel_basis, pdiv, random_kernel_vector, realize_jet)
from eulerext.fields import PeriodicGrid
from eulerext.flowgen import make_drift_flow
from eulerext.geometry import flat_metric
from eulerext.lagrange import label_map, roundtrip_check, trajectory_map
from eulerext.verifier import (chain_gap, verify_boussinesq_form, verify_extension,
                               verify_reduced_system, verify_volume_condition)


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance] {name}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, detail
    return emit


def test_end_to_end_non_rigidity(pipelines, report):
    t0 = time.perf_counter()
    reps = {K: verify_boussinesq_form(pipelines.flow, pipelines(K).extension) for K in (4, 16)}
    seconds = (pipelines.label_seconds + pipelines.seconds[4] + pipelines.seconds[16]
               + time.perf_counter() - t0)
    ratio = reps[4].momentum / reps[16].momentum
    transport = max(r.transport_max for r in reps.values())
    ok = ratio >= 10 and transport <= 1e-5 and seconds <= 120
    report("end-to-end non-rigidity", ok,
           f"projected momentum K=4 {reps[4].momentum:.3e}, K=16 {reps[16].momentum:.3e}, "
           f"ratio {ratio:.1f} >= 10; transport {transport:.2e} <= 1e-5; {seconds:.0f} s <= 120 s")


def test_chain_equivalence(pipelines, report):
    gaps, vols = [], []
    for K in (4, 16):
        ext = pipelines(K).extension
        b = verify_boussinesq_form(pipelines.flow, ext)
        r = verify_reduced_system(pipelines.flow, ext)
        gaps.append(chain_gap(b, r))
        vols.append(verify_volume_condition(ext))
    ok = max(gaps) <= 1e-8 and max(vols) <= 1e-12
    report("chain equivalence", ok,
           f"max residual gap {max(gaps):.2e} <= 1e-8; volume defect {max(vols):.2e} <= 1e-12")


def test_label_map_contract(pipelines, report):
    cases = [("shear 64^2", pipelines.flow, 256),
             ("drift d=2 32^2", make_drift_flow(1.0, 2, seed=1, n=32), 256),
             # five frames keep the backward sweep over 32^3 seeds affordable
             ("drift d=3 32^3", make_drift_flow(1.0, 3, seed=1, n=32, frames=5), 32)]
    worst_rt, worst_disp = 0.0, 0.0
    for _, flow, sub in cases:
        X, A = trajectory_map(flow, sub), label_map(flow, sub)
        worst_rt = max(worst_rt, roundtrip_check(X, A))
        worst_disp = max(worst_disp, A.max_displacement(), X.max_displacement())
    flow = make_drift_flow(1.0, 2, seed=1, n=16, amplitude=1 / 32)
    ratios = []
    for fn in (trajectory_map, label_map):
        ref = fn(flow, 2048).values
        e = [np.abs(fn(flow, s).values - ref).max() for s in (32, 64, 128)]
        ratios += [e[0] / e[1], e[1] / e[2]]
    ok = worst_rt <= 1e-6 and worst_disp < 0.25 and all(12 <= r <= 20 for r in ratios)
    report("label-map contract", ok,
           f"round trip {worst_rt:.2e} <= 1e-6; displacement {worst_disp:.4f} < 0.25; "
           f"RK4 ratios {min(ratios):.2f}..{max(ratios):.2f} in [12, 20]")


def test_stability_trend(report):
    t0 = time.perf_counter()
    u0, metric, F, mode = default_stability_setup(32)
    tab = stability_experiment(u0, metric, F, mode, range(2, 7), 1.0, 1 / 128)
    seconds = time.perf_counter() - t0
    slope = tab.slope()
    ok = abs(slope - 1.0) <= 0.3 and tab.monotone() and seconds <= 600
    dist = ", ".join(f"{r.energy_distance:.3e}" for r in tab.rows)
    report("stability trend", ok,
           f"slope {slope:.3f} in [0.7, 1.3]; monotone {tab.monotone()}; distances {dist}; "
           f"{seconds:.0f} s <= 600 s")


def test_conservation(report):
    grid = PeriodicGrid((64, 64))
    x1, x2 = grid.mesh()
    g_upper = (2 + 0.5 * np.sin(2 * np.pi * x1))[None]
    rho0 = (1 + 0.1 * np.cos(2 * np.pi * x2))[None]
    tr = solve(np.zeros((2,) + grid.n), flat_metric(grid), None, 1.0, 1 / 512, 16,
               rho0=rho0, g_upper=g_upper)
    rep = conserved_energy_check(tr)
    ok = rep.drift <= 1e-6 and rep.horizontal_variation >= 1e-3
    report("conservation", ok, f"total drift {rep.drift:.2e} <= 1e-6; horizontal variation "
                               f"{rep.horizontal_variation:.2e} >= 1e-3")


def test_dimension_count(report):
    t0 = time.perf_counter()
    checks = {"dim V_2(3) = 15": dim_VN(2, 3) == 15, "dim W_1(2) = 7": dim_WN(1, 2) == 7}
    pairs = [(N, d) for d in (1, 2, 3) for N in range(0, 9)] + [(N, 3) for N in range(9, 21)]
    checks["rank-nullity"] = all(divergence_rank(N, d) + dim_WN(N, d) == d * dim_VN(N, d)
                                 for N, d in pairs)
    N_star, _ = find_threshold(3, 1, 20)
    gaps = [r.gap for r in count_table(3, 1, 24)]
    checks["threshold d=3 m=1"] = N_star is not None and all(
        b > a for a, b in zip(gaps[N_star:], gaps[N_star + 1:]))
    find_threshold(2, 1, 12)  # d = 2 is reported only
    rng = random.Random(2024)
    exact = 0
    bases = {(N, d): kernel_basis(N, d) for d in (2, 3) for N in range(1, 5)}
    keys = sorted(bases)
    for j in range(50):
        N, d = keys[j % len(keys)]
        P = random_kernel_vector(N, d, rng, bases[(N, d)])
        Q, u = realize_jet(P, d)
        exact += (not pdiv(u, d)) and jet_matches(u, P, N)
    checks["50 exact realizations"] = exact == 50
    seconds = time.perf_counter() - t0
    ok = all(checks.values()) and seconds <= 300
    failed = [k for k, v in checks.items() if not v]
    report("dimension count", ok, f"N* = {N_star}; realized {exact}/50; "
                                  f"failed: {failed or 'none'}; {seconds:.0f} s <= 300 s")


def test_mutation_sensitivity(pipelines, report):
    flow, ext = pipelines.flow, pipelines(4).extension
    base = verify_extension(flow, ext).passed
    survivors = []
    for s in range(ext.m):
        for kind, mutant in (("flip", ext.flip_slot(s)), ("drop", ext.drop_slot(s))):
            if verify_extension(flow, mutant).passed:
                survivors.append(f"{kind} {ext.describe(s)}")
    ok = base and not survivors
    report("mutation sensitivity", ok, f"original passes: {base}; {2 * ext.m} mutants, "
                                       f"{len(survivors)} survived")
