"""Pseudospectral solver for forced Euler flows with transported labels and scalars.

State: the velocity one-form ``w = u_flat``, the label displacement
``D = A - x`` (periodic), and optional swirl fields ``rho_s``.  Tendencies

    dw/dt   = P[-u^j nabla_j w - F(A, x) - sum_s rho_s grad g~^ss]
    dD/dt   = -u - u^j d_j D
    drho/dt = -u^j d_j rho

are truncated by the 2/3 rule before projection and integrated with RK4.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fields import PeriodicGrid, time_derivative
from .flowgen import Flow
from .forcing import SeparableForcing, advective_oneform
from .geometry import MetricField, flat_metric, leray_project, lower, raise_index

BLOWUP = 1e6
CFL_LIMIT = 0.5

ForcingFn = Callable[[float, np.ndarray], np.ndarray]


# -- forcing specifications ------------------------------------------------

def separable_forcing(sep: SeparableForcing, grid: PeriodicGrid) -> ForcingFn:
    """``F_i(A, x^i)`` from a fitted separable forcing."""
    x = grid.mesh()

    def F(t, A):
        a = np.mod(A, 1.0).reshape(grid.d, -1).T
        out = np.zeros((grid.d,) + grid.n)
        for i in range(grid.d):
            out[i] = sep.evaluate_joint(i, a, x[i].reshape(-1)).reshape(grid.n)
        return out

    return F


def closed_form_forcing(fn: Callable, grid: PeriodicGrid) -> ForcingFn:
    """Wrap ``fn(a, x) -> (d, *n)`` taking label and position meshes."""
    x = grid.mesh()
    return lambda t, A: np.asarray(fn(A, x), dtype=float)


def add_forcing(F: ForcingFn | None, extra: np.ndarray, scale: float) -> ForcingFn:
    """``F + scale * extra`` for a fixed one-form ``extra``."""
    def G(t, A):
        base = 0.0 if F is None else F(t, A)
        return base + scale * extra
    return G


# -- state and trajectories ------------------------------------------------

@dataclass
class SolverState:
    t: float
    u: np.ndarray
    displacement: np.ndarray
    rho: np.ndarray | None = None
    pressure: np.ndarray | None = None


@dataclass
class Trajectory:
    metric: MetricField
    times: np.ndarray
    velocity: np.ndarray       # (F, d, *n)
    displacement: np.ndarray   # (F, d, *n)
    pressure: np.ndarray       # (F, *n)
    rho: np.ndarray | None = None  # (F, S, *n)
    g_upper: np.ndarray | None = None  # (S, *n)
    max_divergence: float = 0.0

    @property
    def grid(self) -> PeriodicGrid:
        return self.metric.grid

    def state(self, j: int) -> SolverState:
        rho = None if self.rho is None else self.rho[j]
        return SolverState(float(self.times[j]), self.velocity[j], self.displacement[j], rho,
                           self.pressure[j])

    def to_flow(self, name: str = "solver") -> Flow:
        return Flow(self.grid, self.times, self.velocity, self.metric, None, name)


class _Truncation:
    def __init__(self, grid: PeriodicGrid):
        self.grid = grid
        self.mask = grid.dealias_mask()

    def __call__(self, a: np.ndarray) -> np.ndarray:
        g = self.grid
        return g.inverse_transform(g.transform(a) * self.mask)


def _advect_scalars(grid, u, s):
    """``u^j d_j s`` for fields ``s`` of shape ``(c, *n)``."""
    ds = grid.gradient(s)  # (c, j, *n)
    return np.einsum("j...,cj...->c...", u, ds)


def cfl_number(u: np.ndarray, dt: float, grid: PeriodicGrid) -> float:
    return float(np.abs(u).max() * dt * max(grid.n))


def solve(u0: np.ndarray, metric: MetricField | None = None, forcing: ForcingFn | SeparableForcing | None = None,
          T: float = 1.0, dt: float = 1 / 256, stride: int = 1, rho0: np.ndarray | None = None,
          g_upper: np.ndarray | None = None, grid: PeriodicGrid | None = None,
          dealias: bool = True) -> Trajectory:
    """Integrate the forced system from ``u0`` with ``A(0) = x``.

    ``rho0`` (``(S, *n)``) and ``g_upper`` (``(S, *n)``, time independent) add
    the buoyancy term and the transported scalars.  Frames are emitted every
    ``stride`` steps; ``T / dt`` must be an integer.
    """
    if metric is None:
        grid = grid or PeriodicGrid(np.shape(u0)[1:])
        metric = flat_metric(grid)
    grid = metric.grid
    d = grid.d
    u0 = np.asarray(u0, dtype=float)
    if u0.shape != (d,) + grid.n:
        raise ValueError(f"initial velocity has shape {u0.shape}, expected {(d,) + grid.n}")
    steps = int(round(T / dt))
    if steps < 1 or abs(steps * dt - T) > 1e-12 * max(1.0, T):
        raise ValueError(f"T = {T} is not an integer multiple of dt = {dt}")
    cfl = cfl_number(u0, dt, grid)
    if cfl > CFL_LIMIT:
        raise ValueError(f"CFL number {cfl:.3f} exceeds {CFL_LIMIT}: max|u| dt n too large")
    if isinstance(forcing, SeparableForcing):
        forcing = separable_forcing(forcing, grid)
    if (rho0 is None) != (g_upper is None):
        raise ValueError("rho0 and g_upper must be given together")
    trunc = _Truncation(grid) if dealias else (lambda a: a)
    x = grid.mesh()
    dg = None
    if g_upper is not None:
        g_upper = np.asarray(g_upper, dtype=float)
        dg = grid.gradient(g_upper)  # (S, d, *n)

    def project(L):
        return leray_project(metric, L)

    w = trunc(lower(metric, u0))
    w, _ = project(w)
    D = np.zeros((d,) + grid.n)
    rho = None if rho0 is None else trunc(np.asarray(rho0, dtype=float))

    def rhs(t, w, D, rho):
        u = raise_index(metric, w)
        L = -advective_oneform(metric, u, w)
        if forcing is not None:
            L = L - forcing(t, x + D)
        if rho is not None:
            L = L - np.einsum("s...,sj...->j...", rho, dg)
        Lp, p = project(trunc(L))
        dD = trunc(-u - _advect_scalars(grid, u, D))
        dr = None if rho is None else trunc(-_advect_scalars(grid, u, rho))
        return Lp, dD, dr, p

    times, U, DD, P, R = [], [], [], [], []
    max_div = 0.0

    def emit(t, w, D, rho, p):
        u = raise_index(metric, w)
        times.append(t)
        U.append(u)
        DD.append(D.copy())
        P.append(p)
        if rho is not None:
            R.append(rho.copy())

    t = 0.0
    for n in range(steps):
        k1 = rhs(t, w, D, rho)
        if n % stride == 0:
            emit(t, w, D, rho, k1[3])

        def stage(k, h):
            return (w + h * k[0], D + h * k[1], None if rho is None else rho + h * k[2])

        k2 = rhs(t + dt / 2, *stage(k1, dt / 2))
        k3 = rhs(t + dt / 2, *stage(k2, dt / 2))
        k4 = rhs(t + dt, *stage(k3, dt))
        w = w + dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        D = D + dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        if rho is not None:
            rho = rho + dt / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        t = (n + 1) * dt
        biggest = max(np.abs(w).max(), np.abs(D).max(), 0.0 if rho is None else np.abs(rho).max())
        if not np.isfinite(biggest) or biggest > BLOWUP:
            raise FloatingPointError(f"solution exceeded {BLOWUP:g} at step {n + 1} (t = {t:.6g}, "
                                     f"frame {(n + 1) // stride})")
        max_div = max(max_div, float(np.abs(_divergence(metric, w)).max()))
    if steps % stride == 0:
        emit(t, w, D, rho, rhs(t, w, D, rho)[3])
    rho_frames = np.stack(R) if R else None
    return Trajectory(metric, np.array(times), np.stack(U), np.stack(DD), np.stack(P), rho_frames,
                      g_upper, max_div)


def _divergence(metric, w):
    from .geometry import divergence
    return divergence(metric, raise_index(metric, w))


# -- diagnostics -----------------------------------------------------------

@dataclass
class EnergyTrace:
    times: np.ndarray
    values: dict[int, np.ndarray]

    def sup(self, s: int) -> float:
        return float(self.values[s].max())


def _sobolev_density(grid: PeriodicGrid, f: np.ndarray, k: int) -> float:
    """``int |grad^k f|^2`` (flat, all ordered multi-indices) by Parseval; ``f`` is ``(c, *n)``."""
    c = grid.transform(f)
    lap = -grid.laplacian_symbol()  # (2 pi |k|)^2
    return float((np.abs(c) ** 2 * lap[None] ** k).sum().real)


def energy_sobolev(reference: Trajectory, perturbed: Trajectory, s: int = 2) -> EnergyTrace:
    """``E_s = sum_{k <= s} 1/2 int |grad^k v|^2 + |grad^k B|^2`` for the differences.

    The zeroth-order term uses the metric; higher orders use coordinate
    derivatives weighted by the mean volume density.
    """
    if len(reference.times) != len(perturbed.times) or not np.allclose(reference.times, perturbed.times):
        raise ValueError("trajectories have different time frames")
    metric = reference.metric
    grid = metric.grid
    sg = metric.sqrt_det
    wmean = float(sg.mean())
    out = {k: np.zeros(len(reference.times)) for k in range(s + 1)}
    for j in range(len(reference.times)):
        v = perturbed.velocity[j] - reference.velocity[j]
        B = perturbed.displacement[j] - reference.displacement[j]
        acc = 0.0
        for k in range(s + 1):
            if k == 0:
                term = 0.5 * grid.integrate(((lower(metric, v) * v).sum(0)
                                             + (lower(metric, B) * B).sum(0)) * sg)
            else:
                term = 0.5 * wmean * (_sobolev_density(grid, v, k) + _sobolev_density(grid, B, k))
            acc += float(term)
            out[k][j] = acc
    return EnergyTrace(reference.times, out)


def kinetic_energy(traj: Trajectory) -> np.ndarray:
    grid = traj.grid
    sg = traj.metric.sqrt_det
    return np.array([grid.integrate(0.5 * (lower(traj.metric, u) * u).sum(0) * sg)
                     for u in traj.velocity])


def system_residual(traj: Trajectory, forcing: ForcingFn | None) -> float:
    """Sup of the projected momentum residual and label transport residual on the frames."""
    metric = traj.metric
    grid = traj.grid
    x = grid.mesh()
    w = lower(metric, traj.velocity)
    r = time_derivative(w, traj.times) + advective_oneform(metric, traj.velocity, w)
    if forcing is not None:
        r = r + np.stack([forcing(t, x + D) for t, D in zip(traj.times, traj.displacement)])
    if traj.rho is not None:
        dg = grid.gradient(traj.g_upper)
        r = r + np.einsum("ms...,sj...->mj...", traj.rho, dg)
    proj, _ = leray_project(metric, r)
    dD = time_derivative(traj.displacement, traj.times)
    rt = dD + traj.velocity + np.stack([_advect_scalars(grid, u, D)
                                        for u, D in zip(traj.velocity, traj.displacement)])
    return float(max(np.abs(proj).max(), np.abs(rt).max()))


@dataclass
class ConservationReport:
    times: np.ndarray
    horizontal: np.ndarray
    vertical: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.horizontal + self.vertical

    @property
    def drift(self) -> float:
        return float(np.abs(self.total - self.total[0]).max())

    @property
    def horizontal_variation(self) -> float:
        return float(self.horizontal.max() - self.horizontal.min())


def conserved_energy_check(traj: Trajectory) -> ConservationReport:
    """``1/2 int |u|_g^2 dg + sum_s int g~^ss rho_s dg`` along a trajectory with scalars."""
    horiz = kinetic_energy(traj)
    vert = np.zeros(len(traj.times))
    if traj.rho is not None:
        grid = traj.grid
        sg = traj.metric.sqrt_det
        for j in range(len(traj.times)):
            vert[j] = float(grid.integrate((traj.g_upper * traj.rho[j]).sum(0) * sg))
    return ConservationReport(traj.times, horiz, vert)


# -- stability experiment --------------------------------------------------

@dataclass
class StabilityRow:
    N: int
    delta: float
    energy_distance: float  # sup_t E_0^{1/2}
    seminorms: list[float]  # sup_t seminorm_k(u^N - u), k = 0..2
    diverged: bool = False


@dataclass
class StabilityTable:
    rows: list[StabilityRow]
    reference_residual: float

    def slope(self) -> float:
        """Least-squares slope of ``log2(distance)`` against ``log2(delta)``."""
        ok = [r for r in self.rows if not r.diverged and r.energy_distance > 0]
        x = np.log2([r.delta for r in ok])
        y = np.log2([r.energy_distance for r in ok])
        return float(np.polyfit(x, y, 1)[0])

    def monotone(self, slack: float = 0.0) -> bool:
        dist = [r.energy_distance for r in self.rows if not r.diverged]
        return all(b <= a + slack for a, b in zip(dist, dist[1:]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["N", "delta", "sup_E0_sqrt", "sup_dist_k0", "sup_dist_k1", "sup_dist_k2",
                         "diverged"])
            for r in self.rows:
                wr.writerow([r.N, f"{r.delta:.17g}", f"{r.energy_distance:.17g}"]
                            + [f"{v:.17g}" for v in r.seminorms] + [int(r.diverged)])


def _sup_seminorms(grid, diff: np.ndarray, kmax: int = 2) -> list[float]:
    from .fields import seminorm
    return [max(seminorm(grid, f, k) for f in diff.reshape((-1,) + grid.n)) for k in range(kmax + 1)]


def stability_experiment(u0: np.ndarray, metric: MetricField, forcing: ForcingFn | None,
                         mode: np.ndarray, levels=range(2, 7), T: float = 1.0, dt: float = 1 / 128,
                         stride: int = 4) -> StabilityTable:
    """Distances between the reference and runs forced by ``F + 2^-N mode``."""
    ref = solve(u0, metric, forcing, T, dt, stride)
    res = system_residual(ref, forcing)
    rows = []
    for N in levels:
        delta = 2.0 ** (-N)
        try:
            run = solve(u0, metric, add_forcing(forcing, mode, delta), T, dt, stride)
        except (FloatingPointError, ValueError):
            rows.append(StabilityRow(N, delta, float("inf"), [float("inf")] * 3, True))
            continue
        E = energy_sobolev(ref, run, 0)
        diff = run.velocity - ref.velocity
        rows.append(StabilityRow(N, delta, float(np.sqrt(E.sup(0))),
                                 _sup_seminorms(metric.grid, diff)))
    return StabilityTable(rows, res)


def default_stability_setup(n: int = 32, epsilon: float = 1 / 32, beta: float = 0.01):
    """Shear reference: ``u0`` the canonical shear, ``F(a, x) = -u0 . grad u0 + beta (sin 2 pi a^2, 0)``,
    perturbation mode ``(sin 2 pi x^2, sin 2 pi x^1)``."""
    grid = PeriodicGrid((n, n))
    metric = flat_metric(grid)
    x1, x2 = grid.mesh()
    c = 3.0 / 16.0
    u0 = np.stack([np.full(grid.n, c), c + epsilon * np.sin(2 * np.pi * x1)])

    def F(a, x):
        out = np.zeros((2,) + grid.n)
        out[1] = -c * 2 * np.pi * epsilon * np.cos(2 * np.pi * x[0])
        out[0] = beta * np.sin(2 * np.pi * a[1])
        return out

    mode = np.stack([np.sin(2 * np.pi * x2), np.sin(2 * np.pi * x1)])
    return u0, metric, closed_form_forcing(F, grid), mode
