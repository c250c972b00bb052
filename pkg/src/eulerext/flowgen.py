"""Incompressible flows whose components stay inside the band (1/(8T), 1/(4T)).

Flows in this band move every particle by less than 1/4 in each coordinate
over [0, T], which is what makes the extension construction injective.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .fields import PeriodicGrid, fd_weights, read_binary, uniform_times, write_binary
from .geometry import MetricField, build_metric, divergence, flat_metric, lower


@dataclass(frozen=True)
class Flow:
    """Contravariant velocity frames ``(m, d, *n)`` on a uniform time partition.

    ``generator`` (optional) evaluates the exact field at any time; without it
    the flow is interpolated in time from the frames (cubic Lagrange).
    """

    grid: PeriodicGrid
    times: np.ndarray
    velocity: np.ndarray
    metric: MetricField
    generator: Callable[[float], np.ndarray] | None = None
    name: str = ""

    @property
    def d(self) -> int:
        return self.grid.d

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def frames(self) -> int:
        return len(self.times)

    def lowered(self) -> np.ndarray:
        return lower(self.metric, self.velocity)

    def at(self, t: float) -> np.ndarray:
        if self.generator is not None:
            return self.generator(t)
        times = self.times
        j = int(np.searchsorted(times, t))
        if j < len(times) and times[j] == t:
            return self.velocity[j]
        m = len(times)
        k = min(4, m)
        lo = int(np.clip(j - k // 2, 0, m - k))
        idx = range(lo, lo + k)
        w = fd_weights(t, times[lo: lo + k], 0)
        return sum(wk * self.velocity[i] for wk, i in zip(w, idx))

    def max_divergence(self) -> float:
        return float(np.abs(divergence(self.metric, self.velocity)).max())


def _steady(grid, times, u, metric, name):
    u = np.asarray(u, dtype=float)
    frames = np.broadcast_to(u, (len(times),) + u.shape).copy()
    return Flow(grid, times, frames, metric, generator=lambda t: u, name=name)


def constant_flow(grid: PeriodicGrid, c, T: float = 1.0, frames: int = 17,
                  metric: MetricField | None = None) -> Flow:
    c = np.asarray(c, dtype=float)
    u = c.reshape((grid.d,) + (1,) * grid.d) * np.ones(grid.n)
    return _steady(grid, uniform_times(T, frames), u, metric or flat_metric(grid), "constant")


def canonical_shear(T: float = 1.0, epsilon: float = 1 / 32, n: int = 64,
                    frames: int = 17) -> Flow:
    """The steady shear ``u = (3/(16T), 3/(16T) + eps sin 2 pi x^1)`` on the flat 2-torus."""
    if T <= 0:
        raise ValueError("T must be positive")
    bound = 1.0 / (16.0 * T)
    if not 0.0 <= epsilon < bound:
        raise ValueError(f"epsilon = {epsilon} violates 0 <= epsilon < 1/(16T) = {bound}")
    grid = PeriodicGrid((n, n))
    x1 = grid.mesh()[0]
    drift = 3.0 / (16.0 * T)
    u = np.stack([np.full(grid.n, drift), drift + epsilon * np.sin(2 * np.pi * x1)])
    return _steady(grid, uniform_times(T, frames), u, flat_metric(grid), "canonical_shear")


def _random_potential(grid: PeriodicGrid, rng: np.random.Generator, modes: int) -> np.ndarray:
    """Random real trigonometric polynomial with ``1 <= |k|_inf <= modes`` and decaying amplitudes."""
    coeffs = np.zeros(grid.n, dtype=complex)
    ks = [np.arange(-modes, modes + 1)] * grid.d
    for k in np.array(np.meshgrid(*ks, indexing="ij")).reshape(grid.d, -1).T:
        if not k.any():
            continue
        amp = 1.0 / (1.0 + np.dot(k, k))
        idx = tuple(int(v) % n for v, n in zip(k, grid.n))
        coeffs[idx] += amp * (rng.standard_normal() + 1j * rng.standard_normal())
    return grid.inverse_transform(coeffs)


def make_drift_flow(T: float = 1.0, d: int = 2, metric: MetricField | None = None, seed: int = 0,
                    amplitude: float | None = None, n: int = 32, frames: int = 17,
                    modes: int = 2) -> Flow:
    """Uniform drift plus a perturbation built from an antisymmetric potential.

    ``u^i = (c * mean(sqrt g) * delta + w^i) / sqrt g`` with ``w^i = sum_j d_j q_ij``,
    ``q_ij = a_ij(x) + sin(pi t / T) b_ij(x)``; ``amplitude`` is the sup of the
    perturbation part of ``u`` (default ``1/(64T)``).
    """
    if T <= 0:
        raise ValueError("T must be positive")
    grid = metric.grid if metric is not None else PeriodicGrid.cube(d, n)
    metric = metric or flat_metric(grid)
    d = grid.d
    if amplitude is None:
        amplitude = 1.0 / (64.0 * T)
    if amplitude < 0:
        raise ValueError(f"amplitude = {amplitude} must be nonnegative")
    drift = 3.0 / (16.0 * T)
    rng = np.random.default_rng(seed)
    pairs = [(i, j) for i in range(d) for j in range(i + 1, d)]
    qa = {p: _random_potential(grid, rng, modes) for p in pairs}
    qb = {p: _random_potential(grid, rng, modes) for p in pairs}

    def w_of(q):
        w = np.zeros((d,) + grid.n)
        for (i, j), qij in q.items():
            w[i] += grid.differentiate(qij, j)
            w[j] -= grid.differentiate(qij, i)
        return w

    wa, wb = w_of(qa), w_of(qb)
    sg = metric.sqrt_det
    times = uniform_times(T, frames)
    # sup over t of |wa + s wb| with s in [0, 1] is attained at s = 0 or 1
    peak = max(np.abs(wa / sg).max(), np.abs((wa + wb) / sg).max()) if pairs else 0.0
    scale = amplitude / peak if peak > 0 else 0.0
    base = drift * float(sg.mean()) * np.ones((d,) + grid.n)

    def gen(t):
        return (base + scale * (wa + np.sin(np.pi * t / T) * wb)) / sg

    u = np.stack([gen(t) for t in times])
    flow = Flow(grid, times, u, metric, generator=gen, name="drift")
    report = check_in_U(flow)
    if not report.passed:
        raise ValueError(f"flow leaves U: {report.worst}")
    return flow


@dataclass
class UReport:
    lower: float
    upper: float
    component_min: np.ndarray
    component_max: np.ndarray
    margin: float
    passed: bool
    worst: str

    def summary(self) -> str:
        lines = [f"in U: {'yes' if self.passed else 'no'}",
                 f"bounds: ({self.lower:.6g}, {self.upper:.6g})"]
        for j, (lo, hi) in enumerate(zip(self.component_min, self.component_max)):
            lines.append(f"u^{j + 1}: min {lo:.6g} max {hi:.6g}")
        lines.append(f"margin: {self.margin:.6g}")
        if not self.passed:
            lines.append(f"violation: {self.worst}")
        return "\n".join(lines)


def check_in_U(flow: Flow) -> UReport:
    """Check ``1/(8T) < u^j < 1/(4T)`` at every node and frame."""
    lo, hi = 1.0 / (8.0 * flow.T), 1.0 / (4.0 * flow.T)
    u = flow.velocity
    axes = (0,) + tuple(range(2, u.ndim))
    cmin, cmax = u.min(axis=axes), u.max(axis=axes)
    gap_lo = u - lo
    gap_hi = hi - u
    margin = float(min(gap_lo.min(), gap_hi.min()))
    which = gap_lo if gap_lo.min() <= gap_hi.min() else gap_hi
    idx = np.unravel_index(int(np.argmin(which)), u.shape)
    bound = "lower" if which is gap_lo else "upper"
    worst = (f"{bound} bound at frame {idx[0]}, component {idx[1] + 1}, node {idx[2:]}, "
             f"value {u[idx]:.6g}")
    return UReport(lo, hi, cmin, cmax, margin, margin > 0, worst)


def save_flow(path, flow: Flow) -> None:
    write_binary(path, flow.velocity, flow.T)


def load_flow(path, metric: MetricField | None = None) -> Flow:
    frames, T = read_binary(path)
    grid = PeriodicGrid(frames.shape[2:])
    if frames.shape[1] != grid.d:
        raise ValueError(f"{path}: expected {grid.d} velocity components, got {frames.shape[1]}")
    if len(frames) < 2:
        raise ValueError(f"{path}: a flow needs at least two frames")
    times = uniform_times(T, len(frames))
    metric = metric or flat_metric(grid)
    steady = bool(np.all(frames == frames[:1]))
    gen = (lambda t, u=frames[0]: u) if steady else None
    return Flow(grid, times, frames, metric, generator=gen, name=str(path))


def save_metric(path, metric: MetricField) -> None:
    d = metric.d
    write_binary(path, metric.g.reshape((1, d * d) + metric.grid.n), 0.0)


def load_metric(path) -> MetricField:
    frames, _ = read_binary(path)
    grid = PeriodicGrid(frames.shape[2:])
    d = grid.d
    if frames.shape[:2] != (1, d * d):
        raise ValueError(f"{path}: metric file must hold one frame with {d * d} components")
    return build_metric(grid, frames[0].reshape((d, d) + grid.n))
