"""Trajectory and label maps by characteristic integration.

Both maps are stored in unwrapped coordinates on the universal cover; only
the periodic displacement is ever interpolated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import PeriodicGrid, TrigInterpolant
from .flowgen import Flow


@dataclass(frozen=True)
class _CoordinateMap:
    grid: PeriodicGrid
    times: np.ndarray
    values: np.ndarray  # (m, d, *n), unwrapped

    @property
    def displacement(self) -> np.ndarray:
        """Periodic part ``values - x`` on the grid, shape ``(m, d, *n)``."""
        return self.values - self.grid.mesh()[None]

    def max_displacement(self) -> float:
        return float(np.abs(self.displacement).max())

    def evaluate(self, frame: int, points: np.ndarray) -> np.ndarray:
        """The map at ``points`` (unwrapped, shape ``(P, d)``) for a given frame."""
        pts = np.asarray(points, dtype=float)
        disp = TrigInterpolant(self.grid, self.displacement[frame])(np.mod(pts, 1.0))
        return pts + disp.T

    def jacobian(self) -> np.ndarray:
        """``d values^i / d x^j`` per frame, shape ``(m, d, d, *n)``."""
        g = self.grid
        D = g.gradient(self.displacement)  # (m, d_i, d_j, *n)
        return D + np.eye(g.d).reshape((1, g.d, g.d) + (1,) * g.d)


class TrajectoryMap(_CoordinateMap):
    """``X(t, a)`` sampled on label nodes ``a``."""

    @property
    def X(self) -> np.ndarray:
        return self.values


class LabelMap(_CoordinateMap):
    """``A(t, x)`` sampled on Eulerian nodes ``x``."""

    @property
    def A(self) -> np.ndarray:
        return self.values

    def time_derivative(self) -> np.ndarray:
        from .fields import time_derivative
        return time_derivative(self.values, self.times)


class _VelocityAt:
    """Evaluates ``u(t, x)`` at scattered points, reusing the interpolant per time."""

    def __init__(self, flow: Flow):
        self.flow = flow
        self._t = None
        self._interp = None

    def __call__(self, t: float, pts: np.ndarray) -> np.ndarray:
        if self._t != t:
            self._interp = TrigInterpolant(self.flow.grid, self.flow.at(t))
            self._t = t
        return self._interp(np.mod(pts, 1.0)).T


def _steps_per_interval(times: np.ndarray, substeps: int) -> int:
    dt_frame = float(times[1] - times[0])
    return max(1, int(np.ceil(dt_frame * substeps - 1e-9)))


def _rk4(vel, t, h, P):
    k1 = vel(t, P)
    k2 = vel(t + 0.5 * h, P + 0.5 * h * k1)
    k3 = vel(t + 0.5 * h, P + 0.5 * h * k2)
    k4 = vel(t + h, P + h * k3)
    return P + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _check(P, frame):
    if not np.all(np.isfinite(P)):
        raise FloatingPointError(f"characteristic integration produced non-finite values at frame {frame}")


def trajectory_map(flow: Flow, substeps: int = 256) -> TrajectoryMap:
    """Integrate ``dX/dt = u(t, X)`` with classical RK4 from every label node."""
    grid, times = flow.grid, flow.times
    nsub = _steps_per_interval(times, substeps)
    vel = _VelocityAt(flow)
    P = grid.points()
    out = [P.copy()]
    for j in range(len(times) - 1):
        h = (times[j + 1] - times[j]) / nsub
        for s in range(nsub):
            P = _rk4(vel, times[j] + s * h, h, P)
        _check(P, j + 1)
        out.append(P.copy())
    X = np.stack([p.T.reshape((grid.d,) + grid.n) for p in out])
    return TrajectoryMap(grid, times, X)


def label_map(flow: Flow, substeps: int = 256) -> LabelMap:
    """Feet at time 0 of the characteristics through every ``(t_j, x)``.

    One backward sweep: seeds for frame ``j`` join the integration when the
    sweep reaches ``t_j``.
    """
    grid, times = flow.grid, flow.times
    m = len(times)
    nsub = _steps_per_interval(times, substeps)
    vel = _VelocityAt(flow)
    x = grid.points()
    N = len(x)
    P = x.copy()  # seeds of the last frame
    for j in range(m - 1, 0, -1):
        h = -(times[j] - times[j - 1]) / nsub
        for s in range(nsub):
            P = _rk4(vel, times[j] + s * h, h, P)
        _check(P, j)
        P = np.vstack([x, P])  # seeds for frame j-1 prepended
    # P now holds frames 0..m-1 in order
    A = P.reshape(m, N, grid.d).transpose(0, 2, 1).reshape((m, grid.d) + grid.n)
    return LabelMap(grid, times, A)


def roundtrip_check(X: TrajectoryMap, A: LabelMap) -> float:
    """``max |A(t, X(t, a)) - a|`` over frames and label nodes."""
    grid = X.grid
    a = grid.points()
    err = 0.0
    for j in range(len(X.times)):
        pts = X.values[j].reshape(grid.d, -1).T
        back = A.evaluate(j, pts)
        err = max(err, float(np.abs(back - a).max()))
    return err


def volume_defect(X: TrajectoryMap, metric) -> float:
    """``max |det(dX/da) sqrt g(X) / sqrt g(a) - 1|`` over frames and nodes."""
    grid = X.grid
    J = X.jacobian()
    det = np.linalg.det(np.moveaxis(J.reshape(J.shape[:3] + (-1,)), -1, 1))  # (m, P)
    sg = metric.sqrt_det.reshape(-1)
    worst = 0.0
    interp = TrigInterpolant(grid, metric.sqrt_det) if not metric.is_flat else None
    for j in range(len(X.times)):
        if interp is None:
            ratio = det[j]
        else:
            pts = np.mod(X.values[j].reshape(grid.d, -1).T, 1.0)
            ratio = det[j] * interp(pts) / sg
        worst = max(worst, float(np.abs(ratio - 1).max()))
    return worst
