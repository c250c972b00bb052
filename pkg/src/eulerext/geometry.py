"""Riemannian structure on the torus chart.

Tensor components are stored with index axes first and the spatial grid
axes last: a metric is ``(d, d, *n)``, Christoffel symbols ``(d, d, d, *n)``
indexed as ``[k, i, j]`` for ``Gamma^k_ij``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .fields import PeriodicGrid


@dataclass(frozen=True)
class MetricField:
    grid: PeriodicGrid
    g: np.ndarray
    g_inv: np.ndarray
    sqrt_det: np.ndarray
    christoffel: np.ndarray
    is_flat: bool = False

    @property
    def d(self) -> int:
        return self.grid.d

    def volume(self) -> float:
        return float(self.grid.integrate(self.sqrt_det))


def _node_matrices(a: np.ndarray, d: int) -> np.ndarray:
    """``(d, d, *n)`` -> ``(size, d, d)``."""
    return np.moveaxis(a.reshape(d, d, -1), -1, 0)


def _from_node_matrices(m: np.ndarray, grid: PeriodicGrid) -> np.ndarray:
    return np.moveaxis(m, 0, -1).reshape((grid.d, grid.d) + grid.n)


def flat_metric(grid: PeriodicGrid) -> MetricField:
    d = grid.d
    eye = np.broadcast_to(np.eye(d).reshape((d, d) + (1,) * d), (d, d) + grid.n).copy()
    return MetricField(grid, eye, eye.copy(), np.ones(grid.n), np.zeros((d, d, d) + grid.n), True)


def build_metric(grid: PeriodicGrid, g) -> MetricField:
    """Build a metric from samples ``(d, d, *n)`` or from a callable of the coordinates.

    Raises ``ValueError`` naming the first node that is not positive definite.
    """
    d = grid.d
    if callable(g):
        g = g(*grid.mesh())
    g = np.array(np.broadcast_to(np.asarray(g, dtype=float), (d, d) + grid.n))
    if not np.allclose(g, np.swapaxes(g, 0, 1), atol=1e-14, rtol=0):
        raise ValueError("metric samples are not symmetric")
    g = 0.5 * (g + np.swapaxes(g, 0, 1))
    mats = _node_matrices(g, d)
    # Gershgorin bound as a quick pass; eigenvalues decide.
    diag = np.einsum("pii->pi", mats)
    off = np.abs(mats).sum(axis=2) - np.abs(diag)
    if not np.all(diag - off > 0):
        eig = np.linalg.eigvalsh(mats)[:, 0]
        bad = np.flatnonzero(eig <= 0)
        if bad.size:
            idx = np.unravel_index(bad[0], grid.n)
            x = tuple(float(i) / n for i, n in zip(idx, grid.n))
            raise ValueError(f"metric not positive definite at node {idx} (x = {x}), "
                             f"smallest eigenvalue {eig[bad[0]]:.3e}")
    if np.array_equal(g, flat_metric(grid).g):
        return flat_metric(grid)
    g_inv = _from_node_matrices(np.linalg.inv(mats), grid)
    sqrt_det = np.sqrt(np.linalg.det(mats)).reshape(grid.n)
    dg = np.moveaxis(grid.gradient(g), -grid.d - 1, 0)  # dg[l, i, j] = d_l g_ij
    # Gamma^k_ij = 1/2 g^{kl} (d_i g_jl + d_j g_il - d_l g_ij)
    low = 0.5 * (np.einsum("ijl...->lij...", dg) + np.einsum("jil...->lij...", dg) - dg)
    gamma = np.einsum("kl...,lij...->kij...", g_inv, low)
    return MetricField(grid, g, g_inv, sqrt_det, gamma, False)


def lower(metric: MetricField, u: np.ndarray) -> np.ndarray:
    """``u_k = g_jk u^j``; leading axes before the component axis are kept."""
    if metric.is_flat:
        return np.array(u, dtype=float)
    return _contract(metric.g, u, metric.grid.d)


def raise_index(metric: MetricField, w: np.ndarray) -> np.ndarray:
    if metric.is_flat:
        return np.array(w, dtype=float)
    return _contract(metric.g_inv, w, metric.grid.d)


def _contract(mat: np.ndarray, v: np.ndarray, d: int) -> np.ndarray:
    """``out[..., k, x] = sum_j mat[j, k, x] v[..., j, x]``."""
    v = np.asarray(v, dtype=float)
    comp_axis = v.ndim - d - 1
    vv = np.moveaxis(v, comp_axis, 0)  # [j, ..., x]
    lead = vv.ndim - 1 - d
    m = mat.reshape(mat.shape[:2] + (1,) * lead + mat.shape[2:])
    out = (m * vv[:, None]).sum(axis=0)  # [k, ..., x]
    return np.moveaxis(out, 0, comp_axis)


def covariant_derivative_oneform(metric: MetricField, w: np.ndarray) -> np.ndarray:
    """``(nabla w)[j, k] = d_j w_k - Gamma^i_jk w_i`` for a one-form ``(d, *n)``."""
    grid = metric.grid
    dw = np.moveaxis(grid.gradient(w), -grid.d - 1, 0)  # [j, k]
    if metric.is_flat:
        return dw
    return dw - np.einsum("ijk...,i...->jk...", metric.christoffel, w)


def covariant_derivative_02(metric: MetricField, T: np.ndarray) -> np.ndarray:
    """``(nabla T)[k, i, j] = d_k T_ij - Gamma^l_ki T_lj - Gamma^l_kj T_il``."""
    grid = metric.grid
    dT = np.moveaxis(grid.gradient(T), -grid.d - 1, 0)
    G = metric.christoffel
    return dT - np.einsum("lki...,lj...->kij...", G, T) - np.einsum("lkj...,il...->kij...", G, T)


def divergence(metric: MetricField, u: np.ndarray) -> np.ndarray:
    """``(1/sqrt g) d_i (sqrt g u^i)``; leading axes before the component axis allowed."""
    grid = metric.grid
    if metric.is_flat:
        return grid.divergence(u)
    return grid.divergence(u * metric.sqrt_det) / metric.sqrt_det


def gradient_oneform(metric: MetricField, p: np.ndarray) -> np.ndarray:
    """The differential ``dp`` as a one-form."""
    return metric.grid.gradient(p)


def vorticity_two_form(grid: PeriodicGrid, w: np.ndarray) -> np.ndarray:
    """``omega[j, i] = d_j w_i - d_i w_j``."""
    dw = np.moveaxis(grid.gradient(w), -grid.d - 1, 0)  # [j, i]
    return dw - np.swapaxes(dw, 0, 1)


@dataclass
class ProjectionInfo:
    iterations: int
    residual: float


def leray_project(metric: MetricField, L: np.ndarray, tol: float = 1e-10,
                  max_iter: int = 500, info: list | None = None):
    """Split a one-form ``L`` into ``dp`` plus a divergence-free remainder.

    Returns ``(L - dp, p)`` with ``p`` of mean zero.  Leading axes before the
    component axis (e.g. time frames) are handled frame by frame.
    """
    grid = metric.grid
    L = np.asarray(L, dtype=float)
    if L.ndim > grid.d + 1:
        lead = L.shape[: L.ndim - grid.d - 1]
        flat = L.reshape((-1, grid.d) + grid.n)
        if metric.is_flat:
            res, p = _leray_flat(grid, flat)
        else:
            pairs = [leray_project(metric, f, tol, max_iter, info) for f in flat]
            res = np.stack([r for r, _ in pairs])
            p = np.stack([q for _, q in pairs])
        return res.reshape(L.shape), p.reshape(lead + grid.n)
    if metric.is_flat:
        return _leray_flat(grid, L)
    p, it, rel = _pcg_pressure(metric, L, tol, max_iter)
    if info is not None:
        info.append(ProjectionInfo(it, rel))
    return L - grid.gradient(p), p


def _leray_flat(grid: PeriodicGrid, L: np.ndarray):
    c = grid.transform(L)
    lap = grid.laplacian_symbol()
    div = 0.0
    for a in range(grid.d):
        div = div + c[(..., a) + (slice(None),) * grid.d] * grid.derivative_symbol(a)
    inv = np.zeros_like(lap)
    nz = lap != 0
    inv[nz] = 1.0 / lap[nz]
    ph = div * inv
    p = grid.inverse_transform(ph)
    grad = np.stack([grid.inverse_transform(ph * grid.derivative_symbol(a)) for a in range(grid.d)],
                    axis=-grid.d - 1)
    return L - grad, p


def _pcg_pressure(metric: MetricField, L: np.ndarray, tol: float, max_iter: int):
    """Solve ``-d_i(a^ij d_j p) = -d_i(a^ij L_j)``, ``a = sqrt(g) g^-1``, by PCG."""
    grid = metric.grid
    a = metric.sqrt_det * metric.g_inv
    abar = float(np.mean(np.einsum("ii...->...", a))) / grid.d
    lap = grid.laplacian_symbol()
    inv = np.zeros_like(lap)
    nz = lap != 0
    inv[nz] = -1.0 / (abar * lap[nz])

    def op(p):
        return -grid.divergence(_contract(a, grid.gradient(p), grid.d))

    def prec(r):
        return grid.inverse_transform(grid.transform(r) * inv)

    b = -grid.divergence(_contract(a, L, grid.d))
    b = (b - b.mean()).reshape(-1)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros(grid.n), 0, 0.0
    size = b.size
    A = LinearOperator((size, size), matvec=lambda v: op(v.reshape(grid.n)).reshape(-1), dtype=float)
    M = LinearOperator((size, size), matvec=lambda v: prec(v.reshape(grid.n)).reshape(-1), dtype=float)
    count = [0]

    def tick(_):
        count[0] += 1

    p, status = cg(A, b, rtol=tol, atol=0.0, maxiter=max_iter, M=M, callback=tick)
    rel = float(np.linalg.norm(b - A.matvec(p)) / bnorm)
    if status != 0:
        raise RuntimeError(f"pressure solve did not converge in {max_iter} iterations "
                           f"(relative residual {rel:.3e})")
    p = p.reshape(grid.n)
    return p - p.mean(), count[0], rel
