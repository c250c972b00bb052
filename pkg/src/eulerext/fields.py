"""Periodic grids on the unit torus and the spectral calculus built on them.

Samples live on the uniform grid ``x^i = j / n_i`` of ``(R/Z)^d``.  Arrays of
samples always carry the ``d`` spatial axes last, so any number of leading
axes (components, time frames) is allowed by every routine here.

Spectral coefficients are normalized so that ``f(x) = sum_k c_k exp(2 pi i k.x)``;
``sin(2 pi x)`` therefore has two modes of magnitude 1/2.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.fft as sfft

MAGIC = b"EEXT1"

# Coefficients below this fraction of the largest one are dropped before
# evaluation at scattered points.
PRUNE_RELATIVE = 1e-15


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class PeriodicGrid:
    """Uniform grid on the d-torus with per-axis node counts ``n``."""

    n: tuple[int, ...]

    def __post_init__(self):
        n = tuple(int(v) for v in np.atleast_1d(self.n))
        object.__setattr__(self, "n", n)
        if len(n) < 1:
            raise ValueError("grid dimension must be at least 1")
        for v in n:
            if v < 4 or v % 2:
                raise ValueError(f"node count {v} must be even and at least 4")
            if not _is_power_of_two(v):
                raise ValueError(f"node count {v} is not a power of two")

    @classmethod
    def cube(cls, d: int, n: int) -> "PeriodicGrid":
        return cls((n,) * d)

    @property
    def d(self) -> int:
        return len(self.n)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.n

    @property
    def size(self) -> int:
        return int(np.prod(self.n))

    @property
    def axes(self) -> tuple[int, ...]:
        return tuple(range(-self.d, 0))

    def coords(self, axis: int) -> np.ndarray:
        return np.arange(self.n[axis]) / self.n[axis]

    def mesh(self) -> np.ndarray:
        """Node coordinates, shape ``(d, *n)``."""
        return np.stack(np.meshgrid(*[self.coords(a) for a in range(self.d)], indexing="ij"))

    def points(self) -> np.ndarray:
        """Node coordinates as a ``(size, d)`` array in row-major node order."""
        return self.mesh().reshape(self.d, -1).T

    def wavenumbers(self, axis: int) -> np.ndarray:
        """Integer wavenumbers along ``axis`` in FFT order."""
        n = self.n[axis]
        return np.fft.fftfreq(n, 1.0 / n)

    def _broadcast_k(self, axis: int, k: np.ndarray) -> np.ndarray:
        shape = [1] * self.d
        shape[axis] = self.n[axis]
        return k.reshape(shape)

    def derivative_symbol(self, axis: int) -> np.ndarray:
        """``2 pi i k`` along ``axis`` with the Nyquist mode removed."""
        k = self.wavenumbers(axis).copy()
        k[self.n[axis] // 2] = 0.0
        return self._broadcast_k(axis, 2j * np.pi * k)

    def laplacian_symbol(self) -> np.ndarray:
        out = np.zeros(self.n)
        for a in range(self.d):
            out = out + (self.derivative_symbol(a) ** 2).real
        return out

    def dealias_mask(self) -> np.ndarray:
        """Boolean mask keeping modes with ``|k_a| < n_a / 3`` on every axis."""
        mask = np.ones(self.n, dtype=bool)
        for a in range(self.d):
            keep = np.abs(self.wavenumbers(a)) < self.n[a] / 3.0
            mask = mask & self._broadcast_k(a, keep)
        return mask

    # -- transforms -----------------------------------------------------
    def transform(self, samples: np.ndarray) -> np.ndarray:
        return sfft.fftn(samples, axes=self.axes) / self.size

    def inverse_transform(self, coeffs: np.ndarray) -> np.ndarray:
        return sfft.ifftn(coeffs * self.size, axes=self.axes).real

    # -- calculus -------------------------------------------------------
    def differentiate(self, samples: np.ndarray, axis: int, order: int = 1) -> np.ndarray:
        c = self.transform(samples)
        return self.inverse_transform(c * self.derivative_symbol(axis) ** order)

    def gradient(self, samples: np.ndarray) -> np.ndarray:
        """Partial derivatives stacked on a new axis placed before the spatial axes."""
        c = self.transform(samples)
        parts = [self.inverse_transform(c * self.derivative_symbol(a)) for a in range(self.d)]
        return np.stack(parts, axis=-self.d - 1)

    def divergence(self, vector: np.ndarray) -> np.ndarray:
        """Flat divergence of a ``(..., d, *n)`` array."""
        c = self.transform(vector)
        tot = 0.0
        for a in range(self.d):
            tot = tot + c[(..., a) + (slice(None),) * self.d] * self.derivative_symbol(a)
        return self.inverse_transform(tot)

    def integrate(self, samples: np.ndarray) -> np.ndarray:
        """Integral over the unit torus (the grid mean)."""
        return samples.mean(axis=self.axes)

    def trig_interpolate(self, samples: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Evaluate the trigonometric interpolant at ``points`` of shape ``(P, d)``.

        Leading axes of ``samples`` are kept: the result has shape ``(*lead, P)``.
        """
        return TrigInterpolant(self, samples)(points)


def _axis_box(coeffs: np.ndarray, d: int) -> list[int]:
    """Smallest per-axis bandwidth holding all coefficients above the prune level."""
    mag = np.abs(coeffs)
    lead = tuple(range(mag.ndim - d))
    if lead:
        mag = mag.max(axis=lead)
    top = mag.max()
    keep = mag > PRUNE_RELATIVE * top if top > 0 else np.zeros(mag.shape, bool)
    box = []
    for a in range(d):
        other = tuple(b for b in range(d) if b != a)
        along = keep.any(axis=other) if other else keep
        n = mag.shape[a]
        k = np.abs(np.fft.fftfreq(n, 1.0 / n)).astype(int)
        k[n // 2] = n // 2
        box.append(int(k[along].max()) if along.any() else 0)
    return box


def box_coefficients(coeffs: np.ndarray, d: int, box: Sequence[int]) -> np.ndarray:
    """Gather FFT-ordered coefficients into a centred box ``[-K_a, K_a]`` per axis.

    A Nyquist mode inside the box is split evenly between ``+n/2`` and ``-n/2``,
    which is the real (cosine) reading of that mode.
    """
    out = coeffs
    for a, K in enumerate(box):
        ax = out.ndim - d + a
        n = coeffs.shape[coeffs.ndim - d + a]
        ks = np.arange(-K, K + 1)
        out = np.take(out, ks % n, axis=ax)
        if K == n // 2:
            w = np.ones(2 * K + 1)
            w[0] = w[-1] = 0.5
            shape = [1] * out.ndim
            shape[ax] = 2 * K + 1
            out = out * w.reshape(shape)
    return out


def axis_exponentials(x: np.ndarray, K: int) -> np.ndarray:
    """``exp(2 pi i k x)`` for ``k = -K..K``; shape ``(P, 2K+1)``."""
    x = np.asarray(x, dtype=float)
    E = np.empty((x.size, 2 * K + 1), dtype=complex)
    E[:, K] = 1.0
    if K:
        e1 = np.exp(2j * np.pi * x)
        E[:, K + 1] = e1
        for j in range(2, K + 1):
            E[:, K + j] = E[:, K + j - 1] * e1
        E[:, :K] = np.conj(E[:, : K: -1])
    return E


def eval_box(C: np.ndarray, exps: Sequence[np.ndarray], chunk: int = 1 << 22) -> np.ndarray:
    """Evaluate box coefficients ``C`` of shape ``(c, B_1, ..., B_d)`` at points.

    ``exps[a]`` holds the axis exponentials of the points, shape ``(P, B_a)``.
    Returns the complex values with shape ``(c, P)``.
    """
    d = len(exps)
    P = exps[0].shape[0]
    c = C.shape[0]
    Bd = C.shape[-1]
    M = np.moveaxis(C, -1, 0).reshape(Bd, -1)
    per_point = max(1, M.shape[1])
    step = max(1, chunk // per_point)
    out = np.empty((c, P), dtype=complex)
    for lo in range(0, P, step):
        hi = min(P, lo + step)
        V = (exps[-1][lo:hi] @ M).reshape((hi - lo, c) + C.shape[1:-1])
        for a in range(d - 2, -1, -1):
            e = exps[a][lo:hi].reshape((hi - lo, 1) + (1,) * a + (-1, 1))
            V = np.matmul(V[..., None, :], e)[..., 0, 0]
        out[:, lo:hi] = V.T
    return out


class TrigInterpolant:
    """Trigonometric interpolant of sampled periodic data.

    Only the bandwidth box actually occupied by the data is contracted, so
    low-mode fields are cheap to evaluate at many scattered points.
    """

    def __init__(self, grid: PeriodicGrid, samples: np.ndarray):
        self.grid = grid
        samples = np.asarray(samples, dtype=float)
        self.lead = samples.shape[: samples.ndim - grid.d]
        coeffs = grid.transform(samples).reshape((-1,) + grid.n)
        self.box = _axis_box(coeffs, grid.d)
        self.C = box_coefficients(coeffs, grid.d, self.box)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != self.grid.d:
            raise ValueError("points must have shape (P, d)")
        exps = [axis_exponentials(pts[:, a], K) for a, K in enumerate(self.box)]
        vals = eval_box(self.C, exps).real
        return vals.reshape(self.lead + (pts.shape[0],))


def multi_indices(d: int, k: int) -> list[tuple[int, ...]]:
    """All multi-indices of total order at most ``k`` in ``d`` variables."""
    return [a for a in itertools.product(range(k + 1), repeat=d) if sum(a) <= k]


def seminorm(grid: PeriodicGrid, samples: np.ndarray, k: int) -> float:
    """Max over multi-indices of order ``<= k`` of the sup of the spectral derivative."""
    c = grid.transform(np.asarray(samples, dtype=float))
    best = 0.0
    for alpha in multi_indices(grid.d, k):
        sym = 1.0
        for a, p in enumerate(alpha):
            if p:
                sym = sym * grid.derivative_symbol(a) ** p
        best = max(best, float(np.abs(grid.inverse_transform(c * sym)).max()))
    return best


def fd_weights(x0: float, xs: Sequence[float], order: int) -> np.ndarray:
    """Finite-difference weights for the ``order``-th derivative at ``x0`` (Fornberg)."""
    xs = np.asarray(xs, dtype=float)
    n = len(xs)
    c = np.zeros((n, order + 1))
    c1, c4 = 1.0, xs[0] - x0
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, order)
        c2, c5, c4 = 1.0, c4, xs[i] - x0
        for j in range(i):
            c3 = xs[i] - xs[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, order]


def time_derivative(frames: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Fourth-order finite-difference derivative along axis 0 (five-point stencils)."""
    times = np.asarray(times, dtype=float)
    m = len(times)
    if m < 5:
        raise ValueError(f"order-4 time differences need at least 5 frames, got {m}")
    out = np.empty_like(frames, dtype=float)
    for j in range(m):
        lo = min(max(j - 2, 0), m - 5)
        idx = range(lo, lo + 5)
        w = fd_weights(times[j], times[lo: lo + 5], 1)
        # weights sum to zero, so differencing against one frame keeps constants exact
        out[j] = sum(wk * (frames[i] - frames[lo]) for wk, i in zip(w[1:], idx[1:]))
    return out


@dataclass(frozen=True)
class ScalarField:
    """Samples of a real periodic function together with its grid."""

    grid: PeriodicGrid
    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.shape != self.grid.n:
            raise ValueError(f"samples of shape {s.shape} do not match grid {self.grid.n}")
        object.__setattr__(self, "samples", s)

    @classmethod
    def from_function(cls, grid: PeriodicGrid, fn) -> "ScalarField":
        return cls(grid, np.broadcast_to(fn(*grid.mesh()), grid.n).astype(float))

    @classmethod
    def from_coefficients(cls, grid: PeriodicGrid, coeffs: np.ndarray) -> "ScalarField":
        return cls(grid, grid.inverse_transform(coeffs))

    @property
    def coefficients(self) -> np.ndarray:
        return self.grid.transform(self.samples)

    def differentiate(self, axis: int, order: int = 1) -> "ScalarField":
        return ScalarField(self.grid, self.grid.differentiate(self.samples, axis, order))

    def interpolate(self, points: np.ndarray) -> np.ndarray:
        return self.grid.trig_interpolate(self.samples, points)

    def seminorm(self, k: int) -> float:
        return seminorm(self.grid, self.samples, k)


@dataclass(frozen=True)
class TimeDependentField:
    """Frames of a (possibly multi-component) field on a uniform time partition.

    ``frames`` has shape ``(m, c, *n)``.
    """

    grid: PeriodicGrid
    times: np.ndarray
    frames: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        f = np.asarray(self.frames, dtype=float)
        if f.ndim == self.grid.d + 1:
            f = f[:, None]
        if f.shape[0] != len(t) or f.shape[2:] != self.grid.n:
            raise ValueError("frames do not match times and grid")
        if len(t) > 1 and (t[0] != 0.0 or np.any(np.diff(t) <= 0)):
            raise ValueError("times must start at 0 and increase strictly")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "frames", f)

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def components(self) -> int:
        return self.frames.shape[1]

    def time_derivative(self) -> np.ndarray:
        return time_derivative(self.frames, self.times)

    def time_seminorm(self, k: int) -> float:
        """Max over time-derivative orders ``<= k`` of the sup norm (order-4 differences)."""
        f = self.frames
        best = float(np.abs(f).max())
        for _ in range(k):
            f = time_derivative(f, self.times)
            best = max(best, float(np.abs(f).max()))
        return best


def uniform_times(T: float, frames: int) -> np.ndarray:
    return np.linspace(0.0, float(T), int(frames))


# -- binary format ------------------------------------------------------

def write_binary(path, frames: np.ndarray, T: float, d: int | None = None) -> None:
    """Write ``frames`` of shape ``(m, c, *n)`` in the shared binary format."""
    frames = np.ascontiguousarray(frames, dtype="<f8")
    if d is None:
        d = frames.ndim - 2
    m, c = frames.shape[:2]
    n = frames.shape[2:]
    if len(n) != d:
        raise ValueError("frame shape does not match dimension")
    head = MAGIC + struct.pack("<I", d) + struct.pack(f"<{d}I", *n)
    head += struct.pack("<IId", c, m, float(T))
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(frames.tobytes())


def read_binary(path) -> tuple[np.ndarray, float]:
    """Read a file in the shared binary format; returns ``(frames, T)``."""
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise ValueError(f"{path}: bad magic bytes")
    pos = 5
    (d,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    n = struct.unpack_from(f"<{d}I", raw, pos)
    pos += 4 * d
    c, m, T = struct.unpack_from("<IId", raw, pos)
    pos += 16
    count = m * c * int(np.prod(n))
    if len(raw) - pos != 8 * count:
        raise ValueError(f"{path}: truncated or oversized body")
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=pos)
    return data.reshape((m, c) + tuple(n)).astype(float), float(T)


def write_csv(path, grid: PeriodicGrid, times: np.ndarray, frames: np.ndarray) -> None:
    """One row per (time, node): ``t, x^1..x^d, values``."""
    frames = np.asarray(frames, dtype=float)
    m, c = frames.shape[:2]
    pts = grid.points()
    cols = ["t"] + [f"x{a + 1}" for a in range(grid.d)] + [f"v{j}" for j in range(c)]
    rows = []
    for j in range(m):
        vals = frames[j].reshape(c, -1).T
        rows.append(np.column_stack([np.full(len(pts), times[j]), pts, vals]))
    np.savetxt(path, np.vstack(rows), delimiter=",", header=",".join(cols), comments="")
