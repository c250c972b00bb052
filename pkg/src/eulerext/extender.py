"""Warped-product extension data built from a separable forcing.

Each separable term ``f(a) h(y)`` is split by an 8-piece periodic partition
in ``a^i``; every piece becomes one vertical slot with swirl field
``rho = f(A) chi_r(A^i)`` and warping profile ``g^ss = H(x^i)``, ``H' = h``.
A final closure slot restores the unit volume product.

All slot fields are kept in closed form (trigonometric coefficients,
partition index, bump weights, constant shifts) and evaluated on demand, so
derivatives are exact chain-rule expressions rather than spectral
derivatives of under-resolved products.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .fields import PeriodicGrid, axis_exponentials, eval_box, read_binary, write_binary
from .flowgen import Flow
from .forcing import SeparableForcing, fit_separable, image_samples, material_force
from .geometry import leray_project
from .lagrange import LabelMap, label_map

PIECES = 8
TRANSITION = 1.0 / 32.0
_GL_X, _GL_W = np.polynomial.legendre.leggauss(96)


# -- one-dimensional smooth building blocks -------------------------------

def _e(x):
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = np.exp(-1.0 / x[pos])
    return out


def _de(x):
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = np.exp(-1.0 / x[pos]) / x[pos] ** 2
    return out


def smooth_step(x: np.ndarray) -> np.ndarray:
    """C-infinity step: 0 for ``x <= 0``, 1 for ``x >= 1``."""
    x = np.asarray(x, dtype=float)
    a, b = _e(x), _e(1.0 - x)
    return a / (a + b)


def smooth_step_derivative(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    a, b = _e(x), _e(1.0 - x)
    da, db = _de(x), _de(1.0 - x)
    return (da * b + a * db) / (a + b) ** 2


def _wrap(x):
    """Representative of ``x`` mod 1 in ``[-1/2, 1/2)``."""
    return np.mod(np.asarray(x, dtype=float) + 0.5, 1.0) - 0.5


def piece_centre(r: int) -> float:
    return r / PIECES


def piece_interval(r: int) -> tuple[float, float]:
    """Support interval ``I_r`` of length 1/4 (endpoints on the universal cover)."""
    c = piece_centre(r)
    return c - 0.125, c + 0.125


def partition(r: int, theta: np.ndarray) -> np.ndarray:
    """``chi_r(theta)``; the 8 pieces sum to one and ``chi_r`` vanishes off ``I_r``."""
    s = _wrap(np.asarray(theta) - piece_centre(r))
    half = 0.5 / PIECES
    return (smooth_step((s + half) / TRANSITION + 0.5)
            - smooth_step((s - half) / TRANSITION + 0.5))


def partition_derivative(r: int, theta: np.ndarray) -> np.ndarray:
    s = _wrap(np.asarray(theta) - piece_centre(r))
    half = 0.5 / PIECES
    return (smooth_step_derivative((s + half) / TRANSITION + 0.5)
            - smooth_step_derivative((s - half) / TRANSITION + 0.5)) / TRANSITION


def _bump_raw(tau):
    out = np.zeros_like(tau)
    inside = np.abs(tau) < 1
    out[inside] = np.exp(-1.0 / (1.0 - tau[inside] ** 2))
    return out


def _bump_cumulative_raw(tau):
    tau = np.clip(np.asarray(tau, dtype=float), -1.0, 1.0)[..., None]
    s = -1.0 + (tau + 1.0) * (_GL_X + 1.0) / 2.0
    return (_bump_raw(s) * _GL_W).sum(-1) * (tau[..., 0] + 1.0) / 2.0


_BUMP_MASS = float(_bump_cumulative_raw(np.array(1.0)))
BUMP_WIDTH = 0.25


def bump(start: float, y: np.ndarray) -> np.ndarray:
    """Unit-mass bump supported on ``[start, start + 1/4]`` (mod 1)."""
    z = np.mod(np.asarray(y, dtype=float) - start, 1.0)
    tau = 2.0 * z / BUMP_WIDTH - 1.0
    return _bump_raw(tau) * (2.0 / BUMP_WIDTH) / _BUMP_MASS


def bump_cumulative(start: float, y: np.ndarray) -> np.ndarray:
    """``int_start^y bump`` over one period; 1 past the support."""
    z = np.mod(np.asarray(y, dtype=float) - start, 1.0)
    tau = 2.0 * z / BUMP_WIDTH - 1.0
    return _bump_cumulative_raw(tau) / _BUMP_MASS


# -- profiles ------------------------------------------------------------

def _trig(coeffs, y, deriv=0):
    K = (len(coeffs) - 1) // 2
    k = np.arange(-K, K + 1)
    c = coeffs * (2j * np.pi * k) ** deriv
    E = axis_exponentials(np.asarray(y, dtype=float).reshape(-1), K)
    return (E @ c).real.reshape(np.shape(y))


@dataclass(frozen=True)
class Profile1D:
    """Periodic function ``trig(coeffs) + w * B`` on R/Z.

    ``B`` is the unit bump starting at ``start`` when ``integrated`` is false,
    and its periodic mean-zero antiderivative form ``U - z - 3/8`` when true
    (``U`` the cumulative bump, ``z`` the offset from ``start``).
    """

    coeffs: np.ndarray  # complex, centred, length 2K+1
    weight: float = 0.0
    start: float = 0.0
    integrated: bool = False

    @property
    def K(self) -> int:
        return (len(self.coeffs) - 1) // 2

    def __call__(self, y) -> np.ndarray:
        out = _trig(self.coeffs, y)
        if self.weight:
            if self.integrated:
                z = np.mod(np.asarray(y, dtype=float) - self.start, 1.0)
                out = out + self.weight * (bump_cumulative(self.start, y) - z - 0.375)
            else:
                out = out + self.weight * bump(self.start, y)
        return out

    def derivative(self, y) -> np.ndarray:
        out = _trig(self.coeffs, y, 1)
        if self.weight:
            if self.integrated:
                out = out + self.weight * (bump(self.start, y) - 1.0)
            else:
                raise NotImplementedError("derivative of a bump-corrected integrand")
        return out

    def mean(self) -> float:
        m = float(self.coeffs[self.K].real)
        return m + (self.weight if not self.integrated else 0.0)

    def samples(self, M: int = 1024) -> np.ndarray:
        return self(np.arange(M) / M)


def trig_profile(coeffs) -> Profile1D:
    return Profile1D(np.asarray(coeffs, dtype=complex))


# -- localized terms -------------------------------------------------------

@dataclass(frozen=True)
class LocalizedTerm:
    """``f(a) = base(a) chi_piece(a^i)`` paired with ``h`` and its antiderivative ``H``."""

    i: int
    piece: int
    base: np.ndarray  # complex coefficient box (2K+1,)*d
    h: Profile1D
    H: Profile1D | None = None
    source: int = 0  # index of the separable term it came from

    @property
    def interval(self) -> tuple[float, float]:
        return piece_interval(self.piece)

    def f_values(self, a: np.ndarray) -> np.ndarray:
        a = np.atleast_2d(a)
        return _eval_boxes(self.base[None], a)[0] * partition(self.piece, a[:, self.i])


def _eval_boxes(boxes: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Real parts of several coefficient boxes ``(c, B..)`` at points ``(P, d)``."""
    K = (boxes.shape[1] - 1) // 2
    exps = [axis_exponentials(np.mod(a[:, ax], 1.0), K) for ax in range(a.shape[1])]
    return eval_box(boxes, exps).real


def partition_localize(sep: SeparableForcing) -> list[LocalizedTerm]:
    """Multiply every term by the 8 partition pieces in its own direction."""
    out = []
    for i in range(sep.d):
        for s, t in enumerate(sep.terms.get(i, [])):
            h = trig_profile(t.h)
            for r in range(PIECES):
                out.append(LocalizedTerm(i, r, t.f, h, None, s))
    return out


def mean_zero_adjust(term: LocalizedTerm) -> LocalizedTerm:
    """Remove the mean of ``h`` with a bump placed opposite the piece.

    The bump lives on ``[c + 3/8, c + 5/8]``, outside the 1/4-neighbourhood
    of ``I_r`` that trajectories from the support of ``f`` can reach.
    """
    h = term.h
    if h.integrated or h.weight:
        raise ValueError("term has already been adjusted")
    m = h.mean()
    if m == 0.0:
        return term
    start = piece_centre(term.piece) + 0.375
    return replace(term, h=Profile1D(h.coeffs.copy(), -m, start))


def antiderivative(term: LocalizedTerm, tol: float = 1e-14) -> LocalizedTerm:
    """``H`` with ``H' = h`` and zero mean; ``h`` must have mean zero."""
    h = term.h
    m = h.mean()
    if abs(m) > tol:
        raise ValueError(f"h has mean {m:.3e}; apply mean_zero_adjust first")
    K = h.K
    k = np.arange(-K, K + 1)
    c = np.zeros_like(h.coeffs)
    nz = k != 0
    c[nz] = h.coeffs[nz] / (2j * np.pi * k[nz])
    return replace(term, H=Profile1D(c, h.weight, h.start, True))


# -- extension data --------------------------------------------------------

@dataclass(frozen=True)
class Slot:
    """One vertical dimension: ``rho = f(A) chi(A^i) + rho_shift``,
    ``g^ss = g_scale H(x^i) + g_shift``; ``term < 0`` marks the closure slot."""

    i: int
    term: int
    piece: int
    rho_shift: float = 0.0
    g_scale: float = 1.0
    g_shift: float = 0.0

    @property
    def closure(self) -> bool:
        return self.term < 0


@dataclass
class ExtensionData:
    grid: PeriodicGrid
    times: np.ndarray
    displacement: np.ndarray  # label map minus identity, (m, d, *n)
    bases: list[np.ndarray]   # coefficient boxes of the separable terms
    profiles: list[Profile1D]  # H per separable term
    term_dirs: list[int]
    slots: list[Slot]
    pressure: np.ndarray  # p''' frames (m, *n)
    closure: np.ndarray | None = None  # g^{m+1,m+1} at the nodes
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    # -- structure
    @property
    def d(self) -> int:
        return self.grid.d

    @property
    def m(self) -> int:
        return len(self.slots)

    @property
    def labels(self) -> np.ndarray:
        return self.displacement + self.grid.mesh()[None]

    def forcing_slots(self) -> list[int]:
        return [s for s, sl in enumerate(self.slots) if not sl.closure]

    def describe(self, s: int) -> str:
        sl = self.slots[s]
        if sl.closure:
            return f"slot {s + 1} (closure)"
        lo, hi = piece_interval(sl.piece)
        return (f"slot {s + 1} (direction {sl.i + 1}, term {sl.term + 1}, piece {sl.piece + 1}, "
                f"I = [{lo:.4g}, {hi:.4g}])")

    # -- evaluations with caching
    def _points(self):
        a = np.mod(self.labels, 1.0)
        return np.moveaxis(a, 1, -1).reshape(-1, self.d)  # (m * size, d)

    def _term_eval(self):
        """``f(A)`` and ``grad_a f(A)`` for all separable terms, ``(T, m, *n)``, ``(T, m, d, *n)``."""
        if "terms" not in self._cache:
            shape = (len(self.times),) + self.grid.n
            if not self.bases:
                self._cache["terms"] = (np.zeros((0,) + shape), np.zeros((0, self.d) + shape))
            else:
                C = np.stack(self.bases)
                K = (C.shape[1] - 1) // 2
                k = np.arange(-K, K + 1)
                boxes = [C]
                for ax in range(self.d):
                    sym = (2j * np.pi * k).reshape((1,) * (ax + 1) + (-1,) + (1,) * (self.d - ax - 1))
                    boxes.append(C * sym)
                vals = _eval_boxes(np.concatenate(boxes), self._points())
                nT = len(self.bases)
                vals = vals.reshape((1 + self.d, nT) + shape)
                self._cache["terms"] = (vals[0], np.moveaxis(vals[1:], 0, 2))
        return self._cache["terms"]

    def _label_component(self, i):
        return np.mod(self.labels[:, i], 1.0)

    def rho(self, s: int) -> np.ndarray:
        """Swirl field ``rho_s`` at every frame and node, ``(m, *n)``."""
        sl = self.slots[s]
        shape = (len(self.times),) + self.grid.n
        if sl.closure:
            return np.full(shape, sl.rho_shift)
        fv, _ = self._term_eval()
        return fv[sl.term] * partition(sl.piece, self._label_component(sl.i)) + sl.rho_shift

    def rho_label_gradient(self, s: int) -> np.ndarray:
        """``grad_a`` of the slot's profile at ``A``, ``(m, d, *n)``."""
        sl = self.slots[s]
        shape = (len(self.times), self.d) + self.grid.n
        if sl.closure:
            return np.zeros(shape)
        fv, fg = self._term_eval()
        Ai = self._label_component(sl.i)
        chi = partition(sl.piece, Ai)
        out = fg[sl.term] * chi[:, None]
        out[:, sl.i] += fv[sl.term] * partition_derivative(sl.piece, Ai)
        return out

    def label_jacobian(self) -> np.ndarray:
        """``d A^b / d x^j`` per frame, ``(m, d_b, d_j, *n)``."""
        if "jac" not in self._cache:
            D = self.grid.gradient(self.displacement)
            self._cache["jac"] = D + np.eye(self.d).reshape((1, self.d, self.d) + (1,) * self.d)
        return self._cache["jac"]

    def rho_gradient(self, s: int) -> np.ndarray:
        """``d_j rho_s`` by the chain rule, ``(m, d, *n)``."""
        ga = self.rho_label_gradient(s)
        return np.einsum("mb...,mbj...->mj...", ga, self.label_jacobian())

    def g_upper(self, s: int) -> np.ndarray:
        """``g^ss`` at the nodes, ``(*n)``."""
        sl = self.slots[s]
        if sl.closure:
            if self.closure is None:
                raise ValueError("closure slot without stored values")
            return self.closure
        x = self.grid.mesh()[sl.i]
        return sl.g_scale * self.profiles[sl.term](x) + sl.g_shift

    def g_upper_gradient(self, s: int) -> np.ndarray:
        """``d_j g^ss``, ``(d, *n)``; zero for the closure slot, whose ``rho`` vanishes."""
        sl = self.slots[s]
        out = np.zeros((self.d,) + self.grid.n)
        if sl.closure:
            out[:] = self.grid.gradient(self.g_upper(s))
            return out
        x = self.grid.mesh()[sl.i]
        out[sl.i] = sl.g_scale * self.profiles[sl.term].derivative(x)
        return out

    def swirl_lower(self, s: int) -> np.ndarray:
        """``u~_s = sqrt(2 rho_s)``; the closure slot carries no swirl."""
        if self.slots[s].closure:
            return np.zeros((len(self.times),) + self.grid.n)
        return np.sqrt(2.0 * self.rho(s))

    def buoyancy(self) -> np.ndarray:
        """``sum_s rho_s grad g^ss`` per frame, ``(m, d, *n)``."""
        out = np.zeros((len(self.times), self.d) + self.grid.n)
        for s in range(self.m):
            if self.slots[s].closure:
                continue
            out += self.rho(s)[:, None] * self.g_upper_gradient(s)[None]
        return out

    # -- mutations used by the certificate checks
    def with_slots(self, slots: list[Slot], closure=None, pressure=None) -> "ExtensionData":
        return ExtensionData(self.grid, self.times, self.displacement, self.bases, self.profiles,
                             self.term_dirs, list(slots),
                             self.pressure if pressure is None else pressure,
                             self.closure if closure is None else closure,
                             {k: v for k, v in self._cache.items() if k in ("terms", "jac")})

    def flip_slot(self, s: int) -> "ExtensionData":
        """Copy with ``g^ss`` of one slot negated."""
        slots = list(self.slots)
        sl = slots[s]
        slots[s] = replace(sl, g_scale=-sl.g_scale, g_shift=-sl.g_shift)
        closure = -self.closure if sl.closure else self.closure
        return self.with_slots(slots, closure)

    def drop_slot(self, s: int) -> "ExtensionData":
        slots = [sl for j, sl in enumerate(self.slots) if j != s]
        out = self.with_slots(slots)
        if self.slots[s].closure:
            out.closure = None
        return out

    # -- serialization
    def save(self, directory) -> None:
        """Directory with ``manifest.json`` plus binary arrays in the shared format."""
        path = Path(directory)
        path.mkdir(parents=True, exist_ok=True)
        T = float(self.times[-1])
        write_binary(path / "labels.bin", self.displacement, T)
        write_binary(path / "pressure.bin", self.pressure[:, None], T)
        if self.closure is not None:
            write_binary(path / "closure.bin", self.closure[None, None], T)
        if self.bases:
            C = np.stack(self.bases)
            write_binary(path / "terms.bin", np.stack([C.real, C.imag], axis=1), T)
        manifest = {
            "format": "eulerext-extension-1",
            "grid": list(self.grid.n),
            "frames": len(self.times),
            "T": T,
            "terms": [{"direction": i, "H": _profile_json(p)}
                      for i, p in zip(self.term_dirs, self.profiles)],
            "slots": [{"i": sl.i, "term": sl.term, "piece": sl.piece,
                       "interval": list(piece_interval(sl.piece)) if not sl.closure else None,
                       "rho_shift": sl.rho_shift, "g_scale": sl.g_scale, "g_shift": sl.g_shift}
                      for sl in self.slots],
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, directory) -> "ExtensionData":
        path = Path(directory)
        man = json.loads((path / "manifest.json").read_text())
        if man.get("format") != "eulerext-extension-1":
            raise ValueError(f"{path}: unknown extension format")
        disp, T = read_binary(path / "labels.bin")
        grid = PeriodicGrid(tuple(man["grid"]))
        times = np.linspace(0.0, T, disp.shape[0])
        pressure = read_binary(path / "pressure.bin")[0][:, 0]
        closure = None
        if (path / "closure.bin").exists():
            closure = read_binary(path / "closure.bin")[0][0, 0]
        bases = []
        if man["terms"]:
            raw = read_binary(path / "terms.bin")[0]
            bases = list(raw[:, 0] + 1j * raw[:, 1])
        profiles = [_profile_from_json(t["H"]) for t in man["terms"]]
        dirs = [int(t["direction"]) for t in man["terms"]]
        slots = [Slot(int(s["i"]), int(s["term"]), int(s["piece"]), float(s["rho_shift"]),
                      float(s["g_scale"]), float(s["g_shift"])) for s in man["slots"]]
        if any(sl.closure for sl in slots) and closure is None:
            raise ValueError(f"{path}: closure slot listed but closure.bin missing")
        return cls(grid, times, disp, bases, profiles, dirs, slots, pressure, closure)


def _profile_json(p: Profile1D) -> dict:
    return {"re": p.coeffs.real.tolist(), "im": p.coeffs.imag.tolist(), "weight": p.weight,
            "start": p.start, "integrated": p.integrated}


def _profile_from_json(obj: dict) -> Profile1D:
    c = np.asarray(obj["re"]) + 1j * np.asarray(obj["im"])
    return Profile1D(c, float(obj["weight"]), float(obj["start"]), bool(obj["integrated"]))


def _momentum(flow: Flow) -> np.ndarray:
    """``d_t u_i + u^j nabla_j u_i`` per frame."""
    return -material_force(flow)


def assemble_extension(terms: list[LocalizedTerm], labels: LabelMap, flow: Flow) -> ExtensionData:
    """One slot per localized term; ``p'''`` from the Leray split of the momentum residual."""
    if labels.grid.n != flow.grid.n or len(labels.times) != len(flow.times) \
            or not np.allclose(labels.times, flow.times):
        raise ValueError("label map and flow live on different grids or time partitions")
    bases, profiles, dirs, index = [], [], [], {}
    slots = []
    for t in terms:
        if t.H is None:
            raise ValueError("localized term lacks an antiderivative")
        key = (t.i, t.source)
        if key not in index:
            # pieces of one separable term share f and H by construction
            index[key] = len(bases)
            bases.append(t.base)
            profiles.append(t.H)
            dirs.append(t.i)
        slots.append(Slot(t.i, index[key], t.piece))
    ext = ExtensionData(flow.grid, flow.times, labels.displacement, bases, profiles, dirs, slots,
                        np.zeros((len(flow.times),) + flow.grid.n))
    r = _momentum(flow) + ext.buoyancy()
    _, p = leray_project(flow.metric, r)
    ext.pressure = -p
    return ext


def positivize(ext: ExtensionData) -> ExtensionData:
    """Shift every ``rho_s`` and ``g^ss`` to have minimum 1 when not already positive.

    A shift ``c`` of ``rho_s`` adds ``c grad g^ss`` to the momentum equation,
    which is absorbed by ``p''' -= c g^ss``.
    """
    slots = list(ext.slots)
    pressure = ext.pressure.copy()
    for s, sl in enumerate(slots):
        if sl.closure:
            continue
        rmin = float(ext.rho(s).min())
        gmin = float(ext.g_upper(s).min())
        if gmin <= 0:
            sl = replace(sl, g_shift=sl.g_shift + (1.0 - gmin))
        if rmin <= 0:
            c = 1.0 - rmin
            sl = replace(sl, rho_shift=sl.rho_shift + c)
            pressure -= c * ext.g_upper(s)[None]
        slots[s] = sl
    return ext.with_slots(slots, pressure=pressure)


def close_volume(ext: ExtensionData) -> ExtensionData:
    """Append ``g^{m+1,m+1} = (prod g^ss)^-1`` with no swirl."""
    if any(sl.closure for sl in ext.slots):
        raise ValueError("extension is already closed")
    logsum = np.zeros(ext.grid.n)
    for s in range(ext.m):
        g = ext.g_upper(s)
        if np.any(g <= 0):
            raise ValueError(f"{ext.describe(s)} has nonpositive g^ss; positivize first")
        logsum += np.log(g)
    slots = list(ext.slots) + [Slot(-1, -1, -1)]
    return ext.with_slots(slots, closure=np.exp(-logsum))


def extended_velocity(ext: ExtensionData, flow: Flow | None = None) -> np.ndarray:
    """Vertical components ``u~^s = g^ss u~_s``, ``(slots, m, *n)``."""
    out = np.zeros((ext.m, len(ext.times)) + ext.grid.n)
    for s in range(ext.m):
        out[s] = ext.g_upper(s)[None] * ext.swirl_lower(s)
    return out


@dataclass
class PipelineResult:
    extension: ExtensionData
    forcing: SeparableForcing
    labels: LabelMap


def build_extension(flow: Flow, K: int, labels: LabelMap | None = None, ridge_scale: float = 1e-9,
                    tol: float = 1e-8, substeps: int = 256) -> PipelineResult:
    """Full pipeline: label map, forcing fit, localization, assembly, positivity, closure."""
    if labels is None:
        labels = label_map(flow, substeps)
    G = material_force(flow)
    samples = image_samples(labels, G)
    count = max((len(s) for s in samples.directions.values()), default=0)
    sep = fit_separable(samples, K, ridge=ridge_scale * count, tol=tol)
    terms = [antiderivative(mean_zero_adjust(t)) for t in partition_localize(sep)]
    ext = close_volume(positivize(assemble_extension(terms, labels, flow)))
    return PipelineResult(ext, sep, labels)


__all__ = [
    "PIECES", "TRANSITION", "smooth_step", "partition", "partition_derivative", "bump",
    "bump_cumulative", "Profile1D", "trig_profile", "LocalizedTerm", "partition_localize",
    "mean_zero_adjust", "antiderivative", "Slot", "ExtensionData", "assemble_extension",
    "positivize", "close_volume", "extended_velocity", "build_extension", "PipelineResult",
]
