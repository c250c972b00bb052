"""Material forcing of a flow and its separable Fourier fit on the image domain.

For a flow with label map ``A``, the forcing one-form ``G`` is pulled back
to coordinates ``(a, y) = (A(t, x), x^i)`` and fitted by a trigonometric
polynomial in ``d + 1`` variables whose terms split as ``f(a) h(y)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft
from scipy.sparse.linalg import LinearOperator, cg

from .fields import PeriodicGrid, axis_exponentials, eval_box, time_derivative
from .flowgen import Flow
from .geometry import MetricField, leray_project, lower
from .lagrange import LabelMap

COND_LIMIT = 1e13


def advective_oneform(metric: MetricField, u: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``u^j nabla_j w_k`` for a vector ``u`` and one-form ``w`` (leading frame axes allowed)."""
    grid = metric.grid
    d = grid.d
    dw = grid.gradient(w)  # (..., k, j, *n) = d_j w_k
    out = np.einsum("...jx,...kjx->...kx", u.reshape(u.shape[:-d] + (-1,)),
                    dw.reshape(dw.shape[:-d] + (-1,))).reshape(w.shape)
    if not metric.is_flat:
        # Gamma^i_jk w_i u^j
        G = metric.christoffel.reshape((d, d, d, -1))
        corr = np.einsum("ijkx,...ix,...jx->...kx", G, w.reshape(w.shape[:-d] + (-1,)),
                         u.reshape(u.shape[:-d] + (-1,)))
        out = out - corr.reshape(w.shape)
    return out


def material_force(flow: Flow) -> np.ndarray:
    """``G_i = -(d_t u_i + u^j nabla_j u_i)`` per frame, shape ``(m, d, *n)``."""
    if flow.frames < 5:
        raise ValueError(f"material force needs at least 5 time frames, got {flow.frames}")
    w = flow.lowered()
    dt = time_derivative(w, flow.times)
    return -(dt + advective_oneform(flow.metric, flow.velocity, w))


@dataclass
class SampleSet:
    a: np.ndarray  # (P, d) in [0, 1)
    y: np.ndarray  # (P,)
    values: np.ndarray  # (P,)

    def __len__(self):
        return len(self.values)


@dataclass
class ForcingSamples:
    """Samples of ``G_i`` on the image of ``(t, x) -> (A(t, x), x^i)``, keyed by direction."""

    d: int
    directions: dict[int, SampleSet]


def image_samples(labels: LabelMap, G: np.ndarray, i: int | None = None) -> ForcingSamples:
    grid = labels.grid
    d = grid.d
    m = len(labels.times)
    a = np.mod(labels.A, 1.0).transpose(0, *range(2, d + 2), 1).reshape(-1, d)
    x = grid.mesh()
    dirs = range(d) if i is None else [i]
    out = {}
    for k in dirs:
        y = np.broadcast_to(x[k], (m,) + grid.n).reshape(-1)
        v = np.asarray(G[:, k], dtype=float).reshape(-1)
        out[k] = _dedupe(SampleSet(a.copy(), y.copy(), v.copy()))
    return ForcingSamples(d, out)


def _dedupe(s: SampleSet) -> SampleSet:
    keys = np.column_stack([s.a, s.y])
    uniq, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    if len(uniq) == len(keys):
        return s
    inv = inv.reshape(-1)
    vals = np.bincount(inv, weights=s.values) / counts
    return SampleSet(uniq[:, :-1], uniq[:, -1], vals)


# -- separable forcing ----------------------------------------------------

@dataclass
class SeparableTerm:
    """``f(a) h(y)`` with centred coefficient boxes (``-K..K`` per axis)."""

    f: np.ndarray  # complex, shape (2K+1,)*d
    h: np.ndarray  # complex, shape (2K+1,)

    @property
    def K(self) -> int:
        return (len(self.h) - 1) // 2

    def f_values(self, a: np.ndarray) -> np.ndarray:
        return eval_trig(self.f, a)

    def h_values(self, y: np.ndarray) -> np.ndarray:
        return eval_trig(self.h, np.asarray(y, dtype=float)[:, None])


def eval_trig(coeffs: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Real part of a centred-box trigonometric polynomial at ``points`` ``(P, d)``."""
    coeffs = np.asarray(coeffs)
    points = np.atleast_2d(points)
    exps = [axis_exponentials(points[:, a], (s - 1) // 2) for a, s in enumerate(coeffs.shape)]
    return eval_box(coeffs[None], exps)[0].real


@dataclass
class FitReport:
    samples: int
    unknowns: int
    iterations: int
    rms: float
    sup: float
    ridge: float


@dataclass
class SeparableForcing:
    """Per-direction separable terms plus the fitted joint coefficients.

    ``coefficients[i]`` has shape ``((2K+1,)*d + (2K,))``; the last axis runs
    over ``n = -K..-1, 1..K``.
    """

    d: int
    K: int
    terms: dict[int, list[SeparableTerm]]
    coefficients: dict[int, np.ndarray] = field(default_factory=dict)
    reports: dict[int, FitReport] = field(default_factory=dict)

    def term_count(self, i: int) -> int:
        return len(self.terms.get(i, []))

    def evaluate(self, i: int, a: np.ndarray, y: np.ndarray) -> np.ndarray:
        """``sum_s f_s(a) h_s(y)``."""
        out = np.zeros(len(y))
        for t in self.terms.get(i, []):
            out += t.f_values(a) * t.h_values(y)
        return out

    def evaluate_joint(self, i: int, a: np.ndarray, y: np.ndarray) -> np.ndarray:
        """The truncated Fourier sum directly from the joint coefficients."""
        if i not in self.coefficients:
            return np.zeros(len(y))
        return _GroupedDesign(a, y, self.K).evaluate(self.coefficients[i])

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<I", self.d))
            for i in range(self.d):
                terms = self.terms.get(i, [])
                fh.write(struct.pack("<I", len(terms)))
                for t in terms:
                    fh.write(struct.pack("<I", t.K))
                    fh.write(np.ascontiguousarray(t.f, dtype="<c16").view("<f8").tobytes())
                    fh.write(np.ascontiguousarray(t.h, dtype="<c16").view("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "SeparableForcing":
        raw = open(path, "rb").read()
        pos = 0

        def u32():
            nonlocal pos
            (v,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            return v

        def arr(shape):
            nonlocal pos
            count = int(np.prod(shape))
            a = np.frombuffer(raw, dtype="<f8", count=2 * count, offset=pos).view("<c16")
            pos += 16 * count
            return a.reshape(shape).astype(complex)

        d = u32()
        terms: dict[int, list[SeparableTerm]] = {}
        K = 0
        for i in range(d):
            mi = u32()
            lst = []
            for _ in range(mi):
                K = u32()
                B = 2 * K + 1
                f = arr((B,) * d)
                h = arr((B,))
                lst.append(SeparableTerm(f, h))
            terms[i] = lst
        if pos != len(raw):
            raise ValueError(f"{path}: trailing bytes in forcing file")
        return cls(d, K, terms)


def _nlist(K: int) -> np.ndarray:
    return np.concatenate([np.arange(-K, 0), np.arange(1, K + 1)])


class _GroupedDesign:
    """Design matrix of ``e(k.a + n y)``, ``|k_a| <= K``, ``n = +-1..+-K``.

    Samples are grouped by their ``y`` value; on the Eulerian image ``y`` takes
    only grid values, so each product costs one small separable evaluation
    per group.
    """

    def __init__(self, a: np.ndarray, y: np.ndarray, K: int):
        self.K = K
        self.d = a.shape[1]
        self.B = 2 * K + 1
        self.nl = _nlist(K)
        yu, inv = np.unique(y, return_inverse=True)
        inv = inv.reshape(-1)
        self.order = np.argsort(inv, kind="stable")
        self.bounds = np.searchsorted(inv[self.order], np.arange(len(yu) + 1))
        self.a = a[self.order]
        self.y = y[self.order]
        self.yu = yu
        self.exps = [axis_exponentials(self.a[:, ax], K) for ax in range(self.d)]
        self.Ey = np.exp(2j * np.pi * np.outer(yu, self.nl))  # (J, Nn)

    @property
    def shape(self):
        return (self.B ** self.d, len(self.nl))

    def _groups(self):
        for j in range(len(self.yu)):
            lo, hi = self.bounds[j], self.bounds[j + 1]
            if hi > lo:
                yield j, lo, hi

    def forward(self, c: np.ndarray) -> np.ndarray:
        """Values at the (sorted) samples."""
        V = c @ self.Ey.T  # (B^d, J)
        out = np.empty(len(self.y), dtype=complex)
        box = (self.B,) * self.d
        for j, lo, hi in self._groups():
            out[lo:hi] = eval_box(V[:, j].reshape((1,) + box), [e[lo:hi] for e in self.exps])[0]
        return out

    def adjoint(self, r: np.ndarray) -> np.ndarray:
        W = np.zeros((self.B ** self.d, len(self.yu)), dtype=complex)
        for j, lo, hi in self._groups():
            T = np.conj(self.exps[-1][lo:hi]) * r[lo:hi, None]
            for ax in range(self.d - 2, 0, -1):
                T = (np.conj(self.exps[ax][lo:hi])[:, :, None] * T[:, None, :]).reshape(hi - lo, -1)
            W[:, j] = (np.conj(self.exps[0][lo:hi]).T @ T).reshape(-1) if self.d > 1 else T.sum(0)
        return W @ np.conj(self.Ey)

    def unsort(self, vals: np.ndarray) -> np.ndarray:
        out = np.empty_like(vals)
        out[self.order] = vals
        return out

    def evaluate(self, c: np.ndarray) -> np.ndarray:
        """Real values in the original sample order."""
        return self.unsort(self.forward(c.reshape(self.shape)).real)


class _ToeplitzGram:
    """Products with ``X^H X``, whose entries depend only on mode differences.

    The generating sums ``S(dk, dn) = sum_p e(dk.a_p + dn y_p)`` are formed once;
    each product is then a zero-padded FFT convolution.
    """

    def __init__(self, X: _GroupedDesign):
        K, d = X.K, X.d
        K2 = 2 * K
        B2 = 2 * K2 + 1
        self.X = X
        W = np.zeros((B2 ** d, len(X.yu)), dtype=complex)
        for j, lo, hi in X._groups():
            E = [axis_exponentials(X.a[lo:hi, ax], K2) for ax in range(d)]
            T = E[-1]
            for ax in range(d - 2, 0, -1):
                T = (E[ax][:, :, None] * T[:, None, :]).reshape(hi - lo, -1)
            W[:, j] = (E[0].T @ T).reshape(-1) if d > 1 else T.sum(0)
        dn = np.arange(-K2, K2 + 1)
        S = (W @ np.exp(2j * np.pi * np.outer(X.yu, dn))).reshape((B2,) * (d + 1))
        # cyclic length >= 4K+1 keeps every difference k1 - k2 unaliased
        L = sfft.next_fast_len(2 * K2 + 1)
        self.L = (L,) * (d + 1)
        Rc = np.zeros(self.L, dtype=complex)
        idx = np.arange(-K2, K2 + 1) % L
        Rc[np.ix_(*[idx] * (d + 1))] = np.conj(S)  # R(delta) = S(-delta)
        self.Rh = sfft.fftn(Rc)
        self.K = K
        self.box = (2 * K + 1,) * d
        self.kidx = np.arange(-K, K + 1) % L
        self.nidx = X.nl % L

    def __call__(self, c: np.ndarray) -> np.ndarray:
        d = self.X.d
        full = np.zeros(self.L, dtype=complex)
        sel = np.ix_(*([self.kidx] * d + [self.nidx]))
        full[sel] = c.reshape(self.box + (-1,))
        conv = sfft.ifftn(sfft.fftn(full) * self.Rh)
        return conv[sel].reshape(c.shape)


class _SeparableLSQ:
    """Ridge least squares with penalty ``ridge * (1 + |k|^2 + n^2)^2 |c|^2``."""

    def __init__(self, design: _GroupedDesign, ridge: float, direction: int):
        self.X = design
        self.ridge = ridge
        self.i = direction
        K, d = design.K, design.d
        ks = np.stack(np.meshgrid(*[np.arange(-K, K + 1)] * d, indexing="ij")).reshape(d, -1).T
        self.ks = ks
        k2 = (ks ** 2).sum(axis=1)
        self.D = (1.0 + k2[:, None] + design.nl[None, :] ** 2) ** 2  # (B^d, Nn)
        self.gram = _ToeplitzGram(design)

    def normal(self, c: np.ndarray) -> np.ndarray:
        return self.gram(c) + self.ridge * self.D * c

    def block_preconditioner(self):
        """Exact diagonal blocks over the sheared diagonals ``k + n e_i``.

        Within such a block the Gram entries only depend on ``n2 - n1`` through
        ``sum_p exp(2 pi i (n2 - n1)(y_p - a^i_p))``.
        """
        X, i = self.X, self.i
        K, d, nl = X.K, X.d, X.nl
        Nn = len(nl)
        shape = X.shape
        z = X.y - X.a[:, i]
        S = {dl: complex(np.exp(2j * np.pi * dl * z).sum()) for dl in range(-2 * K, 2 * K + 1)}
        Sm = np.array([[S[int(n2 - n1)] for n2 in nl] for n1 in nl])
        kp = np.repeat(self.ks[:, None, :], Nn, axis=1)  # (U_a, Nn, d)
        kp[:, :, i] += nl[None, :]
        dims = [2 * K + 1] * d
        dims[i] = 4 * K + 1
        shift = np.full(d, K)
        shift[i] = 2 * K
        key = np.ravel_multi_index(tuple((kp + shift).reshape(-1, d).T), dims)
        uniq, blk = np.unique(key, return_inverse=True)
        blk = blk.reshape(-1)
        pos = np.tile(np.arange(Nn), len(self.ks))
        nb = len(uniq)
        if nb * Nn * Nn > 8_000_000:
            diag = float(len(z)) + self.ridge * self.D
            return (lambda r: r / diag), float(diag.max() / diag.min())
        present = np.zeros((nb, Nn), dtype=bool)
        present[blk, pos] = True
        Dpad = np.ones((nb, Nn))
        Dpad[blk, pos] = self.D.reshape(-1)
        M = np.where(present[:, :, None] & present[:, None, :], Sm[None], 0.0).astype(complex)
        idx = np.arange(Nn)
        M[:, idx, idx] = np.where(present, Sm[idx, idx][None] + self.ridge * Dpad, 1.0)
        eig = np.linalg.eigvalsh(M)
        cond = float((eig[:, -1] / np.maximum(eig[:, 0], 1e-300)).max())
        Minv = np.linalg.inv(M)

        def apply(r):
            R = np.zeros((nb, Nn), dtype=complex)
            R[blk, pos] = r.reshape(-1)
            Z = np.einsum("bij,bj->bi", Minv, R)
            return Z[blk, pos].reshape(shape)

        return apply, cond

    def solve(self, b: np.ndarray, tol: float = 1e-11, max_iter: int = 2000):
        """Preconditioned CG on the normal equations; ``b`` in sorted sample order."""
        rhs = self.X.adjoint(b.astype(complex))
        prec, cond = self.block_preconditioner()
        if cond > COND_LIMIT:
            raise np.linalg.LinAlgError(
                f"normal equations ill-conditioned (block condition {cond:.2e}); "
                "use a larger ridge or a smaller K")
        shape = self.X.shape
        bn = np.linalg.norm(rhs)
        if bn == 0:
            return np.zeros(shape, dtype=complex), 0
        size = rhs.size
        A = LinearOperator((size, size), dtype=complex,
                           matvec=lambda v: self.normal(v.reshape(shape)).reshape(-1))
        M = LinearOperator((size, size), dtype=complex,
                           matvec=lambda v: prec(v.reshape(shape)).reshape(-1))
        count = [0]

        def tick(_):
            count[0] += 1

        c, status = cg(A, rhs.reshape(-1), rtol=tol, atol=0.0, maxiter=max_iter, M=M, callback=tick)
        if status != 0:
            rel = np.linalg.norm(rhs.reshape(-1) - A.matvec(c)) / bn
            raise np.linalg.LinAlgError(
                f"fit did not converge in {max_iter} iterations "
                f"(relative residual {rel:.2e}); use a larger ridge or a smaller K")
        return c.reshape(shape), count[0]


def _symmetrize(c: np.ndarray, d: int) -> np.ndarray:
    """Enforce ``c[-k, -n] = conj(c[k, n])`` (real target)."""
    flip = np.conj(c[(slice(None, None, -1),) * (d + 1)])
    return 0.5 * (c + flip)


def realify(c: np.ndarray, K: int, d: int, prune: float = 0.0) -> list[SeparableTerm]:
    """Split joint coefficients into real ``(f, h)`` pairs, two per ``n >= 1``.

    Terms whose ``f`` has all coefficients at most ``prune`` in magnitude are dropped.
    """
    B = 2 * K + 1
    terms = []
    for n in range(1, K + 1):
        cp = c[..., K - 1 + n]   # n
        cm = c[..., K - n]       # -n
        hc = np.zeros(B, dtype=complex)
        hc[K + n] = hc[K - n] = 0.5
        hs = np.zeros(B, dtype=complex)
        hs[K + n], hs[K - n] = -0.5j, 0.5j
        for f, h in ((cp + cm, hc), (1j * (cp - cm), hs)):
            if np.abs(f).max() > prune:
                terms.append(SeparableTerm(f.reshape((B,) * d).copy(), h))
    return terms


def fit_separable(samples: ForcingSamples, K: int, ridge: float | None = None,
                  tol: float = 1e-10, prune: float = 1e-10) -> SeparableForcing:
    """Ridge-regularized trigonometric fit of every direction present in ``samples``.

    The ``y``-constant modes are excluded, so each ``h`` has mean zero.  ``ridge``
    defaults to ``1e-6`` times the sample count.  Terms with coefficients below
    ``prune`` times the largest sample magnitude are dropped.
    """
    d = samples.d
    terms: dict[int, list[SeparableTerm]] = {i: [] for i in range(d)}
    coeffs, reports = {}, {}
    if K < 0:
        raise ValueError("K must be nonnegative")
    scale = max((float(np.abs(s.values).max()) for s in samples.directions.values() if len(s)),
                default=0.0)
    for i, s in samples.directions.items():
        B = 2 * K + 1
        if K == 0:
            coeffs[i] = np.zeros((B,) * d + (0,), dtype=complex)
            reports[i] = FitReport(len(s), 0, 0, float(np.sqrt(np.mean(s.values ** 2))),
                                   float(np.abs(s.values).max()), 0.0)
            continue
        lam = 1e-6 * len(s) if ridge is None else float(ridge)
        unknowns = B ** d * 2 * K
        if len(s) < unknowns and lam == 0:
            raise ValueError(f"{len(s)} samples cannot determine {unknowns} modes without a ridge")
        design = _GroupedDesign(s.a, s.y, K)
        c, it = _SeparableLSQ(design, lam, i).solve(s.values[design.order], tol=tol)
        c = _symmetrize(c.reshape((B,) * d + (2 * K,)), d)
        fit = design.evaluate(c)
        res = s.values - fit
        coeffs[i] = c
        reports[i] = FitReport(len(s), unknowns, it, float(np.sqrt(np.mean(res ** 2))),
                               float(np.abs(res).max()), lam)
        terms[i] = realify(c, K, d, prune * scale)
    return SeparableForcing(d, K, terms, coeffs, reports)


@dataclass
class ResidualReport:
    sup: np.ndarray
    l2: np.ndarray
    projected_sup: float
    projected_l2: float


def evaluate_on_image(sep: SeparableForcing, labels: LabelMap) -> np.ndarray:
    """``F_i(A(t, x), x^i)`` from the joint coefficients, shape ``(m, d, *n)``."""
    grid = labels.grid
    d = grid.d
    m = len(labels.times)
    a = np.mod(labels.A, 1.0).transpose(0, *range(2, d + 2), 1).reshape(-1, d)
    x = grid.mesh()
    out = np.zeros((m, d) + grid.n)
    for i in range(d):
        y = np.broadcast_to(x[i], (m,) + grid.n).reshape(-1)
        out[:, i] = sep.evaluate_joint(i, a, y).reshape((m,) + grid.n)
    return out


def forcing_residual(sep: SeparableForcing, flow: Flow, labels: LabelMap,
                     G: np.ndarray | None = None) -> ResidualReport:
    """Sizes of ``r_i = G_i - F_i(A, x^i)``, raw and after Leray projection."""
    if G is None:
        G = material_force(flow)
    r = G - evaluate_on_image(sep, labels)
    grid = flow.grid
    axes = (0,) + tuple(range(2, r.ndim))
    sup = np.abs(r).max(axis=axes)
    l2 = np.sqrt((r ** 2).mean(axis=axes))
    proj, _ = leray_project(flow.metric, r)
    return ResidualReport(sup, l2, float(np.abs(proj).max()), float(np.sqrt((proj ** 2).mean())))
