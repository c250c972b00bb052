"""Exact dimension counts for divergence-free polynomial jets.

Jets are polynomials in ``(t, x^1, .., x^d)`` of total degree at most ``N``.
The divergence ``d_i P^i`` acts on the spatial variables only.  All ranks
are computed by exact sparse elimination over the integers and cross-checked
modulo two primes.
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass
from fractions import Fraction
from math import comb, gcd

SIZE_GUARD = 1_000_000
PRIMES = (2_147_483_629, 2_147_483_587, 1_000_000_007, 998_244_353, 4_294_967_291, 754_974_721)

Monomial = tuple[int, ...]  # exponents of (t, x^1, .., x^d)


# -- monomials ------------------------------------------------------------

def monomials(N: int, d: int) -> list[Monomial]:
    """Exponent tuples of total degree ``<= N`` in ``d + 1`` variables, graded-lex order."""
    out: list[Monomial] = []

    def rec(prefix, left, slots):
        if slots == 1:
            out.append(prefix + (left,))
            return
        for e in range(left, -1, -1):
            rec(prefix + (e,), left - e, slots - 1)

    for deg in range(N + 1):
        rec((), deg, d + 1)
    return out


@dataclass(frozen=True)
class JetSpace:
    d: int
    N: int

    @property
    def basis(self) -> list[Monomial]:
        return monomials(self.N, self.d)

    @property
    def dim(self) -> int:
        return comb(self.N + self.d + 1, self.d + 1)


def dim_VN(N: int, d: int) -> int:
    """``binom(N + d + 1, d + 1)``."""
    if N < 0 or d < 1:
        raise ValueError("need N >= 0 and d >= 1")
    return comb(N + d + 1, d + 1)


# -- sparse exact elimination ---------------------------------------------

Row = dict[int, int]


def _normalize(row: Row) -> Row:
    g = 0
    for v in row.values():
        g = gcd(g, v)
    if g > 1:
        row = {k: v // g for k, v in row.items()}
    lead = row[min(row)]
    if lead < 0:
        row = {k: -v for k, v in row.items()}
    return row


def exact_rank(rows: list[Row]) -> int:
    """Rank over the rationals of a sparse integer matrix given by rows.

    Fraction-free elimination: a row is reduced against a pivot row by
    ``p * row - row[c] * pivot`` and then divided by the gcd of its entries.
    """
    pivots: dict[int, Row] = {}
    for r in rows:
        row = {k: v for k, v in r.items() if v}
        while row:
            c = min(row)
            piv = pivots.get(c)
            if piv is None:
                pivots[c] = _normalize(row)
                break
            a, b = piv[c], row[c]
            new = {k: a * v for k, v in row.items()}
            for k, v in piv.items():
                nv = new.get(k, 0) - b * v
                if nv:
                    new[k] = nv
                else:
                    new.pop(k, None)
            row = _normalize(new) if new else new
    return len(pivots)


def modular_rank(rows: list[Row], p: int) -> int:
    """Rank of the same matrix over ``Z/p``."""
    pivots: dict[int, Row] = {}
    for r in rows:
        row = {k: v % p for k, v in r.items() if v % p}
        while row:
            c = min(row)
            piv = pivots.get(c)
            if piv is None:
                inv = pow(row[c], -1, p)
                pivots[c] = {k: v * inv % p for k, v in row.items()}
                break
            b = row[c]
            for k, v in piv.items():
                nv = (row.get(k, 0) - b * v) % p
                if nv:
                    row[k] = nv
                else:
                    row.pop(k, None)
    return len(pivots)


def _eliminate(row: dict, prow: dict, col: int) -> None:
    f = row[col]
    for k, v in prow.items():
        nv = row.get(k, 0) - f * v
        if nv:
            row[k] = nv
        else:
            row.pop(k, None)


def rref_kernel(rows: list[Row], ncols: int) -> list[dict[int, Fraction]]:
    """Exact kernel basis (one vector per free column) of a sparse rational matrix."""
    pivots: dict[int, dict[int, Fraction]] = {}
    for r in rows:
        row = {k: Fraction(v) for k, v in r.items() if v}
        # pivot rows hold no other pivot columns, so one pass reduces fully
        for c in [c for c in row if c in pivots]:
            if c in row:
                _eliminate(row, pivots[c], c)
        if not row:
            continue
        c = min(row)
        inv = 1 / row[c]
        row = {k: v * inv for k, v in row.items()}
        for prow in pivots.values():
            if c in prow:
                _eliminate(prow, row, c)
        pivots[c] = row
    basis = []
    for free in range(ncols):
        if free in pivots:
            continue
        vec = {free: Fraction(1)}
        for pc, prow in pivots.items():
            if free in prow:
                vec[pc] = -prow[free]
        basis.append(vec)
    return basis


# -- divergence matrix ----------------------------------------------------

def _index(mons: list[Monomial]) -> dict[Monomial, int]:
    return {m: j for j, m in enumerate(mons)}


def divergence_rows(N: int, d: int) -> tuple[list[Row], int, int]:
    """Rows (indexed by monomials of degree ``<= N - 1``) of ``P -> d_i P^i``.

    Columns enumerate ``(component i, monomial)`` as ``i * dim V_N + j``.
    Returns ``(rows, nrows, ncols)``.
    """
    src = monomials(N, d)
    dst = _index(monomials(N - 1, d)) if N >= 1 else {}
    V = len(src)
    rows: list[Row] = [dict() for _ in range(len(dst))]
    nnz = 0
    for i in range(d):
        for j, m in enumerate(src):
            e = m[1 + i]
            if e == 0:
                continue
            target = m[:1 + i] + (e - 1,) + m[2 + i:]
            rows[dst[target]][i * V + j] = e
            nnz += 1
    if nnz > SIZE_GUARD:
        raise MemoryError(f"divergence matrix for N={N}, d={d} has {nnz} entries, above the "
                          f"guard of {SIZE_GUARD}")
    return rows, len(dst), d * V


def divergence_rank(N: int, d: int, check_primes: int = 2, seed: int = 0) -> int:
    rows, _, _ = divergence_rows(N, d)
    r = exact_rank(rows)
    rng = random.Random(seed * 7919 + N * 31 + d)
    for p in rng.sample(PRIMES, check_primes):
        rp = modular_rank(rows, p)
        if rp != r:
            raise ArithmeticError(f"rank mismatch: exact {r}, mod {p} gives {rp}")
    return r


def dim_WN(N: int, d: int) -> int:
    """Dimension of the divergence-free jets ``d dim V_N - rank``."""
    if N < 0 or d < 1:
        raise ValueError("need N >= 0 and d >= 1")
    return d * dim_VN(N, d) - divergence_rank(N, d)


def param_count(N: int, d: int, m: int) -> int:
    """``(d + 2m) binom(N + 1 + d, d) + binom(N + d + 2, d + 1)``."""
    if m < 0:
        raise ValueError("m must be nonnegative")
    return (d + 2 * m) * comb(N + 1 + d, d) + comb(N + d + 2, d + 1)


@dataclass
class CountRow:
    N: int
    dim_V: int
    dim_W: int
    M: int

    @property
    def gap(self) -> int:
        return self.dim_W - self.M


def count_table(d: int, m: int, N_max: int, N_min: int = 0) -> list[CountRow]:
    return [CountRow(N, dim_VN(N, d), dim_WN(N, d), param_count(N, d, m))
            for N in range(N_min, N_max + 1)]


def find_threshold(d: int, m: int, N_max: int) -> tuple[int | None, list[CountRow]]:
    """Least ``N <= N_max`` with ``dim W_N > M``, and the full comparison table."""
    table = count_table(d, m, N_max)
    for row in table:
        if row.gap > 0:
            return row.N, table
    return None, table


def write_table_csv(path, table: list[CountRow]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["N", "dim_VN", "dim_WN", "M", "gap"])
        for r in table:
            wr.writerow([r.N, r.dim_V, r.dim_W, r.M, r.gap])


# -- exact polynomials and jet realization -------------------------------

Poly = dict[Monomial, Fraction]


def padd(a: Poly, b: Poly, scale=1) -> Poly:
    out = dict(a)
    for k, v in b.items():
        nv = out.get(k, 0) + scale * v
        if nv:
            out[k] = Fraction(nv)
        else:
            out.pop(k, None)
    return out


def pscale(a: Poly, s) -> Poly:
    return {k: Fraction(v * s) for k, v in a.items() if v * s}


def pdiff(a: Poly, var: int) -> Poly:
    """Derivative in variable ``var`` (0 is ``t``, ``i`` is ``x^i``)."""
    out: Poly = {}
    for k, v in a.items():
        e = k[var]
        if e:
            nk = k[:var] + (e - 1,) + k[var + 1:]
            out[nk] = out.get(nk, 0) + v * e
    return {k: v for k, v in out.items() if v}


def pmulvar(a: Poly, var: int) -> Poly:
    out: Poly = {}
    for k, v in a.items():
        nk = k[:var] + (k[var] + 1,) + k[var + 1:]
        out[nk] = v
    return out


def plaplace(a: Poly, d: int) -> Poly:
    out: Poly = {}
    for i in range(1, d + 1):
        out = padd(out, pdiff(pdiff(a, i), i))
    return out


def pnormsq_times(a: Poly, d: int) -> Poly:
    """``|x|^2 a``."""
    out: Poly = {}
    for i in range(1, d + 1):
        out = padd(out, pmulvar(pmulvar(a, i), i))
    return out


def pdiv(P: list[Poly], d: int) -> Poly:
    out: Poly = {}
    for i in range(d):
        out = padd(out, pdiff(P[i], i + 1))
    return out


def truncate(a: Poly, N: int) -> Poly:
    return {k: v for k, v in a.items() if sum(k) <= N}


def _split(a: Poly) -> dict[tuple[int, int], Poly]:
    """Pieces of fixed ``t`` power and fixed spatial degree."""
    out: dict[tuple[int, int], Poly] = {}
    for k, v in a.items():
        out.setdefault((k[0], sum(k[1:])), {})[k] = v
    return out


def inverse_laplacian(f: Poly, d: int) -> Poly:
    """A polynomial ``g`` with ``Delta g = f`` for ``f`` of one spatial degree ``k``.

    ``g = sum_j c_j |x|^{2j+2} Delta^j f`` with ``c_0 = 1 / lambda_0``,
    ``c_j = -c_{j-1} / lambda_j`` and ``lambda_j = (2j + 2)(d + 2k - 2j)``.
    """
    if not f:
        return {}
    k = sum(next(iter(f))[1:])
    out: Poly = {}
    term, c, j = f, Fraction(0), 0
    while term:
        lam = (2 * j + 2) * (d + 2 * k - 2 * j)
        c = Fraction(1, lam) if j == 0 else -c / lam
        piece = term
        for _ in range(j + 1):
            piece = pnormsq_times(piece, d)
        out = padd(out, pscale(piece, c))
        term = plaplace(term, d)
        j += 1
    return out


def realize_jet(P: list[Poly], d: int, N: int | None = None):
    """Antisymmetric ``Q`` and ``u^i = sum_j d_j Q_ij`` with ``u`` matching ``P``.

    For each homogeneous piece, ``alpha = Delta^-1 P`` is made divergence-free
    with a harmonic correction, and ``Q_ij = d_j alpha_i - d_i alpha_j``.  Then
    ``Delta Q_ij = d_j P^i - d_i P^j`` and ``sum_j d_j Q_ij = P^i`` hold exactly.
    Returns ``(Q, u)`` with ``Q[i][j]`` a polynomial.
    """
    if d < 2:
        raise ValueError("realization needs d >= 2")
    P = [dict(p) for p in P]
    if pdiv(P, d):
        raise ValueError("jet is not divergence-free")
    pieces: dict[tuple[int, int], list[Poly]] = {}
    for i in range(d):
        for key, poly in _split(P[i]).items():
            pieces.setdefault(key, [{} for _ in range(d)])[i] = poly
    Q = [[{} for _ in range(d)] for _ in range(d)]
    for (tp, k), comp in pieces.items():
        alpha = [inverse_laplacian(c, d) for c in comp]
        h = pdiv(alpha, d)  # harmonic, spatial degree q = k + 1
        if h:
            q = k + 1
            b = Fraction(-1, d + 2 * q - 2)
            kappa = Fraction(d + q) + 2 * q * b
            for i in range(d):
                gam = padd(pmulvar(h, i + 1), pnormsq_times(pdiff(h, i + 1), d), b)
                alpha[i] = padd(alpha[i], gam, -1 / kappa)
        for i in range(d):
            for j in range(d):
                if i != j:
                    Q[i][j] = padd(Q[i][j], padd(pdiff(alpha[i], j + 1), pdiff(alpha[j], i + 1), -1))
    u = [{} for _ in range(d)]
    for i in range(d):
        for j in range(d):
            u[i] = padd(u[i], pdiff(Q[i][j], j + 1))
    return Q, u


def kernel_basis(N: int, d: int) -> list[list[Poly]]:
    """Exact basis of the divergence-free jets, each a list of ``d`` polynomials."""
    rows, _, ncols = divergence_rows(N, d)
    mons = monomials(N, d)
    V = len(mons)
    out = []
    for vec in rref_kernel(rows, ncols):
        P = [{} for _ in range(d)]
        for col, val in vec.items():
            P[col // V][mons[col % V]] = val
        out.append(P)
    return out


def random_kernel_vector(N: int, d: int, rng: random.Random, basis=None) -> list[Poly]:
    basis = basis if basis is not None else kernel_basis(N, d)
    P = [{} for _ in range(d)]
    for vec in basis:
        c = rng.randint(-5, 5)
        if c:
            for i in range(d):
                P[i] = padd(P[i], vec[i], c)
    return P


def jet_matches(u: list[Poly], P: list[Poly], N: int) -> bool:
    return all(truncate(a, N) == truncate(b, N) for a, b in zip(u, P))
