import random
from fractions import Fraction
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eulerext.dof import (count_table, divergence_rank, divergence_rows, dim_VN, dim_WN,
                          exact_rank, find_threshold, jet_matches, kernel_basis, modular_rank,
                          monomials, param_count, pdiv, random_kernel_vector, realize_jet,
                          rref_kernel, write_table_csv)

F = Fraction


def test_dim_VN_values():
    assert dim_VN(2, 3) == comb(6, 4) == 15
    assert dim_VN(1, 2) == 4
    assert all(dim_VN(0, d) == 1 for d in (1, 2, 5))
    assert len(monomials(3, 2)) == dim_VN(3, 2)
    with pytest.raises(ValueError):
        dim_VN(-1, 2)


def test_dim_WN_hand_elimination():
    # P = (a + b t + c x1 + e x2, f + g t + h x1 + k x2) with one constraint c + k = 0
    assert dim_WN(1, 2) == 7
    assert all(dim_WN(0, d) == d for d in (1, 2, 3))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 7), st.integers(1, 4))
def test_rank_nullity(N, d):
    rows, nrows, ncols = divergence_rows(N, d)
    r = divergence_rank(N, d)
    assert r + dim_WN(N, d) == ncols == d * dim_VN(N, d)
    # divergence maps onto V_{N-1}
    assert r == (dim_VN(N - 1, d) if N >= 1 else 0) == nrows


def test_kernel_basis_dimension_and_divergence():
    for N, d in ((2, 2), (2, 3), (3, 2)):
        basis = kernel_basis(N, d)
        assert len(basis) == dim_WN(N, d)
        assert all(not pdiv(P, d) for P in basis)


def test_exact_and_modular_rank_agree():
    rng = random.Random(3)
    rows = [{j: rng.randint(-3, 3) for j in rng.sample(range(12), 4)} for _ in range(10)]
    rows.append({k: 2 * v for k, v in rows[0].items()})
    r = exact_rank(rows)
    assert r == modular_rank(rows, 1_000_000_007) == modular_rank(rows, 998_244_353)
    dense = np.zeros((len(rows), 12))
    for i, row in enumerate(rows):
        for k, v in row.items():
            dense[i, k] = v
    assert r == np.linalg.matrix_rank(dense)


def test_rref_kernel_small():
    basis = rref_kernel([{0: 1, 1: 1}, {1: 1, 2: -1}], 3)
    assert basis == [{2: F(1), 0: F(-1), 1: F(1)}]


def test_size_guard():
    with pytest.raises(MemoryError, match="guard"):
        divergence_rows(30, 5)


def test_param_count_values():
    assert param_count(2, 3, 1) == 5 * comb(6, 3) + comb(7, 4) == 135
    assert param_count(0, 3, 0) == 17
    assert all(param_count(5, 3, m) < param_count(5, 3, m + 1) for m in range(4))


def test_threshold_d3_m1(tmp_path):
    N_star, table = find_threshold(3, 1, 20)
    assert N_star == 20
    gaps = [r.gap for r in count_table(3, 1, 23)]
    assert all(b > a for a, b in zip(gaps[N_star:], gaps[N_star + 1:]))
    write_table_csv(tmp_path / "t.csv", table)
    assert len(open(tmp_path / "t.csv").read().splitlines()) == 22


def test_d2_table_reported_without_claim():
    N_star, table = find_threshold(2, 1, 12)
    assert len(table) == 13 and N_star is None


def test_d4_gains_relative_to_d3():
    for N in range(4, 13):
        r3 = dim_WN(N, 3) / param_count(N, 3, 1)
        r4 = dim_WN(N, 4) / param_count(N, 4, 1)
        assert r4 >= r3


def test_ratio_approaches_d_minus_one():
    # 3 binom(N+4, 4) - binom(N+3, 4) over binom(N+4, 4) is 2 + 4 / (N + 4)
    for N in (12, 20):
        assert F(dim_WN(N, 3), dim_VN(N, 3)) == 2 + F(4, N + 4)
    assert abs(dim_WN(20, 3) / dim_VN(20, 3) - 2) / 2 <= 0.1


def test_realize_constant_jet():
    Q, u = realize_jet([{(0, 0, 0): F(2)}, {(0, 0, 0): F(-3)}], 2)
    assert {sum(m) for m in Q[0][1]} == {1}
    assert u == [{(0, 0, 0): F(2)}, {(0, 0, 0): F(-3)}]


def test_realize_rotational_jet():
    P = [{(0, 0, 1): F(1)}, {(0, 1, 0): F(-1)}]  # (x2, -x1)
    Q, u = realize_jet(P, 2)
    assert jet_matches(u, P, 2)
    assert Q[0][1] == {k: -v for k, v in Q[1][0].items()}
    assert max(sum(m) for m in Q[0][1]) == 2


def test_realize_rejects_bad_input():
    with pytest.raises(ValueError, match="divergence"):
        realize_jet([{(0, 1, 0): F(1)}, {}], 2)
    with pytest.raises(ValueError):
        realize_jet([{(0, 0): F(1)}], 1)


@pytest.mark.parametrize("N,d", [(3, 3), (4, 2), (2, 3)])
def test_realize_random_kernel_vectors(N, d):
    rng = random.Random(N * 10 + d)
    basis = kernel_basis(N, d)
    for _ in range(4):
        P = random_kernel_vector(N, d, rng, basis)
        Q, u = realize_jet(P, d)
        assert not pdiv(u, d) and jet_matches(u, P, N)
        for i in range(d):
            for j in range(d):
                assert Q[i][j] == {k: -v for k, v in Q[j][i].items()}


def test_normalized_counts_decrease_toward_limits():
    # N^{d+1}/(d+1)! normalization; limits d - 1 and 1 are approached from above
    norm = [(dim_WN(N, 3) * 24 / N ** 4, param_count(N, 3, 1) * 24 / N ** 4)
            for N in range(4, 21, 4)]
    for (w0, m0), (w1, m1) in zip(norm, norm[1:]):
        assert 2 < w1 < w0 and 1 < m1 < m0
