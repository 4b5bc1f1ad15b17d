import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dwacnn.align import (AlignmentPath, InfeasibleAlignmentError, align, align_bank,
                          dtw_cross, dtw_distance, feasible, local_distances, path_violations)
from dwacnn.core import DomainError
from dwacnn.verify import brute_force_dtw, enumerate_paths


def test_identical_sequences_align_diagonally():
    p = align([[1], [2], [3]], [[1], [2], [3]])
    assert p.pairs == ((1, 1), (2, 2), (3, 3))
    assert p.cost == 0.0


def test_skip_then_repeat_example():
    # increments (1,1) -> 2, (0,2) -> 2, (2,0) -> 1
    p = align([[0], [1], [0]], [[0], [0], [1]])
    assert p.pairs == ((1, 1), (2, 3), (3, 3))
    assert p.cost == 1.0
    assert dtw_distance([[0], [1], [0]], [[0], [0], [1]]) == 1.0


@pytest.mark.parametrize("n", [1, 2, 5, 9])
def test_zero_sequences_tie_break_to_diagonal(n):
    p = align(np.zeros((n, 3)), np.zeros((n, 3)))
    assert p.pairs == tuple((i, i) for i in range(1, n + 1))
    assert p.cost == 0.0


def test_single_element():
    assert dtw_distance([[2]], [[5]]) == 3.0
    assert align([[2]], [[5]]).pairs == ((1, 1),)


def test_local_distance_is_euclidean():
    d = local_distances([[0, 0], [1, 1]], [[3, 4]])
    np.testing.assert_array_equal(d, [[5.0], [np.sqrt(13.0)]])


def test_feasibility_bounds():
    assert feasible(1, 1) and not feasible(1, 2)
    assert feasible(2, 3) and not feasible(2, 4)
    assert feasible(4, 2)  # 0, +1, 0
    assert not feasible(5, 2)
    for I in range(1, 9):
        for J in range(1, 13):
            assert feasible(I, J) == bool(enumerate_paths(I, J))


def test_infeasible_and_nonfinite_raise():
    with pytest.raises(InfeasibleAlignmentError):
        align(np.zeros((2, 1)), np.zeros((4, 1)))
    with pytest.raises(DomainError):
        align([[np.nan]], [[1.0]])


def test_rectangular_against_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(300):
        I = int(rng.integers(1, 8))
        J = int(rng.integers(1, min(2 * I, 13)))
        if not feasible(I, J):
            continue
        w, a = rng.normal(size=(I, 2)), rng.normal(size=(J, 2))
        best, argmins = brute_force_dtw(w, a)
        p = align(w, a)
        assert p.cost == best
        assert p.pairs in argmins
        assert dtw_distance(w, a) == best


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.integers(0, 2 ** 32 - 1), st.booleans())
def test_path_invariants_hold(I, D, seed, quantize):
    rng = np.random.default_rng(seed)
    w, a = rng.normal(size=(I, D)), rng.normal(size=(I, D))
    if quantize:  # provoke ties
        w, a = np.round(w), np.round(a)
    p = align(w, a)
    assert path_violations(p.pairs, I, I) == []
    dist = local_distances(w, a)
    recomputed = 0.0
    for i, j in p.pairs:
        recomputed = dist[i - 1, j - 1] + recomputed
    assert recomputed == p.cost >= 0.0
    again = align(w, a)
    assert again == p


def test_align_bank_matches_single_calls():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(5, 6, 3))
    X = rng.normal(size=(7, 6, 3))
    X[2] = W[1]
    costs, match = align_bank(W, X)
    for m in range(7):
        for n in range(5):
            p = align(W[n], X[m])
            assert costs[m, n] == p.cost
            np.testing.assert_array_equal(match[m, n], p.matched)
    np.testing.assert_array_equal(match[2, 1], np.arange(6))


def test_dtw_cross_matches_pairs():
    rng = np.random.default_rng(1)
    Q, R = rng.normal(size=(3, 10, 2)), rng.normal(size=(4, 10, 2))
    out = dtw_cross(Q, R)
    for a in range(3):
        for b in range(4):
            assert out[a, b] == dtw_distance(Q[a], R[b])


def test_matched_rows_are_zero_based():
    p = AlignmentPath(((1, 1), (2, 3), (3, 3)), 1.0)
    np.testing.assert_array_equal(p.matched, [0, 2, 2])
