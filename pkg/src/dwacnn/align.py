"""Slope-constrained DTW between a weight sequence and an input window.

Step pattern (asymmetric Itakura): the weight index advances by exactly one
per step while the window index advances by 0, 1 or 2, and two consecutive
0-advances are not allowed. Paths are pinned to (1, 1) and (I, J). The local
distance is the Euclidean norm of the row difference and the path cost is the
plain sum of local distances along the path.

The DP keeps two states per cell, "entered by a 0-advance" and "entered by a
1/2-advance", which makes the no-repeat rule exact rather than greedy.
Ties prefer the diagonal, then the skip, then the repeat.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .core import DTYPE, DimensionError, DomainError

INF = np.inf


class InfeasibleAlignmentError(ValueError):
    """No constrained path joins (1, 1) to (I, J)."""


@dataclass(frozen=True)
class AlignmentPath:
    pairs: tuple  # ((i, j), ...), 1-based, i = weight index, j = window index
    cost: float

    @property
    def matched(self) -> np.ndarray:
        """0-based window row matched to each weight row."""
        return np.array([j - 1 for _, j in self.pairs], dtype=np.int64)


def feasible(I: int, J: int) -> bool:
    if I < 1 or J < 1:
        return False
    # fastest: all +2; slowest: alternate 0, +1
    return (I - 1) // 2 + 1 <= J <= 2 * (I - 1) + 1


def path_violations(pairs, I: int, J: int) -> list:
    """Structural problems of a path, empty if it is a valid constrained path."""
    problems = []
    if len(pairs) != I:
        problems.append(f"expected {I} pairs, got {len(pairs)}")
        return problems
    if [p[0] for p in pairs] != list(range(1, I + 1)):
        problems.append("weight indices are not 1..I in order")
    if tuple(pairs[0]) != (1, 1):
        problems.append(f"path starts at {tuple(pairs[0])}, not (1, 1)")
    if tuple(pairs[-1]) != (I, J):
        problems.append(f"path ends at {tuple(pairs[-1])}, not ({I}, {J})")
    prev_inc = None
    for a, b in zip(pairs, pairs[1:]):
        inc = b[1] - a[1]
        if inc not in (0, 1, 2):
            problems.append(f"window increment {inc} between {a} and {b}")
        if inc == 0 and prev_inc == 0:
            problems.append(f"two consecutive repeats ending at {b}")
        prev_inc = inc
    return problems


# -- compiled kernels ---------------------------------------------------------

@numba.njit(cache=True)
def _dist_into(p, sT, out):
    # sT is the window transposed to (D, J). Each cell's feature sum runs
    # k = 0..D-1 in order; j is the innermost, unit-stride loop.
    I, D = p.shape
    J = sT.shape[1]
    out[:, :] = 0.0
    for k in range(D):
        xk = sT[k]
        for i in range(I):
            pik = p[i, k]
            for j in range(J):
                diff = pik - xk[j]
                out[i, j] += diff * diff
    for i in range(I):
        for j in range(J):
            out[i, j] = math.sqrt(out[i, j])


@numba.njit(cache=True)
def _dp(d, gm, gz, step):
    I, J = d.shape
    for i in range(I):
        for j in range(J):
            gm[i, j] = np.inf
            gz[i, j] = np.inf
            step[i, j] = 1
    gm[0, 0] = d[0, 0]
    for i in range(1, I):
        for j in range(J):
            best = np.inf
            st = 1
            if j >= 1:
                best = min(gm[i - 1, j - 1], gz[i - 1, j - 1])
            if j >= 2:
                skip = min(gm[i - 1, j - 2], gz[i - 1, j - 2])
                if skip < best:
                    best = skip
                    st = 2
            step[i, j] = st
            if best < np.inf:
                gm[i, j] = d[i, j] + best
            if gm[i - 1, j] < np.inf:
                gz[i, j] = d[i, j] + gm[i - 1, j]
    return min(gm[I - 1, J - 1], gz[I - 1, J - 1])


@numba.njit(cache=True)
def _backtrack(gm, gz, step, match):
    I, J = gm.shape
    j = J - 1
    free = True  # False when the step into this cell must not be a repeat
    for i in range(I - 1, 0, -1):
        match[i] = j
        if free and gz[i, j] < gm[i, j]:
            free = False
        else:
            j -= step[i, j]
            free = True
    match[0] = j


@numba.njit(cache=True)
def _align_pairs(P, S, costs, match, with_path):
    M, I, _ = P.shape
    J = S.shape[1]
    sT = np.empty((S.shape[2], J))
    d = np.empty((I, J))
    gm = np.empty((I, J))
    gz = np.empty((I, J))
    step = np.empty((I, J), dtype=np.int8)
    for m in range(M):
        sT[:, :] = S[m].T
        _dist_into(P[m], sT, d)
        c = _dp(d, gm, gz, step)
        costs[m] = c
        if with_path and c < np.inf:
            _backtrack(gm, gz, step, match[m])


@numba.njit(cache=True, parallel=True)
def _align_bank(W, X, costs, match):
    N, I, _ = W.shape
    M, J, _ = X.shape
    for m in numba.prange(M):
        xT = np.ascontiguousarray(X[m].T)
        d = np.empty((I, J))
        gm = np.empty((I, J))
        gz = np.empty((I, J))
        step = np.empty((I, J), dtype=np.int8)
        for n in range(N):
            _dist_into(W[n], xT, d)
            c = _dp(d, gm, gz, step)
            costs[m, n] = c
            if c < np.inf:
                _backtrack(gm, gz, step, match[m, n])


@numba.njit(cache=True)
def _min_pairwise(Q, R, out):
    # DTW cost of every (query, reference) pair, paths not kept
    A, I, _ = Q.shape
    B, J, D = R.shape
    RT = np.empty((B, D, J))
    for b in range(B):
        RT[b] = R[b].T
    d = np.empty((I, J))
    gm = np.empty((I, J))
    gz = np.empty((I, J))
    step = np.empty((I, J), dtype=np.int8)
    for a in range(A):
        for b in range(B):
            _dist_into(Q[a], RT[b], d)
            out[a, b] = _dp(d, gm, gz, step)


# -- public API ---------------------------------------------------------------

def _prep(x, name):
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"{name} must be a nonempty 2-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(arr)


def _prep_pair(weights, window):
    w, a = _prep(weights, "weights"), _prep(window, "window")
    if w.shape[1] != a.shape[1]:
        raise DimensionError(f"feature dims differ: weights {w.shape} vs window {a.shape}")
    I, J = w.shape[0], a.shape[0]
    if not feasible(I, J):
        raise InfeasibleAlignmentError(f"no constrained path for I={I}, J={J}")
    return w, a


def local_distances(p, s) -> np.ndarray:
    """Euclidean distance between every row of ``p`` (I x D) and of ``s`` (J x D)."""
    p, s = _prep(p, "p"), _prep(s, "s")
    if p.shape[1] != s.shape[1]:
        raise DimensionError(f"feature dims differ: {p.shape} vs {s.shape}")
    out = np.empty((p.shape[0], s.shape[0]))
    _dist_into(p, np.ascontiguousarray(s.T), out)
    return out


def align(weights, window) -> AlignmentPath:
    """Minimum-cost constrained alignment of ``weights`` (I x D) onto ``window`` (J x D)."""
    w, a = _prep_pair(weights, window)
    I = w.shape[0]
    costs = np.empty(1)
    match = np.zeros((1, I), dtype=np.int64)
    _align_pairs(w[None], a[None], costs, match, True)
    pairs = tuple((i + 1, int(j) + 1) for i, j in enumerate(match[0]))
    return AlignmentPath(pairs, float(costs[0]))


def dtw_distance(weights, window) -> float:
    w, a = _prep_pair(weights, window)
    costs = np.empty(1)
    dummy = np.zeros((1, 1), dtype=np.int64)
    _align_pairs(w[None], a[None], costs, dummy, False)
    return float(costs[0])


def dtw_cross(queries: np.ndarray, references: np.ndarray) -> np.ndarray:
    """DTW distances between every query (A, I, D) and reference (B, J, D)."""
    Q = np.ascontiguousarray(queries, dtype=DTYPE)
    R = np.ascontiguousarray(references, dtype=DTYPE)
    if Q.ndim != 3 or R.ndim != 3 or Q.shape[2] != R.shape[2]:
        raise DimensionError(f"dtw_cross: incompatible shapes {Q.shape} vs {R.shape}")
    if not feasible(Q.shape[1], R.shape[1]):
        raise InfeasibleAlignmentError(f"no constrained path for I={Q.shape[1]}, J={R.shape[1]}")
    out = np.empty((Q.shape[0], R.shape[0]))
    _min_pairwise(Q, R, out)
    return out


def align_bank(weights: np.ndarray, windows: np.ndarray):
    """Align every filter (N, I, D) to every window (M, J, D).

    Returns ``(costs, match)`` with shapes (M, N) and (M, N, I); ``match`` holds
    the 0-based window row matched to each weight row. Results do not depend
    on the number of threads numba uses.
    """
    W = np.ascontiguousarray(weights, dtype=DTYPE)
    X = np.ascontiguousarray(windows, dtype=DTYPE)
    if W.ndim != 3 or X.ndim != 3 or W.shape[2] != X.shape[2]:
        raise DimensionError(f"align_bank: incompatible shapes {W.shape} vs {X.shape}")
    N, I, _ = W.shape
    M, J, _ = X.shape
    if not feasible(I, J):
        raise InfeasibleAlignmentError(f"no constrained path for I={I}, J={J}")
    costs = np.empty((M, N))
    match = np.zeros((M, N, I), dtype=np.int64)
    if M and N:
        _align_bank(W, X, costs, match)
    return costs, match
