"""Independent oracles: exhaustive DTW path enumeration and finite-difference
gradient checking."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .align import align, local_distances, path_violations

MAX_ENUM = 12


class OracleRangeError(ValueError):
    pass


def enumerate_paths(I: int, J: int) -> list:
    """Every constrained path from (1, 1) to (I, J), as tuples of 1-based pairs.

    Window increments are drawn from {0, 1, 2} with no two consecutive zeros.
    """
    if not (1 <= I <= MAX_ENUM and 1 <= J <= MAX_ENUM):
        raise OracleRangeError(f"enumeration limited to 1 <= I, J <= {MAX_ENUM}, got I={I}, J={J}")
    paths = []
    for incs in itertools.product((0, 1, 2), repeat=I - 1):
        if sum(incs) != J - 1:
            continue
        if any(a == 0 and b == 0 for a, b in zip(incs, incs[1:])):
            continue
        js = [1]
        for inc in incs:
            js.append(js[-1] + inc)
        paths.append(tuple(zip(range(1, I + 1), js)))
    return paths


def path_cost(dist: np.ndarray, pairs) -> float:
    c = 0.0
    for i, j in pairs:
        c = dist[i - 1, j - 1] + c
    return c


def brute_force_dtw(weights, window):
    """Exact minimum over all enumerated paths; returns (cost, argmin paths)."""
    w = np.asarray(weights, dtype=float)
    a = np.asarray(window, dtype=float)
    w = w[:, None] if w.ndim == 1 else w
    a = a[:, None] if a.ndim == 1 else a
    I, J = w.shape[0], a.shape[0]
    paths = enumerate_paths(I, J)
    if not paths:
        return np.inf, []
    dist = local_distances(w, a)
    costs = [path_cost(dist, p) for p in paths]
    best = min(costs)
    return best, [p for p, c in zip(paths, costs) if c == best]


@dataclass
class DTWCheckRow:
    length: int  # I = J
    trials: int
    cost_mismatches: int
    invalid_paths: int
    not_argmin: int

    @property
    def passed(self) -> bool:
        return self.cost_mismatches == self.invalid_paths == self.not_argmin == 0


def dtw_oracle_check(max_len=8, trials=1000, dim=3, seed=0) -> list:
    """Compare ``align`` with exhaustive enumeration on random I = J pairs."""
    gen = np.random.default_rng(seed)
    rows = []
    for n in range(1, max_len + 1):
        paths = enumerate_paths(n, n)
        row = DTWCheckRow(n, trials, 0, 0, 0)
        for _ in range(trials):
            w, a = gen.normal(size=(n, dim)), gen.normal(size=(n, dim))
            dist = local_distances(w, a)
            costs = [path_cost(dist, p) for p in paths]
            best = min(costs)
            got = align(w, a)
            row.cost_mismatches += int(got.cost != best)
            row.invalid_paths += int(bool(path_violations(got.pairs, n, n)))
            row.not_argmin += int(got.pairs not in {p for p, c in zip(paths, costs) if c == best})
        rows.append(row)
    return rows


# -- gradient checking ----------------------------------------------------------

def rel_error(a, f):
    a = np.asarray(a, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)


@dataclass
class GroupReport:
    name: str
    max_rel_error: float
    max_abs_error: float
    worst_index: tuple
    size: int


@dataclass
class GradReport:
    threshold: float
    groups: list = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((g.max_rel_error for g in self.groups), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.threshold

    def rows(self):
        yield ("group", "size", "max_rel_error", "max_abs_error", "worst_index", "pass")
        for g in self.groups:
            yield (g.name, g.size, f"{g.max_rel_error:.3e}", f"{g.max_abs_error:.3e}",
                   ":".join(map(str, g.worst_index)), g.max_rel_error <= self.threshold)

    def render(self, sep="\t") -> str:
        return "\n".join(sep.join(str(c) for c in row) for row in self.rows())


def _loss(model, x, labels, frozen, reduction):
    from .nn import model_forward, softmax_cross_entropy
    logits, _ = model_forward(model, x, train=True, frozen=frozen, update_stats=False)
    return softmax_cross_entropy(logits, labels, reduction)[0]


def finite_diff_check(model, x, labels, h=1e-5, threshold=1e-4, freeze_alignment=True,
                      reduction="mean", precision="extended", grad_hook=None) -> GradReport:
    """Compare analytic gradients against central differences, parameter by parameter.

    The analytic pass runs in float64. Perturbed losses are evaluated in
    ``np.longdouble`` by default so that the difference quotient is not
    swamped by float64 rounding; ``precision="double"`` keeps float64.
    With ``freeze_alignment`` every DWA match set is pinned to the unperturbed
    forward pass. ``grad_hook(grads)`` may rewrite the analytic gradients
    (mutation testing).
    """
    from .nn import PARAM_ORDER, model_backward, model_forward
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h must lie in [1e-7, 1e-3], got {h}")
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    _, trace = model_forward(model, x, train=True, update_stats=False)
    _, grads = model_backward(model, trace, labels, reduction)
    if grad_hook is not None:
        grads = grad_hook(grads)
    frozen = None
    if freeze_alignment and model.config.conv_mode == "dwa":
        frozen = {1: trace["conv1"], 2: trace["conv2"]}

    dtype = np.longdouble if precision == "extended" else np.float64
    probe = model.astype(dtype)
    xp = x.astype(dtype)
    report = GradReport(threshold)
    for name in PARAM_ORDER:
        theta = probe.params[name]
        fd = np.empty(theta.shape)
        for idx in np.ndindex(theta.shape):
            orig = theta[idx]
            theta[idx] = orig + h
            up = _loss(probe, xp, labels, frozen, reduction)
            theta[idx] = orig - h
            down = _loss(probe, xp, labels, frozen, reduction)
            theta[idx] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"non-finite loss while perturbing {name}{idx}")
            fd[idx] = (up - down) / (2 * h)
        err = rel_error(grads[name], fd)
        worst = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
        report.groups.append(GroupReport(
            name, float(err.max()), float(np.abs(grads[name] - fd).max()),
            tuple(int(i) for i in worst), theta.size))
    return report
