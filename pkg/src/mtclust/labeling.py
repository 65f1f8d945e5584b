"""Class-balance sets, the most-violated label search, constraint pools and label extraction."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (BalanceInfeasibleError, CountBounds, FractionalLabelMatrix, IndicatorMatrix,
                   MtclustError, decode_row, derive_count_bounds, encode_labels)

__all__ = [
    "derive_count_bounds", "is_member", "assign_with_bounds", "violation_value", "most_violated",
    "most_violated_oracle", "ConstraintPool", "pool_add", "fractional_labels", "extract_labels",
    "EnumerationGuardError", "PoolStateError", "BalanceInfeasibleError",
]

ORACLE_MAX_N = 10
ORACLE_MAX_C = 4


class EnumerationGuardError(MtclustError, ValueError):
    pass


class PoolStateError(MtclustError, RuntimeError):
    pass


def _as_array(Y):
    return np.asarray(getattr(Y, "Y", Y), dtype=float)


def is_member(Y, bounds: CountBounds) -> bool:
    Y = _as_array(Y)
    if Y.ndim != 2 or Y.shape[1] != bounds.num_classes:
        return False
    try:
        labels = [decode_row(r) for r in Y]
    except MtclustError:
        return False
    counts = np.bincount(np.asarray(labels, dtype=int), minlength=bounds.num_classes)
    return bool(np.all(counts >= bounds.lower) and np.all(counts <= bounds.upper))


def _add(a, b):
    return (a[0] + b[0], a[1] + b[1], a[2] + b[2])


def assign_with_bounds(cost, bounds: CountBounds) -> np.ndarray:
    """Exact min-cost assignment of rows to classes with per-class count bounds.

    Minimizes ``sum_j cost[j, k_j]`` subject to ``lower <= counts <= upper``. Among
    optimal assignments the lexicographically smallest label vector is returned
    (lowest class for the earliest row first).

    Successive shortest paths, one unit per row, on the residual graph compressed to
    class nodes plus a sink: moving a row from class a to b costs
    ``cost[r, b] - cost[r, a]``. Path costs are compared lexicographically as
    (lower-bound tier, float cost, tie-break key); the tier makes every class reach
    its lower bound before any free capacity is used, so the tier total is the same
    constant for every feasible assignment.
    """
    cost = np.asarray(cost, dtype=float)
    n, C = cost.shape
    if C != bounds.num_classes:
        raise ValueError(f"cost has {C} classes, bounds have {bounds.num_classes}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("costs must be finite")
    bounds.check(n)
    lower = [int(v) for v in bounds.lower]
    upper = [int(v) for v in bounds.upper]
    labels = np.full(n, -1, dtype=int)
    counts = [0] * C
    weight = [C ** (n - 1 - r) for r in range(n)]

    for j in range(n):
        # cheapest single-row move between each ordered class pair
        edges = {}
        for a in range(C):
            rows = np.flatnonzero(labels == a)
            if rows.size == 0:
                continue
            diff = cost[rows] - cost[rows, a][:, None]
            for b in range(C):
                if b == a:
                    continue
                col = diff[:, b]
                best = col.min()
                tied = rows[col == best]
                r = int(tied.max() if b > a else tied.min())
                edges[a, b] = ((0, float(best), (b - a) * weight[r]), r)

        dist = [(0, float(cost[j, k]), k * weight[j]) for k in range(C)]
        pred = [None] * C
        for _ in range(C):
            changed = False
            for (a, b), (w, _r) in edges.items():
                cand = _add(dist[a], w)
                if cand < dist[b]:
                    dist[b], pred[b] = cand, a
                    changed = True
            if not changed:
                break

        end, end_cost = None, None
        for k in range(C):
            if counts[k] < lower[k]:
                tier = -1
            elif counts[k] < upper[k]:
                tier = 0
            else:
                continue
            c = _add(dist[k], (tier, 0.0, 0))
            if end_cost is None or c < end_cost:
                end, end_cost = k, c

        path = [end]
        while pred[path[-1]] is not None:
            path.append(pred[path[-1]])
            if len(path) > C:
                raise RuntimeError("negative cycle in the assignment residual graph")
        path.reverse()
        moves = [(edges[a, b][1], b) for a, b in zip(path, path[1:])]
        labels[j] = path[0]
        for r, b in moves:
            labels[r] = b
        counts[end] += 1
    return labels


def violation_value(alpha, Y) -> float:
    """sum_{j,c} alpha_{j,c} y_{j,c}: the right-hand side of a task's envelope constraint."""
    return float(np.sum(np.asarray(alpha, dtype=float) * _as_array(Y)))


def most_violated(alpha, bounds: CountBounds, task_id: int = 0) -> IndicatorMatrix:
    """Indicator matrix in the balance set minimizing sum alpha * Y.

    Assigning row j to class k contributes ``alpha[j, k]`` up to a per-row constant
    and a positive factor, so this reduces to a count-bounded assignment.
    """
    alpha = np.asarray(alpha, dtype=float)
    labels = assign_with_bounds(alpha, bounds)
    return IndicatorMatrix(task_id, encode_labels(labels, alpha.shape[1]))


def most_violated_oracle(alpha, bounds: CountBounds, task_id: int = 0) -> IndicatorMatrix:
    """Brute-force enumeration of every labelling; small instances only.

    Compares the reduced objective ``sum_j alpha[j, k_j]`` with a correctly rounded
    sum, so mathematically equal candidates tie and the first one in lexicographic
    order wins.
    """
    alpha = np.asarray(alpha, dtype=float)
    n, C = alpha.shape
    if n > ORACLE_MAX_N or C > ORACLE_MAX_C:
        raise EnumerationGuardError(f"enumeration limited to n <= {ORACLE_MAX_N}, C <= {ORACLE_MAX_C}")
    bounds.check(n)
    lower, upper = bounds.lower.tolist(), bounds.upper.tolist()
    vals = alpha.tolist()
    best, best_val = None, None
    for assignment in itertools.product(range(C), repeat=n):
        counts = [0] * C
        for k in assignment:
            counts[k] += 1
        if any(c < lo or c > up for c, lo, up in zip(counts, lower, upper)):
            continue
        val = math.fsum(vals[j][k] for j, k in enumerate(assignment))
        if best_val is None or val < best_val:
            best, best_val = assignment, val
    return IndicatorMatrix(task_id, encode_labels(best, C))


@dataclass
class ConstraintPool:
    """Working set of indicator matrices for one task and their simplex weights."""

    task_id: int
    constraints: list = field(default_factory=list)
    mu: np.ndarray = field(default_factory=lambda: np.zeros(0))
    _keys: set = field(default_factory=set, repr=False)

    def __len__(self):
        return len(self.constraints)

    def set_weights(self, mu) -> None:
        mu = np.asarray(mu, dtype=float)
        if mu.shape != (len(self.constraints),):
            raise PoolStateError(f"{mu.size} weights for {len(self.constraints)} constraints")
        if np.any(mu < -1e-12) or abs(mu.sum() - 1.0) > 1e-9:
            raise PoolStateError("pool weights must lie on the simplex")
        mu = np.clip(mu, 0.0, 1.0)
        self.mu = mu / mu.sum()

    def normalize(self) -> None:
        if self.mu.sum() <= 0:
            self.mu = np.full(len(self.constraints), 1.0 / len(self.constraints))
        else:
            self.mu = self.mu / self.mu.sum()

    def copy(self) -> "ConstraintPool":
        return ConstraintPool(self.task_id, list(self.constraints), self.mu.copy(), set(self._keys))


def pool_add(pool: ConstraintPool, Y: IndicatorMatrix, bounds: CountBounds) -> bool:
    """Append Y with weight 0 unless already pooled; returns whether it was new."""
    if not is_member(Y, bounds):
        raise ValueError("constraint is not a member of the task's balance set")
    key = Y.key()
    if key in pool._keys:
        return False
    pool.constraints.append(Y)
    pool._keys.add(key)
    pool.mu = np.append(pool.mu, 0.0)
    return True


def fractional_labels(pool: ConstraintPool) -> FractionalLabelMatrix:
    if not pool.constraints:
        raise PoolStateError(f"pool of task {pool.task_id} is empty")
    stack = np.array([Y.Y for Y in pool.constraints])
    Yt = np.tensordot(pool.mu, stack, axes=1)
    return FractionalLabelMatrix(pool.task_id, Yt)


def extract_labels(state, context, hp) -> list:
    """Hard labels per task: argmax over classes of the multitask decision values."""
    gram = context.multitask_gram(state.covariance.matrix, hp)
    f = gram.raw @ state.alpha
    labels = np.argmax(f, axis=1)  # ties resolve to the lowest class index
    off = np.concatenate([[0], np.cumsum(context.sizes)])
    return [labels[off[i]:off[i + 1]] for i in range(context.m)]

