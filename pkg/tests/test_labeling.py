import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mtclust.core import (BalanceInfeasibleError, CovarianceVariable, HyperParams, IndicatorMatrix,
                          ModelState, ObjectiveKind, TaskDataset, encode_labels)
from mtclust.kernels import KernelContext
from mtclust.labeling import (ConstraintPool, EnumerationGuardError, PoolStateError,
                              assign_with_bounds, derive_count_bounds, extract_labels,
                              fractional_labels, is_member, most_violated, most_violated_oracle,
                              pool_add, violation_value)


def test_count_bounds_examples():
    b = derive_count_bounds(10, 2, [0.2, 0.2])
    assert b.lower.tolist() == [4, 4] and b.upper.tolist() == [6, 6]
    b = derive_count_bounds(10, 2, [0, 0])
    assert b.lower.tolist() == [5, 5] and b.upper.tolist() == [5, 5]
    with pytest.raises(BalanceInfeasibleError, match="l >="):
        derive_count_bounds(10, 3, [0, 0, 0])


@given(st.integers(2, 5).flatmap(lambda C: st.tuples(
    st.just(C), st.integers(C, 40), st.floats(0, 1))))
def test_count_bounds_match_column_sum_constraint(args):
    C, n, l = args
    try:
        b = derive_count_bounds(n, C, [l] * C)
    except BalanceInfeasibleError:
        # no count vector can meet the constraint
        lo = int(np.ceil(n * (1 - l) / C - 1e-9))
        hi = int(np.floor(n * (1 + l * (C - 1)) / C + 1e-9))
        assert C * max(lo, 0) > n or C * min(hi, n) < n
        return
    for k in range(n + 1):
        colsum = (C * k - n) / (C - 1)
        ok = -l / (C - 1) - 1e-9 <= colsum / n <= l + 1e-9
        assert ok == (b.lower[0] <= k <= b.upper[0])


def test_is_member_examples():
    b = derive_count_bounds(2, 2, [0, 0])
    assert is_member(encode_labels([0, 1], 2), b)
    assert not is_member(encode_labels([0, 0], 2), b)
    assert not is_member(np.array([[0.5, 0.5], [1, -1]]), b)


def test_most_violated_examples():
    b = derive_count_bounds(2, 2, [0, 0])
    alpha = np.array([[0.9, 0.1], [0.2, 0.8]])
    Y = most_violated(alpha, b)
    assert Y.labels.tolist() == [1, 0]
    assert most_violated_oracle(alpha, b).labels.tolist() == [1, 0]
    b4 = derive_count_bounds(4, 2, [0, 0])
    assert most_violated(np.zeros((4, 2)), b4).labels.tolist() == [0, 0, 1, 1]
    free = derive_count_bounds(3, 3, [1, 1, 1])
    alpha = np.array([[0.0, 1.0, 2.0], [3.0, -1.0, 0.0], [0.5, 0.4, 0.3]])
    assert most_violated(alpha, free).labels.tolist() == [0, 1, 2]


def test_oracle_guard_and_infeasible():
    with pytest.raises(EnumerationGuardError):
        most_violated_oracle(np.zeros((11, 2)), derive_count_bounds(11, 2, [1, 1]))
    bad = derive_count_bounds(4, 2, [0, 0])
    for f in (most_violated, most_violated_oracle):
        with pytest.raises(BalanceInfeasibleError):
            f(np.zeros((5, 2)), bad)


# dyadic values keep every partial sum exact, so ties are real ties for both routes
dyadic = st.integers(-16, 16).map(lambda k: k / 8)
instances = st.integers(2, 3).flatmap(lambda C: st.tuples(
    st.integers(C, 8).flatmap(lambda n: st.one_of(
        arrays(np.float64, (n, C), elements=dyadic),
        arrays(np.float64, (n, C), elements=st.floats(-2, 2, width=32)))),
    st.sampled_from([0.0, 0.2, 1.0])))


@given(instances)
def test_most_violated_equals_oracle(inst):
    alpha, l = inst
    n, C = alpha.shape
    try:
        b = derive_count_bounds(n, C, [l] * C)
    except BalanceInfeasibleError:
        return
    fast, slow = most_violated(alpha, b), most_violated_oracle(alpha, b)
    assert violation_value(alpha, fast) == violation_value(alpha, slow)
    assert fast.labels.tolist() == slow.labels.tolist()
    assert is_member(fast, b)


@given(instances, st.floats(0.01, 100))
def test_most_violated_positive_scaling(inst, s):
    alpha, l = inst
    n, C = alpha.shape
    try:
        b = derive_count_bounds(n, C, [l] * C)
    except BalanceInfeasibleError:
        return
    a = most_violated_oracle(alpha, b).labels
    assert most_violated(alpha * 4.0, b).labels.tolist() == a.tolist()
    v1 = violation_value(alpha, most_violated(alpha, b))
    v2 = violation_value(alpha * s, most_violated(alpha * s, b))
    assert v2 == pytest.approx(s * v1, rel=1e-9, abs=1e-9)


def test_assign_with_bounds_larger_instance_against_lp(rng):
    from scipy.optimize import linprog
    n, C = 30, 3
    cost = rng.normal(size=(n, C))
    b = derive_count_bounds(n, C, [0.1] * C)
    labels = assign_with_bounds(cost, b)
    # transportation LP is totally unimodular: its optimum equals the integer optimum
    A_eq = np.kron(np.eye(n), np.ones(C))
    A_ub = np.vstack([np.kron(np.ones(n), np.eye(C)), -np.kron(np.ones(n), np.eye(C))])
    res = linprog(cost.ravel(), A_ub=A_ub, b_ub=np.concatenate([b.upper, -b.lower]),
                  A_eq=A_eq, b_eq=np.ones(n), bounds=(0, 1), method="highs")
    assert cost[np.arange(n), labels].sum() == pytest.approx(res.fun, abs=1e-9)
    counts = np.bincount(labels, minlength=C)
    assert np.all(counts >= b.lower) and np.all(counts <= b.upper)


def test_pool_examples():
    b = derive_count_bounds(2, 2, [0, 0])
    pool = ConstraintPool(0)
    Y1 = IndicatorMatrix.from_labels(0, [0, 1], 2)
    Y2 = IndicatorMatrix.from_labels(0, [1, 0], 2)
    assert pool_add(pool, Y1, b) and len(pool) == 1 and pool.mu.tolist() == [0.0]
    pool.normalize()
    assert pool.mu.tolist() == [1.0]
    assert not pool_add(pool, IndicatorMatrix.from_labels(0, [0, 1], 2), b)
    assert len(pool) == 1
    assert pool_add(pool, Y2, b)
    pool.normalize()
    assert pool.mu.sum() == pytest.approx(1.0) and len(pool.mu) == 2
    with pytest.raises(ValueError):
        pool_add(pool, IndicatorMatrix.from_labels(0, [0, 0], 2), b)
    with pytest.raises(PoolStateError):
        pool.set_weights([0.7, 0.7])


def test_fractional_examples():
    b = derive_count_bounds(2, 2, [1, 1])
    pool = ConstraintPool(0)
    pool_add(pool, IndicatorMatrix.from_labels(0, [0, 0], 2), b)
    pool.set_weights([1.0])
    np.testing.assert_array_equal(fractional_labels(pool).Y, encode_labels([0, 0], 2))
    pool_add(pool, IndicatorMatrix.from_labels(0, [0, 1], 2), b)
    pool.set_weights([0.5, 0.5])
    np.testing.assert_allclose(fractional_labels(pool).Y[1], [0, 0])
    pool.set_weights([0.75, 0.25])  # row 1: 0.75*[1,-1] + 0.25*[-1,1]
    np.testing.assert_allclose(fractional_labels(pool).Y[1], [0.5, -0.5])
    pool.set_weights([0.25, 0.75])
    np.testing.assert_allclose(fractional_labels(pool).Y[1], [-0.5, 0.5])
    with pytest.raises(PoolStateError):
        fractional_labels(ConstraintPool(1))


@given(st.lists(st.lists(st.integers(0, 2), min_size=4, max_size=4), min_size=1, max_size=5,
                unique_by=tuple), st.integers(0, 1000))
def test_fractional_rows_sum_to_zero(label_sets, seed):
    b = derive_count_bounds(4, 3, [1, 1, 1])
    pool = ConstraintPool(0)
    for labels in label_sets:
        pool_add(pool, IndicatorMatrix.from_labels(0, labels, 3), b)
    w = np.random.default_rng(seed).dirichlet(np.ones(len(pool)))
    pool.set_weights(w)
    Y = fractional_labels(pool).Y
    assert np.abs(Y.sum(1)).max() <= 1e-9
    assert Y.min() >= -0.5 - 1e-12 and Y.max() <= 1 + 1e-12


def _one_task(X, hp):
    data = TaskDataset.from_arrays([X])
    return data, KernelContext.build(data, hp)


def test_extract_labels_tie_break_and_sign():
    hp = HyperParams(1, 1, ObjectiveKind.RELATIONSHIP)
    data, ctx = _one_task(np.array([[1.0], [1.0]]), hp)
    Z = CovarianceVariable.identity(ObjectiveKind.RELATIONSHIP, 1)
    assert extract_labels(ModelState(np.zeros((2, 2)), Z), ctx, hp)[0].tolist() == [0, 0]
    alpha = np.array([[0.3, -0.3], [0.0, 0.0]])
    assert extract_labels(ModelState(alpha, Z), ctx, hp)[0].tolist() == [0, 0]
    assert extract_labels(ModelState(-alpha, Z), ctx, hp)[0].tolist() == [1, 1]


def test_extract_labels_reproduce_single_constraint_on_blobs():
    from mtclust.optimizer import solve_duals
    rng = np.random.default_rng(4)
    y = np.repeat([0, 1], 10)
    X = rng.normal(scale=0.2, size=(20, 2)) + np.where(y[:, None] == 1, 1.0, -1.0)
    hp = HyperParams(2.0 ** -6, 2.0 ** -6, ObjectiveKind.RELATIONSHIP)
    data, ctx = _one_task(X, hp)
    Z = CovarianceVariable.identity(ObjectiveKind.RELATIONSHIP, 1)
    alpha, _ = solve_duals(encode_labels(y, 2), Z, ctx, hp)
    assert extract_labels(ModelState(alpha, Z), ctx, hp)[0].tolist() == y.tolist()
