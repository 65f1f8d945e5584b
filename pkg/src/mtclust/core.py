"""Shared domain types, the label code, hyperparameters and the relaxed primal objective.

Observations are always stacked task-major, then row-major. Every stacked
vector (dual variables, rows of the multitask Gram matrix, fractional labels)
follows that order.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

SYM_TOL = 1e-12
PSD_TOL = 1e-9
TRACE_TOL = 1e-9
CODE_TOL = 1e-9


class MtclustError(Exception):
    """Base class for all library errors."""


class MalformedIndicatorError(MtclustError, ValueError):
    pass


class BalanceInfeasibleError(MtclustError, ValueError):
    pass


class DimensionError(MtclustError, ValueError):
    pass


class ObjectiveKind(str, enum.Enum):
    FEATURE = "feature"  # shared feature covariance D
    RELATIONSHIP = "relationship"  # task covariance Omega


class KernelKind(str, enum.Enum):
    LINEAR = "linear"
    RBF = "rbf"


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ObservationBlock:
    task_id: int
    X: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        X = _frozen(self.X)
        if X.ndim != 2:
            raise DimensionError(f"task {self.task_id}: features must be 2-d, got shape {X.shape}")
        object.__setattr__(self, "X", X)
        if self.labels is not None:
            y = _frozen(self.labels, dtype=int)
            if y.shape != (X.shape[0],):
                raise DimensionError(f"task {self.task_id}: {y.shape[0]} labels for {X.shape[0]} rows")
            object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True)
class TaskDataset:
    """m tasks sharing a feature dimension d."""

    tasks: tuple
    num_classes: Optional[int] = None

    def __post_init__(self):
        tasks = tuple(self.tasks)
        if not tasks:
            raise DimensionError("dataset has no tasks")
        d = tasks[0].X.shape[1]
        if d < 1:
            raise DimensionError("feature dimension must be >= 1")
        for i, t in enumerate(tasks):
            if t.task_id != i:
                raise DimensionError(f"task ids must be 0..m-1 in order, got {t.task_id} at {i}")
            if t.X.shape[1] != d:
                raise DimensionError(f"task {i} has dimension {t.X.shape[1]}, task 0 has {d}")
        object.__setattr__(self, "tasks", tasks)
        C = self.num_classes
        if C is not None:
            for t in tasks:
                if t.n < C:
                    raise DimensionError(f"task {t.task_id} has {t.n} rows < C={C}")
                if t.labels is not None and (t.labels.min() < 0 or t.labels.max() >= C):
                    raise DimensionError(f"task {t.task_id}: truth labels outside 0..{C - 1}")

    @classmethod
    def from_arrays(cls, Xs: Sequence, labels: Optional[Sequence] = None, num_classes=None):
        labels = labels if labels is not None else [None] * len(Xs)
        blocks = [ObservationBlock(i, X, y) for i, (X, y) in enumerate(zip(Xs, labels))]
        return cls(tuple(blocks), num_classes)

    @property
    def m(self) -> int:
        return len(self.tasks)

    @property
    def d(self) -> int:
        return self.tasks[0].X.shape[1]

    @property
    def sizes(self) -> np.ndarray:
        return np.array([t.n for t in self.tasks])

    @property
    def N(self) -> int:
        return int(self.sizes.sum())

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)])

    @property
    def task_index(self) -> np.ndarray:
        """Owning task of every stacked observation."""
        return np.repeat(np.arange(self.m), self.sizes)

    @property
    def has_labels(self) -> bool:
        return all(t.labels is not None for t in self.tasks)

    def stacked(self) -> np.ndarray:
        return np.vstack([t.X for t in self.tasks])

    def truth(self) -> list:
        return [t.labels for t in self.tasks]

    def split(self, stacked: np.ndarray) -> list:
        off = self.offsets
        return [stacked[off[i]:off[i + 1]] for i in range(self.m)]

    def with_features(self, Xs: Sequence) -> "TaskDataset":
        blocks = [ObservationBlock(t.task_id, X, t.labels) for t, X in zip(self.tasks, Xs)]
        return TaskDataset(tuple(blocks), self.num_classes)

    def subset(self, task_ids: Sequence[int]) -> "TaskDataset":
        blocks = [ObservationBlock(k, self.tasks[i].X, self.tasks[i].labels)
                  for k, i in enumerate(task_ids)]
        return TaskDataset(tuple(blocks), self.num_classes)


def encode_label(class_index: int, C: int) -> np.ndarray:
    """Code vector with 1 at `class_index` and -1/(C-1) elsewhere."""
    if C < 2:
        raise ValueError(f"need C >= 2, got {C}")
    if not 0 <= class_index < C:
        raise ValueError(f"class index {class_index} outside 0..{C - 1}")
    v = np.full(C, -1.0 / (C - 1))
    v[class_index] = 1.0
    return v


def encode_labels(labels, C: int) -> np.ndarray:
    """Indicator matrix (n x C) for a vector of class indices."""
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels outside 0..{C - 1}")
    Y = np.full((labels.size, C), -1.0 / (C - 1))
    Y[np.arange(labels.size), labels] = 1.0
    return Y


def decode_row(row) -> int:
    row = np.asarray(row, dtype=float)
    C = row.size
    if C < 2:
        raise MalformedIndicatorError("code rows need at least two entries")
    ones = np.flatnonzero(np.abs(row - 1.0) <= CODE_TOL)
    if ones.size != 1:
        raise MalformedIndicatorError(f"row {row.tolist()} has {ones.size} entries equal to 1")
    k = int(ones[0])
    if np.abs(row - encode_label(k, C)).max() > CODE_TOL:
        raise MalformedIndicatorError(f"row {row.tolist()} is not a legal code vector")
    return k


def decode_matrix(Y) -> np.ndarray:
    return np.array([decode_row(r) for r in np.asarray(Y)], dtype=int)


def is_legal_code(row) -> bool:
    try:
        decode_row(row)
    except MalformedIndicatorError:
        return False
    return True


@dataclass(frozen=True)
class IndicatorMatrix:
    task_id: int
    Y: np.ndarray

    def __post_init__(self):
        Y = _frozen(self.Y)
        if Y.ndim != 2 or Y.shape[1] < 2:
            raise MalformedIndicatorError(f"indicator must be n x C with C >= 2, got {Y.shape}")
        decode_matrix(Y)
        object.__setattr__(self, "Y", Y)

    @classmethod
    def from_labels(cls, task_id: int, labels, C: int) -> "IndicatorMatrix":
        return cls(task_id, encode_labels(labels, C))

    @property
    def labels(self) -> np.ndarray:
        return self.Y.argmax(axis=1)

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.Y.shape[1])

    def key(self) -> bytes:
        return self.labels.astype(np.int64).tobytes()


@dataclass(frozen=True)
class FractionalLabelMatrix:
    """Convex combination of indicator matrices for one task."""

    task_id: int
    Y: np.ndarray

    def __post_init__(self):
        Y = _frozen(self.Y)
        C = Y.shape[1]
        if np.abs(Y.sum(axis=1)).max(initial=0.0) > CODE_TOL:
            raise MalformedIndicatorError("fractional label rows must sum to 0")
        lo = -1.0 / (C - 1)
        if Y.min(initial=0.0) < lo - CODE_TOL or Y.max(initial=0.0) > 1 + CODE_TOL:
            raise MalformedIndicatorError("fractional label entries outside [-1/(C-1), 1]")
        object.__setattr__(self, "Y", Y)


@dataclass(frozen=True)
class CountBounds:
    """Inclusive per-class row-count bounds for one task."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = _frozen(self.lower, dtype=int)
        up = _frozen(self.upper, dtype=int)
        if lo.shape != up.shape or lo.ndim != 1:
            raise DimensionError("lower and upper bounds must be equal-length vectors")
        if np.any(lo > up) or np.any(lo < 0):
            raise BalanceInfeasibleError(f"bounds lower={lo.tolist()} upper={up.tolist()} are inconsistent")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)

    @property
    def num_classes(self) -> int:
        return self.lower.size

    def feasible(self, n: int) -> bool:
        return self.lower.sum() <= n <= self.upper.sum()

    def check(self, n: int) -> None:
        if not self.feasible(n):
            raise BalanceInfeasibleError(
                f"no assignment of {n} rows fits lower={self.lower.tolist()} upper={self.upper.tolist()}")


def derive_count_bounds(n: int, C: int, l) -> CountBounds:
    """Per-class count bounds equivalent to the column-sum balance constraint.

    A class holding ``k`` of the ``n`` rows has column sum ``(C k - n)/(C-1)``, so
    ``-l/(C-1) <= colsum/n <= l`` becomes ``n(1-l)/C <= k <= n(1+l(C-1))/C``.
    """
    l = np.broadcast_to(np.asarray(l, dtype=float), (C,))
    if n < C:
        raise BalanceInfeasibleError(f"n={n} rows cannot host C={C} classes")
    if np.any(l < 0) or np.any(l > 1):
        raise ValueError(f"balance slack must lie in [0, 1], got {l.tolist()}")
    eps = 1e-9  # guard ceil/floor against representation error in n*l
    lower = np.array([math.ceil(n * (1 - lc) / C - eps) for lc in l], dtype=int)
    upper = np.array([math.floor(n * (1 + lc * (C - 1)) / C + eps) for lc in l], dtype=int)
    lower = np.maximum(lower, 0)
    upper = np.minimum(upper, n)
    if lower.sum() > n or upper.sum() < n:
        need = _minimal_feasible_slack(n, C)
        raise BalanceInfeasibleError(
            f"balance bounds infeasible for n={n}, C={C}, l={l.tolist()} "
            f"(lower sum {lower.sum()}, upper sum {upper.sum()}); "
            f"a uniform l >= {need:.4g} is feasible")
    return CountBounds(lower, upper)


def _minimal_feasible_slack(n: int, C: int) -> float:
    # smallest uniform l for which ceil-based lower bounds fit inside n
    r = n % C
    if r == 0:
        return 0.0
    # need n(1-l)/C <= floor(n/C) and n(1+l(C-1))/C >= ceil(n/C)
    a = 1 - C * (n // C) / n
    b = (C * (n // C + 1) / n - 1) / (C - 1)
    return max(a, b)


@dataclass(frozen=True)
class BalanceSpec:
    """Per-task, per-class balance slack with derived count bounds."""

    l: np.ndarray
    sizes: np.ndarray
    lower: np.ndarray = field(init=False)
    upper: np.ndarray = field(init=False)

    def __post_init__(self):
        l = _frozen(self.l)
        sizes = _frozen(self.sizes, dtype=int)
        if l.ndim != 2 or l.shape[0] != sizes.size:
            raise DimensionError(f"slack must be m x C with m={sizes.size}, got {l.shape}")
        C = l.shape[1]
        rows = [derive_count_bounds(int(n), C, l[i]) for i, n in enumerate(sizes)]
        lo = [b.lower for b in rows]
        up = [b.upper for b in rows]
        object.__setattr__(self, "l", l)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "lower", _frozen(np.array(lo), dtype=int))
        object.__setattr__(self, "upper", _frozen(np.array(up), dtype=int))

    @classmethod
    def uniform(cls, l: float, sizes, C: int) -> "BalanceSpec":
        sizes = np.asarray(sizes, dtype=int)
        return cls(np.full((sizes.size, C), float(l)), sizes)

    @property
    def num_classes(self) -> int:
        return self.l.shape[1]

    def bounds(self, i: int) -> CountBounds:
        return CountBounds(self.lower[i], self.upper[i])


@dataclass(frozen=True)
class BaseKernelSpec:
    kind: KernelKind = KernelKind.LINEAR
    width: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", KernelKind(self.kind))
        if self.kind is KernelKind.RBF:
            if self.width is None or not self.width > 0:
                raise ValueError(f"RBF width must be positive, got {self.width}")


@dataclass(frozen=True)
class HyperParams:
    lambda1: float
    lambda2: float
    objective: ObjectiveKind = ObjectiveKind.RELATIONSHIP
    kernel: BaseKernelSpec = BaseKernelSpec()
    num_classes: int = 2
    rank_cap: int = 100  # explicit feature map size for the nonlinear feature objective

    def __post_init__(self):
        object.__setattr__(self, "objective", ObjectiveKind(self.objective))
        if not (self.lambda1 > 0 and self.lambda2 > 0):
            raise ValueError(f"lambda1, lambda2 must be positive, got {self.lambda1}, {self.lambda2}")
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.rank_cap < 1:
            raise ValueError("rank_cap must be >= 1")


@dataclass(frozen=True)
class CovarianceVariable:
    """Unit-trace PSD matrix: feature covariance D (d x d) or task covariance Omega (m x m)."""

    kind: ObjectiveKind
    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "kind", ObjectiveKind(self.kind))
        Z = _frozen(self.matrix)
        if Z.ndim != 2 or Z.shape[0] != Z.shape[1]:
            raise DimensionError(f"covariance must be square, got {Z.shape}")
        if np.abs(Z - Z.T).max() > SYM_TOL:
            raise ValueError("covariance is not symmetric")
        if np.linalg.eigvalsh(Z).min() < -PSD_TOL:
            raise ValueError("covariance is not positive semidefinite")
        if abs(np.trace(Z) - 1.0) > TRACE_TOL:
            raise ValueError(f"covariance trace {np.trace(Z)} != 1")
        object.__setattr__(self, "matrix", Z)

    @classmethod
    def identity(cls, kind, size: int) -> "CovarianceVariable":
        return cls(kind, np.eye(size) / size)

    @classmethod
    def normalized(cls, kind, A) -> "CovarianceVariable":
        """Symmetrize, then scale to unit trace."""
        A = np.asarray(A, dtype=float)
        A = 0.5 * (A + A.T)
        return cls(kind, A / np.trace(A))

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class ModelState:
    """Dual variables (N x C, one column per class) and the covariance that built the kernel."""

    alpha: np.ndarray
    covariance: CovarianceVariable

    def __post_init__(self):
        a = _frozen(self.alpha)
        if a.ndim != 2:
            raise DimensionError(f"alpha must be N x C, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("alpha has non-finite entries")
        object.__setattr__(self, "alpha", a)


def stack_fractional(fractional: Sequence) -> np.ndarray:
    return np.vstack([np.asarray(getattr(f, "Y", f)) for f in fractional])


def eval_primal_objective(state: ModelState, fractional: Sequence, data: TaskDataset,
                          hp: HyperParams, context=None) -> float:
    """Relaxed primal value at the weights implied by ``state``.

    Sum over classes of ``lambda1/2 ||W_c||^2 + lambda2/2 <W_c, Z^+ W_c>`` plus the
    per-task mean squared residual against the fractional labels.
    """
    from .kernels import KernelContext, recover_weight_terms

    ctx = context if context is not None else KernelContext.build(data, hp)
    Yt = stack_fractional(fractional)
    if Yt.shape != state.alpha.shape:
        raise DimensionError(f"fractional labels {Yt.shape} vs alpha {state.alpha.shape}")
    if state.covariance.kind is not hp.objective:
        raise DimensionError("covariance kind does not match the objective")
    sq_norm, cov_norm, pred = recover_weight_terms(ctx, state.alpha, state.covariance.matrix, hp)
    w = 1.0 / ctx.sizes[ctx.task_index]
    loss = float(np.sum(w[:, None] * (Yt - pred) ** 2))
    return 0.5 * hp.lambda1 * sq_norm + 0.5 * hp.lambda2 * cov_norm + loss
