"""Clustering metrics, preprocessing and synthetic task generators."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .core import DimensionError, TaskDataset


def _contingency(a, b):
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    return table


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(pred, truth) -> float:
    """Normalized mutual information, geometric-mean normalization, natural log.

    Two constant labelings score 1; a constant labeling against a varying one scores 0.
    """
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.size != truth.size:
        raise ValueError(f"label vectors differ in length: {pred.size} vs {truth.size}")
    if pred.size == 0:
        raise ValueError("empty label vectors")
    table = _contingency(pred, truth)
    hp, ht = _entropy(table.sum(1)), _entropy(table.sum(0))
    if hp == 0.0 and ht == 0.0:
        return 1.0
    if hp == 0.0 or ht == 0.0:
        return 0.0
    n = table.sum()
    joint = table / n
    outer = np.outer(table.sum(1), table.sum(0)) / n ** 2
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / outer[nz])))
    return float(np.clip(mi / np.sqrt(hp * ht), 0.0, 1.0))


@dataclass(frozen=True)
class NmiReport:
    per_task: tuple
    mean: float

    @classmethod
    def from_labels(cls, preds: Sequence, truths: Sequence) -> "NmiReport":
        if len(preds) != len(truths):
            raise ValueError("one prediction per task required")
        vals = tuple(nmi(p, t) for p, t in zip(preds, truths))
        return cls(vals, float(np.mean(vals)))

    def as_dict(self) -> dict:
        return {"per_task": list(self.per_task), "mean": self.mean}


def normalize01(data: TaskDataset) -> TaskDataset:
    """Min-max scale every dimension over the pooled tasks; constant dimensions become 0."""
    X = data.stacked()
    lo, hi = X.min(0), X.max(0)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    Xs = [np.where(span > 0, (np.asarray(t.X) - lo) / safe, 0.0) for t in data.tasks]
    return data.with_features([np.clip(x, 0.0, 1.0) for x in Xs])


def pca_project(data: TaskDataset, target_dim: int) -> TaskDataset:
    if not 1 <= target_dim <= data.d:
        raise DimensionError(f"target_dim {target_dim} outside [1, {data.d}]")
    X = data.stacked()
    mean = X.mean(0)
    Xc = X - mean
    w, V = linalg.eigh(Xc.T @ Xc / max(X.shape[0], 1))
    P = V[:, np.argsort(w)[::-1][:target_dim]]
    return data.with_features([(np.asarray(t.X) - mean) @ P for t in data.tasks])


@dataclass(frozen=True)
class SyntheticSpec:
    m: int = 3
    n: int = 100
    d: int = 2
    num_classes: int = 2
    seed: int = 0
    mean_range: tuple = (0.0, 1.0)
    var_range: tuple = (0.5, 5.0)
    means: Optional[np.ndarray] = field(default=None, compare=False)  # (m, C, d) override
    variances: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        if self.n % self.num_classes:
            raise ValueError(f"n={self.n} is not divisible by {self.num_classes} classes")
        if self.m < 1 or self.d < 1 or self.num_classes < 2:
            raise ValueError("need m >= 1, d >= 1 and at least two classes")
        lo, hi = self.var_range
        if not 0 < lo <= hi:
            raise ValueError("variance range must be positive and ordered")


def synthetic_parameters(spec: SyntheticSpec, rng=None):
    """Means and variances, each of shape (m, C, d), after applying any overrides."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    shape = (spec.m, spec.num_classes, spec.d)
    means = rng.uniform(*spec.mean_range, size=shape)
    var = rng.uniform(*spec.var_range, size=shape)
    if spec.means is not None:
        means = np.broadcast_to(np.asarray(spec.means, dtype=float), shape)
    if spec.variances is not None:
        var = np.broadcast_to(np.asarray(spec.variances, dtype=float), shape)
        if np.any(var < spec.var_range[0]) or np.any(var > spec.var_range[1]):
            raise ValueError("override variances outside the allowed range")
    return means, var


def generate_synthetic(spec: SyntheticSpec) -> TaskDataset:
    """Per task, class and dimension independent Gaussians; classes exactly balanced."""
    rng = np.random.default_rng(spec.seed)
    means, var = synthetic_parameters(spec, rng)
    per = spec.n // spec.num_classes
    Xs, ys = [], []
    for i in range(spec.m):
        y = np.repeat(np.arange(spec.num_classes), per)
        X = means[i][y] + np.sqrt(var[i][y]) * rng.standard_normal((spec.n, spec.d))
        Xs.append(X)
        ys.append(y)
    return TaskDataset.from_arrays(Xs, ys, spec.num_classes)


@dataclass(frozen=True)
class GroupedTaskSpec:
    """Tasks sampled from a labeled source: each group is a set of source classes."""

    X: np.ndarray
    y: np.ndarray
    groups: tuple = ((0, 1), (2, 3))
    count: int = 20
    repeats: int = 3
    seed: int = 0

    def __post_init__(self):
        flat = [c for g in self.groups for c in g]
        if len(set(flat)) != len(flat):
            raise ValueError("class groups must be disjoint")
        sizes = {len(g) for g in self.groups}
        if len(sizes) != 1 or sizes.pop() < 2:
            raise ValueError("every group needs the same number (>= 2) of classes")
        if len(self.X) != len(self.y):
            raise ValueError("source features and labels differ in length")
        y = np.asarray(self.y)
        for c in flat:
            have = int(np.sum(y == c))
            if have < self.count:
                raise ValueError(f"class {c} has {have} observations, {self.count} requested")


def generate_grouped_tasks(spec: GroupedTaskSpec) -> TaskDataset:
    """Group-major tasks; task labels are positions of the source class within its group."""
    rng = np.random.default_rng(spec.seed)
    X, y = np.asarray(spec.X, dtype=float), np.asarray(spec.y)
    Xs, ys = [], []
    for group in spec.groups:
        for _ in range(spec.repeats):
            rows, labels = [], []
            for k, c in enumerate(group):
                pick = rng.choice(np.flatnonzero(y == c), size=spec.count, replace=False)
                rows.append(pick)
                labels.append(np.full(spec.count, k))
            Xs.append(X[np.concatenate(rows)])
            ys.append(np.concatenate(labels))
    return TaskDataset.from_arrays(Xs, ys, len(spec.groups[0]))


def gaussian_source(num_classes: int, per_class: int, d: int, separation: float,
                    seed: int = 0):
    """Labeled source with class means ~ N(0, separation^2 I) and unit isotropic noise."""
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(num_classes, d)) * separation
    y = np.repeat(np.arange(num_classes), per_class)
    X = means[y] + rng.standard_normal((y.size, d))
    return X, y
