"""Base Gram matrices, explicit feature maps and the two multitask kernels.

The feature-learning kernel couples only observations of the same task:
``x_p' D (l1 D + l2 I)^-1 x_q``. The relationship kernel scales the base kernel
by the task-pair entry of ``Omega (l1 Omega + l2 I)^-1``. Both are returned with
``Lambda/2`` added on the diagonal, where Lambda holds the owning task's size.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.spatial.distance import pdist

from .core import (BaseKernelSpec, DimensionError, HyperParams, KernelKind, MtclustError,
                   ObjectiveKind, TaskDataset)


class NotPSDError(MtclustError, ValueError):
    pass


def _sq_dists(A, B):
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def kernel_matrix(A, B, spec: BaseKernelSpec) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if spec.kind is KernelKind.LINEAR:
        return A @ B.T
    return np.exp(-_sq_dists(A, B) / (2.0 * spec.width ** 2))


def base_gram(data: TaskDataset, spec: BaseKernelSpec) -> np.ndarray:
    X = data.stacked()
    K = kernel_matrix(X, X, spec)
    return 0.5 * (K + K.T)


def default_rbf_width(data: TaskDataset) -> float:
    """Mean pairwise Euclidean distance over the pooled observations."""
    X = data.stacked()
    if X.shape[0] < 2:
        raise ValueError("need at least two observations to average distances")
    return float(pdist(X).mean())


@dataclass(frozen=True)
class FeatureMap:
    """Explicit features Phi (N x r) with Phi Phi' ~= base Gram."""

    Phi: np.ndarray
    eigenvalues: np.ndarray
    dropped: np.ndarray

    @property
    def rank(self) -> int:
        return self.Phi.shape[1]

    @property
    def truncation_error(self) -> float:
        return float(np.sqrt(np.sum(self.dropped ** 2)))


def factorize_gram(gram, rank_cap: int) -> FeatureMap:
    G = np.asarray(gram, dtype=float)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise DimensionError(f"Gram matrix must be square, got {G.shape}")
    if np.abs(G - G.T).max(initial=0.0) > 1e-8 * max(1.0, np.abs(G).max(initial=0.0)):
        raise NotPSDError("Gram matrix is not symmetric")
    w, V = linalg.eigh(0.5 * (G + G.T))
    top = max(w.max(initial=0.0), 0.0)
    if w.min(initial=0.0) < -1e-6 * max(top, 1e-300):
        raise NotPSDError(f"Gram matrix has eigenvalue {w.min():.3g}")
    order = np.argsort(w)[::-1]
    w, V = w[order], V[:, order]
    keep = np.flatnonzero(w > 1e-10)[:rank_cap]
    dropped = np.delete(np.maximum(w, 0.0), keep)
    Phi = V[:, keep] * np.sqrt(w[keep])
    return FeatureMap(Phi, w[keep], dropped)


def covariance_transform(Z, lambda1: float, lambda2: float) -> np.ndarray:
    """``Z (lambda1 Z + lambda2 I)^-1`` through the eigendecomposition of Z."""
    w, V = linalg.eigh(np.asarray(Z, dtype=float))
    w = np.maximum(w, 0.0)
    denom = lambda1 * w + lambda2
    if np.any(denom <= 0):
        raise np.linalg.LinAlgError("lambda1 Z + lambda2 I is singular")
    T = (V * (w / denom)) @ V.T
    return 0.5 * (T + T.T)


@dataclass(frozen=True)
class MultitaskGram:
    K: np.ndarray  # regularized: base multitask kernel + Lambda/2
    objective: ObjectiveKind
    covariance: np.ndarray
    lambda_diag: np.ndarray

    @property
    def raw(self) -> np.ndarray:
        """Multitask kernel without the Lambda/2 ridge."""
        return self.K - np.diag(0.5 * self.lambda_diag)


def _regularize(Kmt, task_index, sizes):
    lam = np.asarray(sizes, dtype=float)[task_index]
    K = Kmt.copy()
    K[np.diag_indices_from(K)] += 0.5 * lam
    return K, lam


def _expand_tasks(R, task_index, sizes):
    """N x N matrix with entry R[task(p), task(q)]."""
    if np.all(np.diff(task_index) >= 0):
        return np.repeat(np.repeat(R, sizes, axis=0), sizes, axis=1)
    return R[np.ix_(task_index, task_index)]


def multitask_gram_feature(features, task_index, D, hp: HyperParams) -> MultitaskGram:
    """Feature-learning kernel on explicit features (raw X, or Phi for nonlinear kernels)."""
    F = np.asarray(getattr(features, "Phi", features), dtype=float)
    D = np.asarray(getattr(D, "matrix", D), dtype=float)
    task_index = np.asarray(task_index)
    if D.shape != (F.shape[1], F.shape[1]):
        raise DimensionError(f"D is {D.shape} but features have dimension {F.shape[1]}")
    if F.shape[0] != task_index.size:
        raise DimensionError("task index length differs from number of observations")
    M = covariance_transform(D, hp.lambda1, hp.lambda2)
    same = task_index[:, None] == task_index[None, :]
    Kmt = np.where(same, F @ M @ F.T, 0.0)
    Kmt = 0.5 * (Kmt + Kmt.T)
    sizes = np.bincount(task_index)
    K, lam = _regularize(Kmt, task_index, sizes)
    return MultitaskGram(K, ObjectiveKind.FEATURE, D, lam)


def multitask_gram_relationship(gram_base, Omega, task_index, hp: HyperParams) -> MultitaskGram:
    G = np.asarray(gram_base, dtype=float)
    Om = np.asarray(getattr(Omega, "matrix", Omega), dtype=float)
    task_index = np.asarray(task_index)
    m = int(task_index.max()) + 1
    if Om.shape != (m, m):
        raise DimensionError(f"Omega is {Om.shape} but there are {m} tasks")
    if G.shape != (task_index.size, task_index.size):
        raise DimensionError(f"base Gram is {G.shape} for {task_index.size} observations")
    R = covariance_transform(Om, hp.lambda1, hp.lambda2)
    sizes = np.bincount(task_index, minlength=m)
    K = _expand_tasks(R, task_index, sizes)
    K *= G  # R and G are symmetric, so the product is too
    lam = sizes.astype(float)[task_index]
    K[np.diag_indices_from(K)] += 0.5 * lam
    return MultitaskGram(K, ObjectiveKind.RELATIONSHIP, Om, lam)


@dataclass(frozen=True)
class KernelContext:
    """Per-run cache: explicit features (feature objective) or the base Gram (relationship)."""

    objective: ObjectiveKind
    task_index: np.ndarray
    sizes: np.ndarray
    features: Optional[np.ndarray] = None
    gram: Optional[np.ndarray] = None
    feature_map: Optional[FeatureMap] = None

    @classmethod
    def build(cls, data: TaskDataset, hp: HyperParams) -> "KernelContext":
        ti, sizes = data.task_index, data.sizes
        if hp.objective is ObjectiveKind.RELATIONSHIP:
            return cls(hp.objective, ti, sizes, gram=base_gram(data, hp.kernel))
        if hp.kernel.kind is KernelKind.LINEAR:
            return cls(hp.objective, ti, sizes, features=data.stacked())
        fmap = factorize_gram(base_gram(data, hp.kernel), hp.rank_cap)
        return cls(hp.objective, ti, sizes, features=fmap.Phi, feature_map=fmap)

    @property
    def m(self) -> int:
        return self.sizes.size

    @property
    def cov_size(self) -> int:
        return self.features.shape[1] if self.objective is ObjectiveKind.FEATURE else self.m

    def multitask_gram(self, Z, hp: HyperParams) -> MultitaskGram:
        if self.objective is ObjectiveKind.FEATURE:
            return multitask_gram_feature(self.features, self.task_index, Z, hp)
        return multitask_gram_relationship(self.gram, Z, self.task_index, hp)

    def task_sums(self, alpha) -> np.ndarray:
        """A[:, i, c] = sum_j alpha^i_{j,c} f(x^i_j) for explicit features f (r x m x C)."""
        alpha = np.asarray(alpha, dtype=float)
        E = np.eye(self.m)[self.task_index]  # N x m
        return np.einsum("pr,pi,pc->ric", self.features, E, alpha)

    def task_grams(self, alpha) -> np.ndarray:
        """G[c] = A_c' A_c (m x m) computed through the base Gram."""
        alpha = np.asarray(alpha, dtype=float)
        E = np.eye(self.m)[self.task_index]
        out = []
        for c in range(alpha.shape[1]):
            B = alpha[:, c, None] * E  # N x m
            G = B.T @ self.gram @ B
            out.append(0.5 * (G + G.T))
        return np.array(out)


def weight_scatter(ctx: KernelContext, alpha, Z, hp: HyperParams) -> np.ndarray:
    """sum_c W_c W_c' (feature, d x d) or sum_c W_c' W_c (relationship, m x m) from alpha and Z."""
    T = covariance_transform(Z, hp.lambda1, hp.lambda2)
    if ctx.objective is ObjectiveKind.FEATURE:
        A = ctx.task_sums(alpha)
        W = np.einsum("rs,sic->ric", T, A)
        S = np.einsum("ric,sic->rs", W, W)
    else:
        G = ctx.task_grams(alpha)
        S = np.einsum("ij,cjk,kl->il", T, G, T)
    return 0.5 * (S + S.T)


def _pinv_psd(Z):
    w, V = linalg.eigh(np.asarray(Z, dtype=float))
    cut = max(w.max(initial=0.0), 0.0) * Z.shape[0] * np.finfo(float).eps
    inv = np.where(w > cut, 1.0 / np.where(w > cut, w, 1.0), 0.0)
    return (V * inv) @ V.T


def recover_weight_terms(ctx: KernelContext, alpha, Z, hp: HyperParams):
    """(sum_c ||W_c||_F^2, sum_c <W_c, Z^+ W_c>, predictions N x C) for the weights implied by alpha."""
    Z = np.asarray(Z, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    T = covariance_transform(Z, hp.lambda1, hp.lambda2)
    Zp = _pinv_psd(Z)
    if ctx.objective is ObjectiveKind.FEATURE:
        A = ctx.task_sums(alpha)
        W = np.einsum("rs,sic->ric", T, A)  # W[:, i, c] = w_{i,c}
        sq = float(np.sum(W ** 2))
        cov = float(np.einsum("ric,rs,sic->", W, Zp, W))
        pred = np.einsum("pr,rpc->pc", ctx.features, W[:, ctx.task_index, :])
    else:
        G = ctx.task_grams(alpha)  # A_c' A_c; W_c = A_c T
        TGT = np.einsum("ij,cjk,kl->cil", T, G, T)  # W_c' W_c
        sq = float(np.einsum("cii->", TGT))
        cov = float(np.einsum("ij,cji->", Zp, TGT))
        Kmt = _expand_tasks(T, ctx.task_index, ctx.sizes) * ctx.gram
        pred = Kmt @ alpha
    return sq, cov, pred
