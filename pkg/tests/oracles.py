"""Independent reference computations used by unit and acceptance tests."""
import numpy as np


def direct_primal_minimum(Xs, Yt, Z, lambda1, lambda2, objective):
    """Minimum over explicit weights of the regularized regression objective.

    Weights are the d x m matrix W_c per class (column i is task i's weight
    vector); the covariance enters as a plain inverse. Solved through the normal
    equations of the vectorized problem, with no kernel algebra involved.
    """
    m, d = len(Xs), Xs[0].shape[1]
    Zi = np.linalg.inv(Z)
    if objective == "feature":
        reg = lambda1 * np.eye(d * m) + lambda2 * np.kron(np.eye(m), Zi)
    else:
        reg = lambda1 * np.eye(d * m) + lambda2 * np.kron(Zi, np.eye(d))
    rows, weights = [], []
    for i, X in enumerate(Xs):
        for x in X:
            r = np.zeros(d * m)
            r[i * d:(i + 1) * d] = x
            rows.append(r)
            weights.append(1.0 / len(X))
    A, w = np.array(rows), np.array(weights)
    total = 0.0
    for c in range(Yt.shape[1]):
        y = Yt[:, c]
        H = reg + 2.0 * A.T @ (w[:, None] * A)
        v = np.linalg.solve(H, 2.0 * A.T @ (w * y))
        total += 0.5 * v @ reg @ v + np.sum(w * (y - A @ v) ** 2)
    return total


def brute_force_nmi(a, b):
    """Mutual information and entropies by explicit loops over label pairs."""
    a, b = list(a), list(b)
    n = len(a)
    pa = {x: a.count(x) / n for x in set(a)}
    pb = {y: b.count(y) / n for y in set(b)}
    mi = 0.0
    for x in pa:
        for y in pb:
            pxy = sum(1 for s, t in zip(a, b) if s == x and t == y) / n
            if pxy > 0:
                mi += pxy * np.log(pxy / (pa[x] * pb[y]))
    ha = -sum(p * np.log(p) for p in pa.values())
    hb = -sum(p * np.log(p) for p in pb.values())
    if ha == 0 and hb == 0:
        return 1.0
    if ha == 0 or hb == 0:
        return 0.0
    return mi / np.sqrt(ha * hb)


def random_trace_one(rng, k):
    A = rng.normal(size=(k, k))
    S = A @ A.T + 1e-3 * np.eye(k)
    return S / np.trace(S)
