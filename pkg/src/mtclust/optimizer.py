"""Three-level solver: cutting planes over label pools, a level method over pool
weights, and alternation between dual solves and the covariance closed form.

Both objectives share the code path; they differ only in the multitask kernel and
in which covariance (features D or tasks Omega) the alternation updates.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import linalg, optimize

from .core import (BalanceSpec, CovarianceVariable, HyperParams, IndicatorMatrix, ModelState,
                   MtclustError, TaskDataset, encode_labels, eval_primal_objective)
from .kernels import KernelContext, weight_scatter
from .labeling import (ConstraintPool, assign_with_bounds, extract_labels, fractional_labels,
                       is_member, most_violated, pool_add, violation_value)

log = logging.getLogger(__name__)


class NumericalError(MtclustError, RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    eps_cpa: float = 1e-3
    eps_elm: float = 1e-3
    level_tau: float = 0.9
    max_outer: int = 50
    max_elm: int = 100
    max_alt: int = 50
    alt_tol: float = 1e-6
    cov_epsilon: float = 1e-8
    init_label_seed: int = 0
    kmeans_restarts: int = 10
    fix_covariance: bool = False  # single-task specialization keeps Z at its initial value
    alt_extrapolate: bool = False  # faster, but the primal alone may then rise slightly
    track_primal: bool = True
    # "integer": report the outer iterate whose hard labels score lowest on the
    # unrelaxed objective; "final": report the last iterate
    select_iterate: str = "integer"

    def __post_init__(self):
        if self.select_iterate not in ("integer", "final"):
            raise ValueError("select_iterate must be 'integer' or 'final'")
        for name in ("eps_cpa", "eps_elm", "alt_tol", "cov_epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.level_tau < 1:
            raise ValueError("level_tau must lie in (0, 1)")
        for name in ("max_outer", "max_elm", "max_alt", "kmeans_restarts"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class CovarianceAudit:
    """Worst invariant deviations over every covariance iterate of a run."""

    count: int = 0
    max_asymmetry: float = 0.0
    min_eigenvalue: float = np.inf
    max_trace_error: float = 0.0

    def record(self, Z: np.ndarray) -> None:
        self.count += 1
        self.max_asymmetry = max(self.max_asymmetry, float(np.abs(Z - Z.T).max()))
        self.min_eigenvalue = min(self.min_eigenvalue, float(np.linalg.eigvalsh(Z).min()))
        self.max_trace_error = max(self.max_trace_error, abs(float(np.trace(Z)) - 1.0))

    def as_dict(self) -> dict:
        return {"count": self.count, "max_asymmetry": self.max_asymmetry,
                "min_eigenvalue": self.min_eigenvalue, "max_trace_error": self.max_trace_error}


@dataclass
class ElmRecord:
    slopes: list = field(default_factory=list)  # gradient of each linearization in mu
    offsets: list = field(default_factory=list)
    ub: float = np.inf
    lb: float = -np.inf
    gaps: list = field(default_factory=list)
    iterations: int = 0
    fallbacks: int = 0


@dataclass
class SolverState:
    pools: list
    model: ModelState
    theta: np.ndarray
    bounds: list
    elm: ElmRecord = field(default_factory=ElmRecord)
    trace: list = field(default_factory=list)
    outer_values: list = field(default_factory=list)
    elm_history: list = field(default_factory=list)
    audit: CovarianceAudit = field(default_factory=CovarianceAudit)
    outer_iter: int = 0


@dataclass
class AlternationResult:
    alpha: np.ndarray
    covariance: CovarianceVariable
    value: float
    values: list
    primal: list
    iterations: int
    converged: bool


@dataclass
class ClusteringResult:
    labels: list
    covariance: CovarianceVariable
    trace: list
    outer_values: list
    elm_history: list
    converged: bool
    n_outer: int
    seconds: float
    audit: dict
    pool_sizes: list
    integer_values: list = field(default_factory=list)
    selected_outer: int = 0
    pool_membership: bool = True  # every constraint ever pooled lies in its balance set
    nmi: Optional[object] = None
    state: Optional[SolverState] = field(default=None, repr=False)


def stacked_fractional(pools) -> np.ndarray:
    return np.vstack([fractional_labels(p).Y for p in pools])


def solve_duals(Yt, Z, context: KernelContext, hp: HyperParams):
    """alpha_c = K~^-1 y~_c for all classes with one Cholesky factor; also returns the dual value."""
    gram = context.multitask_gram(np.asarray(getattr(Z, "matrix", Z)), hp)
    try:
        factor = linalg.cho_factor(gram.K, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"multitask Gram matrix is not positive definite: {exc}") from exc
    Yt = np.asarray(Yt, dtype=float)
    alpha = linalg.cho_solve(factor, Yt, check_finite=False)
    value = 0.5 * float(np.sum(Yt * alpha))
    return alpha, value


def update_covariance(alpha, Z_prev, context: KernelContext, hp: HyperParams,
                      config: SolverConfig) -> CovarianceVariable:
    """Closed form: Z = (S + eps I)^(1/2) / tr(.), S the weight scatter in Z's space."""
    Z_prev = np.asarray(getattr(Z_prev, "matrix", Z_prev), dtype=float)
    S = weight_scatter(context, alpha, Z_prev, hp)
    return covariance_from_scatter(S, config.cov_epsilon, hp.objective)


def covariance_from_scatter(S, epsilon: float, kind) -> CovarianceVariable:
    """Unit-trace square root of ``S + epsilon I``."""
    S = np.asarray(S, dtype=float)
    w, V = linalg.eigh(0.5 * (S + S.T) + epsilon * np.eye(S.shape[0]))
    root = np.sqrt(np.maximum(w, 0.0))
    Z = (V * root) @ V.T
    Z = 0.5 * (Z + Z.T)
    return CovarianceVariable(kind, Z / np.trace(Z))


def _penalized(value, Z, hp: HyperParams, config: SolverConfig) -> float:
    """Dual value plus the ridge term the covariance update also minimizes."""
    w = np.linalg.eigvalsh(Z.matrix)
    if w.min() <= 0:
        return np.inf
    return value + 0.5 * hp.lambda2 * config.cov_epsilon * float(np.sum(1.0 / w))


def _extrapolated(Z_new, Z_old, beta, kind):
    Z = Z_new.matrix + beta * (Z_new.matrix - Z_old.matrix)
    Z = 0.5 * (Z + Z.T)
    if np.linalg.eigvalsh(Z).min() <= 0:
        return None
    return CovarianceVariable(kind, Z / np.trace(Z))


def inner_alternation(Yt, Z0, context: KernelContext, hp: HyperParams, config: SolverConfig,
                      fractional=None, data=None, audit: Optional[CovarianceAudit] = None
                      ) -> AlternationResult:
    """Block descent on (weights, covariance) for fixed fractional labels.

    Each covariance step exactly minimizes the dual value plus the epsilon ridge
    term, so that sum decreases monotonically. With ``alt_extrapolate`` a step
    along the last covariance move is also tried and kept only if it lowers that
    sum and the dual value below the plain step; later plain steps may then trade
    a small rise in the dual value for a drop in the ridge term. Stops when its relative change drops below ``alt_tol``.
    """
    Z = Z0 if isinstance(Z0, CovarianceVariable) else CovarianceVariable(hp.objective, Z0)
    values, primal = [], []
    alpha, value = solve_duals(Yt, Z, context, hp)
    frac = fractional if fractional is not None else [Yt]
    converged = False
    it = 0
    beta = 1.0
    fixed = config.fix_covariance or context.cov_size == 1
    h = None if fixed else _penalized(value, Z, hp, config)
    for it in range(1, config.max_alt + 1):
        values.append(value)
        if config.track_primal:
            primal.append(eval_primal_objective(ModelState(alpha, Z), frac, data, hp, context=context))
        if fixed:
            converged = True
            break
        Z_new = update_covariance(alpha, Z, context, hp, config)
        alpha_new, value_new = solve_duals(Yt, Z_new, context, hp)
        h_new = _penalized(value_new, Z_new, hp, config)
        if config.alt_extrapolate:
            Z_try = _extrapolated(Z_new, Z, beta, hp.objective)
            if Z_try is not None:
                alpha_try, value_try = solve_duals(Yt, Z_try, context, hp)
                h_try = _penalized(value_try, Z_try, hp, config)
                if h_try < h_new and value_try <= value_new:
                    Z_new, alpha_new, value_new, h_new = Z_try, alpha_try, value_try, h_try
                    beta = min(2.0 * beta, 1e4)
                else:
                    beta = max(beta / 4.0, 1.0)
        if audit is not None:
            audit.record(Z_new.matrix)
        change = abs(h - h_new) / max(abs(h), 1e-300)
        Z, alpha, value, h = Z_new, alpha_new, value_new, h_new
        if change <= config.alt_tol:
            values.append(value)
            if config.track_primal:
                primal.append(eval_primal_objective(ModelState(alpha, Z), frac, data, hp,
                                                    context=context))
            converged = True
            break
    return AlternationResult(alpha, Z, value, values, primal, it, converged)


def _segments(pools):
    sizes = [len(p) for p in pools]
    off = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    return sizes, off


def _constraint_values(alpha, pools, off_obs):
    """Slope of the saddle objective in mu: <alpha^i, Y^i_k> for every pooled constraint."""
    out = []
    for i, p in enumerate(pools):
        a = alpha[off_obs[i]:off_obs[i + 1]]
        out.extend(violation_value(a, Y) for Y in p.constraints)
    return np.array(out)


def _lower_bound(slopes, offsets, sizes):
    """min over the simplex product of the max of the linearizations (an LP)."""
    S = np.asarray(slopes)
    b = np.asarray(offsets)
    P = S.shape[1]
    cobj = np.zeros(P + 1)
    cobj[-1] = 1.0
    A_ub = np.hstack([S, -np.ones((S.shape[0], 1))])
    A_eq = np.zeros((len(sizes), P + 1))
    start = 0
    for i, s in enumerate(sizes):
        A_eq[i, start:start + s] = 1.0
        start += s
    bnds = [(0.0, 1.0)] * P + [(None, None)]
    res = optimize.linprog(cobj, A_ub=A_ub, b_ub=-b, A_eq=A_eq, b_eq=np.ones(len(sizes)),
                           bounds=bnds, method="highs")
    if res.status != 0:
        return None, None
    return float(res.x[-1]), res.x[:-1]


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.count_nonzero(u - css / idx > 0)
    return np.maximum(v - css[rho - 1] / rho, 0.0)


def _project_level(mu0, slopes, offsets, level, sizes, start):
    """Projection of mu0 onto {mu in simplex product : every linearization <= level}."""
    S = np.asarray(slopes)
    b = np.asarray(offsets)
    _, off = _segments_from_sizes(sizes)
    cons = [{"type": "ineq", "fun": lambda x: level - (S @ x + b), "jac": lambda x: -S}]
    for i in range(len(sizes)):
        lo, hi = off[i], off[i + 1]
        row = np.zeros(mu0.size)
        row[lo:hi] = 1.0
        cons.append({"type": "eq", "fun": lambda x, r=row: r @ x - 1.0, "jac": lambda x, r=row: r})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = optimize.minimize(lambda x: 0.5 * np.sum((x - mu0) ** 2), start,
                                jac=lambda x: x - mu0, method="SLSQP", constraints=cons,
                                bounds=[(0.0, 1.0)] * mu0.size,
                                options={"maxiter": 200, "ftol": 1e-12})
    if not res.success:
        return None
    x = np.clip(res.x, 0.0, 1.0)
    for i in range(len(sizes)):
        seg = x[off[i]:off[i + 1]]
        x[off[i]:off[i + 1]] = seg / seg.sum() if seg.sum() > 0 else project_simplex(seg)
    if np.max(S @ x + b) > level + 1e-7 * max(1.0, abs(level)):
        return None
    return x


def _segments_from_sizes(sizes):
    return sizes, np.concatenate([[0], np.cumsum(sizes)]).astype(int)


def run_elm(state: SolverState, data: TaskDataset, hp: HyperParams, config: SolverConfig,
            context: KernelContext) -> SolverState:
    """Level method for the saddle point in mu with fixed pools.

    Each iteration solves the (alpha, Z) block at the current mu, records the
    linearization of the saddle objective in mu (exact, since mu enters linearly),
    then projects mu onto the level set of the cutting-plane model.
    """
    pools = state.pools
    sizes, _ = _segments(pools)
    off_obs = np.concatenate([[0], np.cumsum(data.sizes)]).astype(int)
    mu = np.concatenate([p.mu for p in pools])
    rec = ElmRecord()
    best = None
    Z = state.model.covariance
    for t in range(config.max_elm):
        for i, p in enumerate(pools):
            lo = int(np.sum(sizes[:i]))
            p.mu = mu[lo:lo + sizes[i]].copy()
        frac = [fractional_labels(p) for p in pools]
        Yt = np.vstack([f.Y for f in frac])
        alt = inner_alternation(Yt, Z, context, hp, config, fractional=frac, data=data,
                                audit=state.audit)
        for k, v in enumerate(alt.values):
            state.trace.append({"outer": state.outer_iter, "elm": t, "inner": k, "dual": v,
                                "primal": alt.primal[k] if k < len(alt.primal) else None})
        Z = alt.covariance
        g = alt.value
        s = _constraint_values(alt.alpha, pools, off_obs)
        rec.slopes.append(s)
        rec.offsets.append(g - float(s @ mu))
        if g < rec.ub:
            rec.ub = g
            best = (mu.copy(), alt.alpha, alt.covariance)
        lb, mu_lp = _lower_bound(rec.slopes, rec.offsets, sizes)
        if lb is not None:
            rec.lb = max(rec.lb, lb)
        rec.lb = min(rec.lb, rec.ub)
        gap = rec.ub - rec.lb
        rec.gaps.append(gap)
        rec.iterations = t + 1
        if gap <= config.eps_elm * (1.0 + abs(rec.ub)):
            break
        level = rec.lb + config.level_tau * gap
        start = mu_lp if mu_lp is not None else mu
        nxt = _project_level(mu, rec.slopes, rec.offsets, level, sizes, start)
        if nxt is None:
            rec.fallbacks += 1
            log.info("level-set projection failed at level %.6g; raising level to UB", level)
            nxt = _project_level(mu, rec.slopes, rec.offsets, rec.ub, sizes, start)
            if nxt is None:
                nxt = start
        mu = nxt

    mu_best, alpha, Z_best = best
    _, off = _segments_from_sizes(sizes)
    for i, p in enumerate(pools):
        seg = np.clip(mu_best[off[i]:off[i + 1]], 0.0, None)
        p.mu = seg / seg.sum()
    state.model = ModelState(alpha, Z_best)
    s = _constraint_values(alpha, pools, off_obs)
    state.theta = np.array([s[off[i]:off[i + 1]].min() for i in range(len(pools))])
    state.elm = rec
    state.elm_history.append(list(rec.gaps))
    return state


def _seed_labels(X, bounds, C, seed, restarts):
    from sklearn.cluster import KMeans
    from sklearn.exceptions import ConvergenceWarning

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        km = KMeans(n_clusters=C, n_init=restarts, random_state=seed).fit(X)
    cost = ((X[:, None, :] - km.cluster_centers_[None, :, :]) ** 2).sum(-1)
    # round away last-bit noise so identical points tie exactly
    cost = np.round(cost, 12)
    return assign_with_bounds(cost, bounds)


def initialize(data: TaskDataset, hp: HyperParams, balance: BalanceSpec, config: SolverConfig,
               context: Optional[KernelContext] = None) -> SolverState:
    """One balanced k-means labelling per task, identity-shaped covariance, zero duals."""
    C = hp.num_classes
    if balance.num_classes != C:
        raise ValueError(f"balance spec has {balance.num_classes} classes, hyperparameters {C}")
    if not np.array_equal(balance.sizes, data.sizes):
        raise ValueError("balance spec task sizes differ from the dataset")
    ctx = context if context is not None else KernelContext.build(data, hp)
    pools, bounds = [], []
    for i, task in enumerate(data.tasks):
        b = balance.bounds(i)
        # same k-means seed for every task: a task gets the same seed labelling
        # whether it is solved alone or together with others
        labels = _seed_labels(np.asarray(task.X), b, C, config.init_label_seed,
                              config.kmeans_restarts)
        pool = ConstraintPool(i)
        pool_add(pool, IndicatorMatrix(i, encode_labels(labels, C)), b)
        pool.mu = np.ones(1)
        pools.append(pool)
        bounds.append(b)
    Z = CovarianceVariable.identity(hp.objective, ctx.cov_size)
    model = ModelState(np.zeros((data.N, C)), Z)
    return SolverState(pools, model, np.zeros(data.m), bounds)


def feasible_rounding(model: ModelState, context: KernelContext, hp: HyperParams,
                      bounds) -> list:
    """Per task, the balance-feasible labelling with the largest total decision value."""
    f = context.multitask_gram(model.covariance.matrix, hp).raw @ model.alpha
    off = np.concatenate([[0], np.cumsum(context.sizes)])
    return [assign_with_bounds(-f[off[i]:off[i + 1]], bounds[i]) for i in range(context.m)]


def integer_objective(labels, Z0, context: KernelContext, hp: HyperParams,
                      config: SolverConfig) -> AlternationResult:
    """Saddle value of the unrelaxed problem at hard labels (one alternation run)."""
    Y = np.vstack([encode_labels(l, hp.num_classes) for l in labels])
    return inner_alternation(Y, Z0, context, hp, replace(config, track_primal=False))


def solve(data: TaskDataset, hp: HyperParams, balance: BalanceSpec,
          config: SolverConfig = SolverConfig(), initial_covariance=None):
    """Cutting-plane loop: solve the pooled subproblem, add each task's most violated labelling.

    Returns ``(model, result)``. With ``select_iterate="integer"`` the reported labels
    and model come from the outer iterate whose balance-feasible rounding has the
    lowest unrelaxed objective, refit at those labels; ``"final"`` reports the argmax
    labels of the last iterate.
    """
    t0 = time.perf_counter()
    ctx = KernelContext.build(data, hp)
    state = initialize(data, hp, balance, config, ctx)
    if initial_covariance is not None:
        state.model = ModelState(state.model.alpha,
                                 CovarianceVariable(hp.objective, np.asarray(initial_covariance)))
    off_obs = data.offsets
    converged = False
    integer_values, best = [], None
    for outer in range(config.max_outer):
        state.outer_iter = outer
        run_elm(state, data, hp, config, ctx)
        state.outer_values.append(state.elm.ub)
        if config.select_iterate == "integer":
            labels = feasible_rounding(state.model, ctx, hp, state.bounds)
            fit = integer_objective(labels, state.model.covariance, ctx, hp, config)
            integer_values.append(fit.value)
            if best is None or fit.value < best[0]:
                best = (fit.value, outer, labels, ModelState(fit.alpha, fit.covariance))
        else:
            best = (None, outer, extract_labels(state.model, ctx, hp), state.model)
        alpha = state.model.alpha
        candidates, violation = [], 0.0
        for i in range(data.m):
            a = alpha[off_obs[i]:off_obs[i + 1]]
            Y = most_violated(a, state.bounds[i], task_id=i)
            violation += max(0.0, state.theta[i] - violation_value(a, Y))
            candidates.append(Y)
        if violation <= config.eps_cpa * float(np.sum(np.abs(state.theta))):
            converged = True
            break
        novel = [pool_add(state.pools[i], Y, state.bounds[i]) for i, Y in enumerate(candidates)]
        if not any(novel):
            converged = True
            break
    _, selected, labels, model = best
    seconds = time.perf_counter() - t0
    result = ClusteringResult(
        labels=labels, covariance=model.covariance, trace=state.trace,
        outer_values=state.outer_values, elm_history=state.elm_history, converged=converged,
        n_outer=len(state.outer_values), seconds=seconds, audit=state.audit.as_dict(),
        pool_sizes=[len(p) for p in state.pools], integer_values=integer_values,
        selected_outer=selected, state=state,
        pool_membership=all(is_member(Y.Y, b) for p, b in zip(state.pools, state.bounds)
                            for Y in p.constraints))
    return model, result
