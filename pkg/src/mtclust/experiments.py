"""Scripted studies: grouped tasks, class-balance sweep, and runtime scaling."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import BalanceSpec, BaseKernelSpec, HyperParams, KernelKind, ObjectiveKind, TaskDataset
from .evaluation import (GroupedTaskSpec, NmiReport, SyntheticSpec, gaussian_source,
                         generate_grouped_tasks, generate_synthetic, normalize01)
from .kernels import default_rbf_width
from .optimizer import SolverConfig, solve

BALANCE_GRID = (0.0, 0.03, 0.1, 0.2, 0.3)
LAMBDA_GRID = tuple(2.0 ** k for k in (-10, -8, -6, -4, -2))


@dataclass(frozen=True)
class GroupedSetup:
    """Two groups of three tasks; each group is a disjoint pair of source classes."""

    seeds: tuple = tuple(range(10))
    separation: float = 0.6
    d: int = 8
    source_per_class: int = 200
    count: int = 20
    repeats: int = 3
    lambda1: float = 2.0 ** -2
    lambda2: float = 2.0 ** -2
    kernel: str = "rbf"
    width_factor: float = 1.0
    solver: SolverConfig = field(default_factory=SolverConfig)


def grouped_dataset(setup: GroupedSetup, seed: int) -> TaskDataset:
    X, y = gaussian_source(4, setup.source_per_class, setup.d, setup.separation, seed=seed)
    spec = GroupedTaskSpec(X, y, groups=((0, 1), (2, 3)), count=setup.count,
                           repeats=setup.repeats, seed=seed + 1)
    return normalize01(generate_grouped_tasks(spec))


def kernel_for(data: TaskDataset, kind: str, width_factor: float = 1.0) -> BaseKernelSpec:
    if KernelKind(kind) is KernelKind.LINEAR:
        return BaseKernelSpec(KernelKind.LINEAR)
    return BaseKernelSpec(KernelKind.RBF, width_factor * default_rbf_width(data))


def run_job(data: TaskDataset, objective, kernel: BaseKernelSpec, lambda1: float,
            lambda2: float, slack: float, solver: SolverConfig):
    C = data.num_classes or 2
    hp = HyperParams(lambda1, lambda2, ObjectiveKind(objective), kernel, num_classes=C)
    balance = BalanceSpec.uniform(slack, data.sizes, C)
    return solve(data, hp, balance, solver)


def group_contrast(Z, groups) -> tuple:
    """Mean |off-diagonal| within groups and across groups."""
    A = np.abs(np.asarray(Z))
    g = np.asarray(groups)
    same = g[:, None] == g[None, :]
    off = ~np.eye(len(g), dtype=bool)
    return float(A[same & off].mean()), float(A[~same].mean())


def _record(job, objective, seed, data, result, **extra):
    rec = {"job": job, "objective": ObjectiveKind(objective).value, "seed": seed,
           "seconds": result.seconds, "converged": result.converged, "n_outer": result.n_outer,
           "audit": result.audit, "pool_membership": result.pool_membership,
           "outer_values": list(result.outer_values),
           "elm_gaps": [list(g) for g in result.elm_history]}
    if data.has_labels:
        rec["nmi"] = NmiReport.from_labels(result.labels, data.truth()).as_dict()
    rec.update(extra)
    return rec


def grouped_suite(setup: GroupedSetup = GroupedSetup(), objectives=("relationship",),
                  jobs=("pooled", "single")) -> list:
    """Jobs: "pooled" (all six tasks), "group" (each group alone), "single" (each task alone).

    All jobs of one seed share the RBF width computed on the pooled tasks.
    """
    rows = []
    groups = [g for g in range(2) for _ in range(setup.repeats)]
    for seed in setup.seeds:
        data = grouped_dataset(setup, seed)
        kernel = kernel_for(data, setup.kernel, setup.width_factor)
        for obj in objectives:
            run = lambda d: run_job(d, obj, kernel, setup.lambda1, setup.lambda2, 0.0, setup.solver)
            if "pooled" in jobs:
                _, res = run(data)
                Z = res.covariance.matrix
                extra = {"covariance": Z.tolist()}
                if ObjectiveKind(obj) is ObjectiveKind.RELATIONSHIP:
                    within, across = group_contrast(Z, groups)
                    extra.update(within=within, across=across)
                rows.append(_record("pooled", obj, seed, data, res, **extra))
            if "group" in jobs:
                for g in range(2):
                    ids = [i for i in range(data.m) if groups[i] == g]
                    sub = data.subset(ids)
                    _, res = run(sub)
                    rows.append(_record(f"group{g}", obj, seed, sub, res, tasks=ids,
                                        covariance=res.covariance.matrix.tolist()))
            if "single" in jobs:
                for i in range(data.m):
                    sub = data.subset([i])
                    _, res = run(sub)
                    rows.append(_record("single", obj, seed, sub, res, tasks=[i]))
    return rows


def summarize_grouped(rows, objective="relationship") -> dict:
    """Per-seed pooled vs mean single-task NMI and the Omega group contrast."""
    obj = ObjectiveKind(objective).value
    out = {}
    for r in rows:
        if r["objective"] != obj:
            continue
        s = out.setdefault(r["seed"], {"single": []})
        if r["job"] == "pooled":
            s["pooled"] = r["nmi"]["mean"]
            s["within"], s["across"] = r.get("within"), r.get("across")
        elif r["job"] == "single":
            s["single"].append(r["nmi"]["mean"])
    for s in out.values():
        s["single"] = float(np.mean(s["single"])) if s["single"] else None
    return out


def balance_suite(setup: GroupedSetup = GroupedSetup(), grid=BALANCE_GRID,
                  objectives=("relationship",)) -> list:
    """Pooled six-task job over the slack grid; the tasks are exactly balanced."""
    rows = []
    for seed in setup.seeds:
        data = grouped_dataset(setup, seed)
        kernel = kernel_for(data, setup.kernel, setup.width_factor)
        for obj in objectives:
            for slack in grid:
                _, res = run_job(data, obj, kernel, setup.lambda1, setup.lambda2, slack,
                                 setup.solver)
                rows.append(_record("pooled", obj, seed, data, res, slack=slack))
    return rows


@dataclass(frozen=True)
class ScalingSetup:
    ns: tuple = (50, 100, 200, 400)
    ds: tuple = (2, 4, 8, 16)
    ms: tuple = (2, 4, 8)
    base_n: int = 100
    base_d: int = 3
    base_m: int = 3
    total_obs: int = 480  # n * m held fixed along the task axis
    lam: float = 2.0 ** -10
    objective: str = "relationship"
    seed: int = 0
    repeats: int = 1
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(track_primal=False))


def loglog_slope(x, t) -> float:
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(t, float)), 1)[0])


def _time_solve(setup: ScalingSetup, n, d, m) -> float:
    best = np.inf
    for r in range(setup.repeats):
        data = normalize01(generate_synthetic(SyntheticSpec(m=m, n=n, d=d, seed=setup.seed + r)))
        t0 = time.perf_counter()
        run_job(data, setup.objective, BaseKernelSpec(), setup.lam, setup.lam, 0.0, setup.solver)
        best = min(best, time.perf_counter() - t0)
    return best


def scaling_suite(setup: ScalingSetup = ScalingSetup(), axes=("n", "d", "m")) -> dict:
    out = {}
    if "n" in axes:
        t = [_time_solve(setup, n, setup.base_d, setup.base_m) for n in setup.ns]
        out["n"] = {"values": list(setup.ns), "seconds": t, "slope": loglog_slope(setup.ns, t)}
    if "d" in axes:
        t = [_time_solve(setup, setup.base_n, d, setup.base_m) for d in setup.ds]
        out["d"] = {"values": list(setup.ds), "seconds": t, "slope": loglog_slope(setup.ds, t)}
    if "m" in axes:
        ns = [setup.total_obs // m for m in setup.ms]
        t = [_time_solve(setup, n - n % 2, setup.base_d, m) for n, m in zip(ns, setup.ms)]
        out["m"] = {"values": list(setup.ms), "seconds": t, "slope": loglog_slope(setup.ms, t)}
    return out
