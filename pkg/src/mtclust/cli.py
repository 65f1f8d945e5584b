"""Command line front end: ``mtclust run | suite | baseline-km``."""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .core import BalanceSpec, BaseKernelSpec, HyperParams, KernelKind, ObjectiveKind, TaskDataset
from .evaluation import (GroupedTaskSpec, NmiReport, SyntheticSpec, gaussian_source,
                         generate_grouped_tasks, generate_synthetic, normalize01, pca_project)
from .kernels import default_rbf_width
from .optimizer import SolverConfig, solve

log = logging.getLogger("mtclust")

WIDTH_FACTORS = tuple(2.0 ** k for k in (-2, -1, 0, 1, 2))
TIMING_KEYS = ("seconds", "timings")


# ---------------------------------------------------------------- ingestion

class IngestError(ValueError):
    def __init__(self, message, path=None, line=None):
        where = f"{path}" + (f":{line}" if line is not None else "") if path else ""
        super().__init__(f"{where}: {message}" if where else message)
        self.path, self.line = path, line


class ManifestError(IngestError):
    pass


class MissingFileError(IngestError):
    pass


class RaggedRowError(IngestError):
    pass


class NonNumericError(IngestError):
    pass


class DimensionMismatchError(IngestError):
    pass


def _read_table(path: Path, delimiter: str):
    if not path.is_file():
        raise MissingFileError("file not found", path)
    rows, width = [], None
    with open(path, newline="") as fh:
        for lineno, raw in enumerate(csv.reader(fh, delimiter=delimiter), start=1):
            cells = [c.strip() for c in raw]
            if not any(cells):
                continue
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise RaggedRowError(f"expected {width} columns, found {len(cells)}", path, lineno)
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                bad = next(c for c in cells if not _is_number(c))
                raise NonNumericError(f"non-numeric cell {bad!r}", path, lineno) from None
    if not rows:
        raise RaggedRowError("no data rows", path)
    return np.array(rows)


def _is_number(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def ingest(manifest) -> TaskDataset:
    """Load one delimited numeric file per task as listed in a JSON manifest.

    Manifest keys: ``tasks`` (list of paths, relative to the manifest), optional
    ``delimiter`` (default ","), ``label_column`` (last column holds integer labels)
    and ``num_classes``.
    """
    manifest = Path(manifest)
    if not manifest.is_file():
        raise MissingFileError("manifest not found", manifest)
    try:
        spec = json.loads(manifest.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"invalid JSON: {exc.msg}", manifest, exc.lineno) from None
    tasks = spec.get("tasks") if isinstance(spec, dict) else None
    if not tasks:
        raise ManifestError("manifest needs a nonempty 'tasks' list", manifest)
    delim = spec.get("delimiter", ",")
    has_labels = bool(spec.get("label_column", False))
    Xs, ys, first = [], [], None
    for entry in tasks:
        path = manifest.parent / (entry["path"] if isinstance(entry, dict) else entry)
        table = _read_table(path, delim)
        X = table[:, :-1] if has_labels else table
        if has_labels:
            lab = table[:, -1]
            if np.any(lab != np.round(lab)) or np.any(lab < 0):
                raise NonNumericError("label column must hold non-negative integers", path)
            ys.append(lab.astype(int))
        if first is None:
            first = (path, X.shape[1])
        elif X.shape[1] != first[1]:
            raise DimensionMismatchError(
                f"{X.shape[1]} features but {first[0]} has {first[1]}", path)
        Xs.append(X)
    C = spec.get("num_classes")
    if C is None and has_labels:
        C = int(max(y.max() for y in ys)) + 1
    return TaskDataset.from_arrays(Xs, ys if has_labels else None, C)


# ---------------------------------------------------------------- configuration

@dataclass
class RunConfig:
    dataset: dict
    objective: str = "relationship"
    kernel: dict = field(default_factory=lambda: {"kind": "linear"})
    lambda1: list = field(default_factory=lambda: [2.0 ** -10])
    lambda2: list = field(default_factory=lambda: [2.0 ** -10])
    balance: object = 0.0  # scalar slack or path of an m x C slack file
    num_classes: Optional[int] = None
    normalize: bool = True
    pca_dim: Optional[int] = None
    bias: bool = False
    solver: dict = field(default_factory=dict)
    seed: int = 0
    repeats: int = 1
    output_dir: str = "out"
    plots: bool = False

    @classmethod
    def from_dict(cls, raw: dict, base: Optional[Path] = None) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = set(raw) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        cfg = cls(**raw)
        cfg._base = base
        return cfg.resolved()

    def resolved(self) -> "RunConfig":
        """Fill every default so the echo alone reproduces the run."""
        out = replace(self)
        out._base = getattr(self, "_base", None)
        out.objective = ObjectiveKind(self.objective).value
        out.lambda1 = [float(v) for v in np.atleast_1d(self.lambda1)]
        out.lambda2 = [float(v) for v in np.atleast_1d(self.lambda2)]
        if not out.lambda1 or not out.lambda2:
            raise ValueError("lambda grids must be nonempty")
        k = dict(self.kernel)
        k["kind"] = KernelKind(k.get("kind", "linear")).value
        if k["kind"] == "rbf":
            k.setdefault("width", None)
            k.setdefault("width_grid", False)
        out.kernel = k
        out.solver = asdict(SolverConfig(**self.solver))
        if out.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if isinstance(self.dataset, dict) and self.dataset.get("kind") == "manifest" and out._base:
            p = Path(self.dataset["path"])
            out.dataset = {**self.dataset, "path": str(p if p.is_absolute() else out._base / p)}
        if isinstance(self.balance, str) and out._base and not Path(self.balance).is_absolute():
            out.balance = str(out._base / self.balance)
        return out

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def load_dataset(spec: dict) -> TaskDataset:
    kind = spec.get("kind")
    if kind == "manifest":
        return ingest(spec["path"])
    if kind == "synthetic":
        args = {k: v for k, v in spec.items() if k != "kind"}
        for key in ("means", "variances", "mean_range", "var_range"):
            if key in args and args[key] is not None:
                args[key] = np.asarray(args[key], dtype=float) if key in ("means", "variances") \
                    else tuple(args[key])
        return generate_synthetic(SyntheticSpec(**args))
    if kind == "grouped":
        X, y = gaussian_source(spec.get("source_classes", 4), spec.get("source_per_class", 200),
                               spec.get("d", 8), spec.get("separation", 0.6), seed=spec.get("seed", 0))
        groups = tuple(tuple(g) for g in spec.get("groups", [[0, 1], [2, 3]]))
        return generate_grouped_tasks(GroupedTaskSpec(
            X, y, groups=groups, count=spec.get("count", 20), repeats=spec.get("repeats", 3),
            seed=spec.get("seed", 0) + 1))
    raise ValueError(f"unknown dataset kind {kind!r}")


def _balance(cfg: RunConfig, data: TaskDataset, C: int) -> BalanceSpec:
    if isinstance(cfg.balance, (int, float)):
        return BalanceSpec.uniform(float(cfg.balance), data.sizes, C)
    path = Path(cfg.balance)
    table = _read_table(path, ",")
    return BalanceSpec(table, data.sizes)


# ---------------------------------------------------------------- runs

def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_matrix(M) -> str:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in M)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("MTCLUST_THREADS", "1")))
    except ValueError:
        return 1


def _one_run(data, hp, balance, solver, truth):
    model, res = solve(data, hp, balance, solver)
    rec = {"converged": res.converged, "n_outer": res.n_outer, "seconds": res.seconds,
           "relaxed_objective": float(res.outer_values[-1]),
           "integer_objective": (float(min(res.integer_values)) if res.integer_values else None),
           "selected_outer": res.selected_outer, "pool_sizes": res.pool_sizes,
           "outer_values": [float(v) for v in res.outer_values],
           "elm_gaps": [[float(g) for g in gaps] for gaps in res.elm_history],
           "audit": res.audit, "pool_membership": res.pool_membership}
    if truth is not None:
        rec["nmi"] = NmiReport.from_labels(res.labels, truth).as_dict()
    return rec, res


def prepare(cfg: RunConfig):
    """Dataset after preprocessing, plus the seconds spent normalizing (excluded from timings)."""
    data = load_dataset(cfg.dataset)
    t0 = time.perf_counter()
    if cfg.normalize:
        data = normalize01(data)
    norm_seconds = time.perf_counter() - t0
    if cfg.pca_dim is not None:
        data = pca_project(data, cfg.pca_dim)
    if cfg.bias:
        data = data.with_features([np.hstack([t.X, np.ones((t.X.shape[0], 1))]) for t in data.tasks])
    return data, norm_seconds


def run(cfg: RunConfig, strict: bool = False) -> dict:
    """Preprocess, run the grid, evaluate, and write all artifacts to ``cfg.output_dir``."""
    t_start = time.perf_counter()
    data, norm_seconds = prepare(cfg)
    t_solve_start = time.perf_counter()
    C = cfg.num_classes or data.num_classes
    if C is None:
        raise ValueError("num_classes is neither configured nor inferable from truth labels")
    balance = _balance(cfg, data, C)
    truth = data.truth() if data.has_labels else None
    if cfg.kernel["kind"] == "rbf":
        base = cfg.kernel["width"] or default_rbf_width(data)
        widths = [f * base for f in WIDTH_FACTORS] if cfg.kernel["width_grid"] else [base]
    else:
        widths = [None]
    points = list(itertools.product(cfg.lambda1, cfg.lambda2, widths, range(cfg.repeats)))
    solver_base = SolverConfig(**cfg.solver)

    def job(point):
        l1, l2, w, r = point
        kernel = BaseKernelSpec(KernelKind.RBF, w) if w is not None else BaseKernelSpec()
        hp = HyperParams(l1, l2, ObjectiveKind(cfg.objective), kernel, num_classes=C)
        solver = replace(solver_base, init_label_seed=cfg.seed + r)
        return _one_run(data, hp, balance, solver, truth)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        outcomes = list(pool.map(job, points))

    records = []
    for (l1, l2, w, r), (rec, _) in zip(points, outcomes):
        records.append({"lambda1": l1, "lambda2": l2, "width": w, "repeat": r,
                        "seed": cfg.seed + r, **rec})
    best = _select_best(records, truth is not None)
    chosen = outcomes[best["index"]][1]
    out = Path(cfg.output_dir)
    for i, lab in enumerate(chosen.labels):
        _atomic_write(out / f"labels_task{i}.csv", "".join(f"{int(v)}\n" for v in lab))
    _atomic_write(out / "covariance.csv", _csv_matrix(chosen.covariance.matrix))

    report = {
        "config": cfg.to_dict(),
        "data": {"m": data.m, "d": data.d, "sizes": [int(s) for s in data.sizes],
                 "num_classes": int(C)},
        "records": records,
        "best": best,
        "converged": all(r["converged"] for r in records),
        "timings": {"solve_seconds": sum(r["seconds"] for r in records),
                    "run_seconds": time.perf_counter() - t_solve_start,
                    "normalize_seconds": norm_seconds,
                    "total_seconds": time.perf_counter() - t_start},
    }
    validate_results(report)
    _atomic_write(out / "results.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    if cfg.plots:
        _plots(out, chosen)
    if strict and not report["converged"]:
        raise NotConvergedError("at least one run stopped at an iteration cap")
    return report


class NotConvergedError(RuntimeError):
    pass


def _select_best(records, has_truth: bool) -> dict:
    """Group repeats per grid point; best by mean NMI (if truth) and by lowest relaxed objective."""
    keys = sorted({(r["lambda1"], r["lambda2"], r["width"] if r["width"] is not None else -1.0)
                   for r in records})
    by_key = {k: [i for i, r in enumerate(records)
                  if (r["lambda1"], r["lambda2"], r["width"] if r["width"] is not None else -1.0) == k]
              for k in keys}
    obj = {k: float(np.mean([records[i]["relaxed_objective"] for i in idx]))
           for k, idx in by_key.items()}
    k_obj = min(keys, key=lambda k: obj[k])
    out = {"by_objective": by_key[k_obj][0], "objective_value": obj[k_obj]}
    if has_truth:
        score = {k: float(np.mean([records[i]["nmi"]["mean"] for i in idx]))
                 for k, idx in by_key.items()}
        k_nmi = max(keys, key=lambda k: score[k])
        out.update(by_nmi=by_key[k_nmi][0], mean_nmi=score[k_nmi])
        out["index"] = out["by_nmi"]
    else:
        out["index"] = out["by_objective"]
    for r in records:
        r["best"] = False
    records[out["index"]]["best"] = True
    return out


RESULTS_SCHEMA = {
    "type": "object",
    "required": ["config", "data", "records", "best", "converged", "timings"],
    "properties": {
        "config": {"type": "object", "required": ["dataset", "objective", "kernel", "lambda1",
                                                  "lambda2", "balance", "solver", "seed",
                                                  "repeats", "output_dir"]},
        "data": {"type": "object", "required": ["m", "d", "sizes", "num_classes"]},
        "records": {
            "type": "array", "minItems": 1,
            "items": {
                "type": "object",
                "required": ["lambda1", "lambda2", "repeat", "seed", "converged", "n_outer",
                             "seconds", "relaxed_objective", "outer_values", "best"],
                "properties": {
                    "lambda1": {"type": "number", "exclusiveMinimum": 0},
                    "lambda2": {"type": "number", "exclusiveMinimum": 0},
                    "width": {"type": ["number", "null"]},
                    "seconds": {"type": "number", "minimum": 0},
                    "converged": {"type": "boolean"},
                    "nmi": {"type": "object", "required": ["per_task", "mean"],
                            "properties": {
                                "mean": {"type": "number", "minimum": 0, "maximum": 1},
                                "per_task": {"type": "array",
                                             "items": {"type": "number", "minimum": 0,
                                                       "maximum": 1}}}},
                },
            },
        },
        "best": {"type": "object", "required": ["index", "by_objective"]},
        "converged": {"type": "boolean"},
        "timings": {"type": "object",
                    "required": ["solve_seconds", "normalize_seconds", "total_seconds"]},
    },
}


def validate_results(report: dict) -> None:
    import jsonschema

    jsonschema.validate(report, RESULTS_SCHEMA)


def _plots(out: Path, res) -> None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping plots")
        return
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(range(1, len(res.outer_values) + 1), res.outer_values, marker="o")
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("subproblem value")
    fig.tight_layout()
    fig.savefig(out / "convergence.svg")
    plt.close(fig)
    Z = res.covariance.matrix
    fig, ax = plt.subplots(figsize=(3.5, 3.5))
    top = np.abs(Z).max() or 1.0
    for (i, j), v in np.ndenumerate(Z):
        s = np.sqrt(abs(v) / top)
        ax.add_patch(plt.Rectangle((j - s / 2, i - s / 2), s, s,
                                   color="black" if v > 0 else "white", ec="gray"))
    ax.set_xlim(-0.5, Z.shape[1] - 0.5)
    ax.set_ylim(Z.shape[0] - 0.5, -0.5)
    ax.set_facecolor("lightgray")
    ax.set_aspect("equal")
    fig.savefig(out / "covariance.svg")
    plt.close(fig)


# ---------------------------------------------------------------- k-means baseline

def kmeans_baseline(data: TaskDataset, C: int, restarts: int = 10, seed: int = 0) -> dict:
    """Per-task k-means and the pooled "ALL" variant, each best of `restarts` by WCSS."""
    from sklearn.cluster import KMeans

    def fit(X):
        km = KMeans(n_clusters=C, n_init=restarts, random_state=seed, algorithm="lloyd").fit(X)
        return km.labels_.astype(int), float(km.inertia_)

    per = [fit(np.asarray(t.X)) for t in data.tasks]
    pooled, wcss_all = fit(data.stacked())
    out = {"per_task": {"labels": [p[0] for p in per], "wcss": [p[1] for p in per]},
           "all": {"labels": data.split(pooled), "wcss": wcss_all}}
    if data.has_labels:
        out["per_task"]["nmi"] = NmiReport.from_labels(out["per_task"]["labels"], data.truth())
        out["all"]["nmi"] = NmiReport.from_labels(out["all"]["labels"], data.truth())
    return out


# ---------------------------------------------------------------- entry point

def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, NmiReport):
        return obj.as_dict()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _cmd_run(args) -> int:
    path = Path(args.config)
    cfg = RunConfig.from_dict(json.loads(path.read_text()), base=path.parent)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    report = run(cfg, strict=args.strict)
    best = report["records"][report["best"]["index"]]
    msg = f"{len(report['records'])} runs; best lambda1={best['lambda1']} lambda2={best['lambda2']}"
    if "nmi" in best:
        msg += f" mean NMI={best['nmi']['mean']:.4f}"
    print(msg)
    return 0


def _cmd_suite(args) -> int:
    from . import experiments as ex

    seeds = tuple(range(args.seeds))
    out = Path(args.out)
    if args.name == "grouped":
        setup = ex.GroupedSetup(seeds=seeds)
        rows = ex.grouped_suite(setup, objectives=tuple(args.objectives),
                                jobs=("pooled", "group", "single"))
        report = {"rows": rows, "summary": ex.summarize_grouped(rows)}
    elif args.name == "balance":
        rows = ex.balance_suite(ex.GroupedSetup(seeds=seeds), objectives=tuple(args.objectives))
        report = {"rows": rows, "grid": list(ex.BALANCE_GRID)}
    else:
        report = ex.scaling_suite(ex.ScalingSetup())
    text = json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n"
    _atomic_write(out / f"{args.name}.json", text)
    print(f"wrote {out / (args.name + '.json')}")
    if args.strict and args.name != "scaling" and not all(r["converged"] for r in report["rows"]):
        raise NotConvergedError("at least one run stopped at an iteration cap")
    return 0


def _cmd_baseline(args) -> int:
    path = Path(args.config)
    cfg = RunConfig.from_dict(json.loads(path.read_text()), base=path.parent)
    data, _ = prepare(cfg)
    C = cfg.num_classes or data.num_classes
    res = kmeans_baseline(data, C, restarts=args.restarts, seed=args.seed)
    _atomic_write(Path(args.out) / "kmeans.json",
                  json.dumps(_jsonable(res), indent=2, sort_keys=True) + "\n")
    for name in ("per_task", "all"):
        if "nmi" in res[name]:
            print(f"{name}: mean NMI={res[name]['nmi'].mean:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtclust", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="solve a configured grid and write results")
    r.add_argument("--config", required=True)
    r.add_argument("--output-dir")
    r.add_argument("--strict", action="store_true", help="fail if any run hits a cap")
    r.set_defaults(func=_cmd_run)
    s = sub.add_parser("suite", help="scripted experiment suites")
    s.add_argument("name", choices=["grouped", "balance", "scaling"])
    s.add_argument("--seeds", type=int, default=10)
    s.add_argument("--objectives", nargs="+", default=["relationship", "feature"])
    s.add_argument("--out", default="suite_out")
    s.add_argument("--strict", action="store_true")
    s.set_defaults(func=_cmd_suite)
    b = sub.add_parser("baseline-km", help="per-task and pooled k-means")
    b.add_argument("--config", required=True)
    b.add_argument("--restarts", type=int, default=10)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default="baseline_out")
    b.set_defaults(func=_cmd_baseline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except NotConvergedError as exc:
        print(f"mtclust: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"mtclust: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
