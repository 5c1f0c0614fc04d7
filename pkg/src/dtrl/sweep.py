"""Zeta sweeps: run solvers over cost values, collect metrics, Pareto front, SVG scatter."""

from __future__ import annotations

import csv
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from xml.sax.saxutils import escape

from dtrl.ibmdp import FullStateSpace, IbmdpInstance
from dtrl.oibmdp import OibmdpModel
from dtrl.solvers import EXACT_ALGORITHMS, SolverConfig, solve
from dtrl.tree import evaluate_tree, extract_tree, save_tree

DEFAULT_ZETAS = (-1.0, -0.6, -0.2, 0.2, 0.6, 1.0)
SWEEP_COLUMNS = ("zeta", "solver", "seed", "J", "accuracy", "decision_nodes", "depth", "wall_clock_s", "tree_path")
SWEEP_FORMAT = "dtrl-sweep v1"
METRICS_FORMAT = "dtrl-metrics v1"


@dataclass
class SweepRow:
    zeta: float
    solver: str
    seed: int
    J: float
    accuracy: float
    decision_nodes: int
    depth: int
    wall_clock_s: float
    tree_path: str = ""

    def as_list(self):
        return [
            repr(self.zeta),
            self.solver,
            self.seed,
            repr(self.J),
            repr(self.accuracy),
            self.decision_nodes,
            self.depth,
            f"{self.wall_clock_s:.6f}",
            self.tree_path,
        ]


def worker_count(requested: int | None = None) -> int:
    if requested:
        return max(1, requested)
    env = os.environ.get("DTRL_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_one(model: OibmdpModel, zeta: float, config: SolverConfig, tree_path: str | None = None, metadata=None):
    """Solve one ``(zeta, seed)`` point; returns ``(SweepRow, tree, solved, trace)``."""
    m = model.with_zeta(zeta)
    t0 = time.perf_counter()
    space = FullStateSpace(m.instance) if config.algorithm == "exact-pg" else None
    solved, trace = solve(m, config, space)
    tree = extract_tree(m, solved, metadata=metadata)
    elapsed = time.perf_counter() - t0
    metrics = evaluate_tree(tree, m.instance.dataset)
    if tree_path:
        save_tree(tree, tree_path)
    row = SweepRow(
        zeta=float(zeta),
        solver=config.algorithm,
        seed=config.seed,
        J=float(solved.J),
        accuracy=metrics.accuracy,
        decision_nodes=metrics.decision_node_count,
        depth=metrics.depth,
        wall_clock_s=elapsed,
        tree_path=tree_path or "",
    )
    return row, tree, solved, trace


_WORKER_MODEL: OibmdpModel | None = None


def _init_worker(model):
    global _WORKER_MODEL
    _WORKER_MODEL = model


def _run_job(job):
    zeta, config, tree_path, metadata = job
    row, *_ = run_one(_WORKER_MODEL, zeta, config, tree_path, metadata)
    return row


def sweep_jobs(zetas, algorithm: str, seeds, tree_dir: str | None, dataset_name: str, base: SolverConfig, model):
    """One job per (zeta, seed); exact solvers get one job per zeta, labelled with the first seed."""
    if not zetas:
        raise ValueError("at least one zeta value is required")
    if not seeds:
        raise ValueError("at least one seed is required")
    use_seeds = seeds[:1] if algorithm in EXACT_ALGORITHMS else seeds
    jobs = []
    for zeta in zetas:
        for seed in use_seeds:
            config = SolverConfig(**{**{f.name: getattr(base, f.name) for f in fields(base)}, "algorithm": algorithm, "seed": seed})
            path = None
            if tree_dir:
                path = os.path.join(tree_dir, f"zeta{zeta:+g}_seed{seed}.tree")
            metadata = {
                "dataset": dataset_name,
                "solver": algorithm,
                "seed": seed,
                "zeta": repr(float(zeta)),
                "gamma": repr(model.gamma),
                "p": model.p,
                "max_depth": model.max_igas,
            }
            jobs.append((float(zeta), config, path, metadata))
    return jobs


def run_sweep(model: OibmdpModel, zetas, algorithm: str, seeds, tree_dir=None, workers=None, base_config=None, dataset_name=""):
    base_config = base_config or SolverConfig(algorithm=algorithm)
    if tree_dir:
        os.makedirs(tree_dir, exist_ok=True)
    jobs = sweep_jobs(list(zetas), algorithm, list(seeds), tree_dir, dataset_name, base_config, model)
    n = min(worker_count(workers), len(jobs))
    if n <= 1:
        _init_worker(model)
        rows = [_run_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n, initializer=_init_worker, initargs=(model,)) as pool:
            rows = list(pool.map(_run_job, jobs))
    return rows


def pareto_front(rows):
    """Rows not dominated in (higher accuracy, fewer decision nodes)."""
    front = []
    for r in rows:
        dominated = any(
            (o.accuracy >= r.accuracy and o.decision_nodes <= r.decision_nodes)
            and (o.accuracy > r.accuracy or o.decision_nodes < r.decision_nodes)
            for o in rows
        )
        if not dominated:
            front.append(r)
    return sorted(front, key=lambda r: (r.decision_nodes, -r.accuracy))


def dominates_point(rows, accuracy: float, nodes: int) -> bool:
    """True if some row weakly dominates ``(accuracy, nodes)``."""
    return any(r.accuracy >= accuracy and r.decision_nodes <= nodes for r in rows)


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {SWEEP_FORMAT}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow(r.as_list())


def read_sweep_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = []
    for rec in csv.DictReader(lines):
        rows.append(
            SweepRow(
                zeta=float(rec["zeta"]),
                solver=rec["solver"],
                seed=int(rec["seed"]),
                J=float(rec["J"]),
                accuracy=float(rec["accuracy"]),
                decision_nodes=int(rec["decision_nodes"]),
                depth=int(rec["depth"]),
                wall_clock_s=float(rec["wall_clock_s"]),
                tree_path=rec["tree_path"],
            )
        )
    return rows


def write_metrics(path, values: dict) -> None:
    """``key=value`` lines after a version header; floats use ``repr``."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {METRICS_FORMAT}\n")
        fh.writelines(f"{key}={value!r}\n" if isinstance(value, float) else f"{key}={value}\n" for key, value in values.items())


def read_metrics(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, value = line.split("=", 1)
            out[key] = value
    return out


# --- SVG -------------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    start = math.floor(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-9 * step:
        if v >= lo - 1e-9 * step:
            out.append(round(v, 10))
        v += step
    return out


def sweep_svg(rows, title: str = "") -> str:
    """Accuracy vs decision-node scatter (one marker per row) with the Pareto front as a polyline."""
    W, H = 800, 600
    left, right, top, bottom = 80, 170, 50, 70
    pw, ph = W - left - right, H - top - bottom
    xs = [r.decision_nodes for r in rows] or [0]
    x_lo, x_hi = 0, max(1, max(xs))
    y_lo = min([r.accuracy for r in rows] + [1.0])
    y_lo = max(0.0, math.floor(y_lo * 10) / 10 - 0.05)
    y_hi = 1.0

    def sx(v):
        return left + (v - x_lo) / (x_hi - x_lo) * pw

    def sy(v):
        return top + (1 - (v - y_lo) / (y_hi - y_lo)) * ph

    zetas = sorted({r.zeta for r in rows})
    color = {z: _PALETTE[i % len(_PALETTE)] for i, z in enumerate(zetas)}
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{left + pw / 2}" y="28" font-size="18" text-anchor="middle" font-family="sans-serif">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for t in _ticks(x_lo, x_hi):
        x = sx(t)
        out.append(f'<line x1="{x:.2f}" y1="{top + ph}" x2="{x:.2f}" y2="{top + ph + 6}" stroke="black"/>')
        out.append(
            f'<text x="{x:.2f}" y="{top + ph + 22}" font-size="12" text-anchor="middle" font-family="sans-serif">{t:g}</text>'
        )
    for t in _ticks(y_lo, y_hi):
        y = sy(t)
        out.append(f'<line x1="{left - 6}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="black"/>')
        out.append(
            f'<text x="{left - 10}" y="{y + 4:.2f}" font-size="12" text-anchor="end" font-family="sans-serif">{t:g}</text>'
        )
    out.append(
        f'<text x="{left + pw / 2}" y="{H - 20}" font-size="14" text-anchor="middle" font-family="sans-serif">decision nodes</text>'
    )
    out.append(
        f'<text x="20" y="{top + ph / 2}" font-size="14" text-anchor="middle" font-family="sans-serif" '
        f'transform="rotate(-90 20 {top + ph / 2})">accuracy</text>'
    )
    front = pareto_front(rows)
    if front:
        pts = " ".join(f"{sx(r.decision_nodes):.2f},{sy(r.accuracy):.2f}" for r in front)
        out.append(f'<polyline class="pareto" points="{pts}" fill="none" stroke="black" stroke-dasharray="4 3"/>')
    for r in rows:
        out.append(
            f'<circle class="marker" cx="{sx(r.decision_nodes):.2f}" cy="{sy(r.accuracy):.2f}" r="6" '
            f'fill="{color[r.zeta]}" fill-opacity="0.8" stroke="black"><title>zeta={r.zeta:g} seed={r.seed} '
            f"acc={r.accuracy:.4f} nodes={r.decision_nodes}</title></circle>"
        )
    lx = left + pw + 20
    out.append(f'<text x="{lx}" y="{top}" font-size="13" font-family="sans-serif">zeta</text>')
    for i, z in enumerate(zetas):
        y = top + 20 + 20 * i
        out.append(f'<circle cx="{lx + 6}" cy="{y}" r="6" fill="{color[z]}" stroke="black"/>')
        out.append(f'<text x="{lx + 18}" y="{y + 4}" font-size="12" font-family="sans-serif">{z:g}</text>')
    y = top + 20 + 20 * len(zetas) + 10
    out.append(f'<line x1="{lx}" y1="{y}" x2="{lx + 12}" y2="{y}" stroke="black" stroke-dasharray="4 3"/>')
    out.append(f'<text x="{lx + 18}" y="{y + 4}" font-size="12" font-family="sans-serif">Pareto front</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def sweep_instance(dataset, p: int, gamma: float, max_depth: int) -> IbmdpInstance:
    return IbmdpInstance(dataset, p=p, zeta=0.0, gamma=gamma, max_igas=max_depth)
