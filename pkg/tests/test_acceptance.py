"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

UCI inputs are read from ``$DTRL_DATA_DIR`` (default ``<repo>/data``) as
``banknote.csv``, ``diabetes.csv`` and ``wine.csv`` with label column ``class``.
"""

import time
from contextlib import nullcontext

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES, DATA_DIR, GAMMA, TOY_OPTIMUM, ZETA

from dtrl import cli
from dtrl.dataset import gen_toy, load_csv, normalize
from dtrl.ibmdp import IbmdpInstance
from dtrl.oibmdp import OibmdpModel
from dtrl.solvers import (
    SolverConfig,
    exact_policy_gradient,
    policy_iteration,
    q_learning_dt,
    value_iteration,
)
from dtrl.sweep import (
    DEFAULT_ZETAS,
    dominates_point,
    pareto_front,
    read_metrics,
    read_sweep_csv,
    run_sweep,
)
from dtrl.tree import load_tree, tree_return
from dtrl.verify import check_oracle, check_prop1, check_prop2, check_theorem1

TOY_SEEDS = range(5)
# dataset -> (depth cap, accuracy target, decision-node budget)
UCI = {"banknote": (5, 0.87, 4), "diabetes": (5, 0.80, 1), "wine": (4, 0.82, 4)}
UCI_RUNTIME_BUDGET = 30 * 60


def record(criterion: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# --- shared runs --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def toy_models():
    return {s: OibmdpModel(IbmdpInstance(gen_toy(s).dataset, zeta=ZETA, gamma=GAMMA, max_igas=3)) for s in TOY_SEEDS}


_uci_cache: dict = {}
_uci_elapsed: dict = {}


def uci_sweep(name, tmp_path_factory):
    """CLI sweep over the six default zetas with policy iteration; cached per dataset."""
    if name in _uci_cache:
        return _uci_cache[name]
    path = DATA_DIR / f"{name}.csv"
    if not path.exists():
        result = None
    else:
        depth = UCI[name][0]
        out = tmp_path_factory.mktemp(name) / "sweep.csv"
        t0 = time.perf_counter()
        code = cli.main(["sweep", "--data", str(path), "--label-col", "class", "--algo", "policy-iteration",
                         "--p", "1", "--max-depth", str(depth), "--out-csv", str(out)])
        _uci_elapsed[name] = time.perf_counter() - t0
        assert code == 0
        rows = read_sweep_csv(out)
        model = OibmdpModel(IbmdpInstance(normalize(load_csv(path, "class")), zeta=0.0, gamma=GAMMA, max_igas=depth))
        result = (model, rows)
    _uci_cache[name] = result
    return result


def _missing(name):
    return f"{DATA_DIR / (name + '.csv')} not found; the UCI file must be supplied (no network access to UCI here)"


# --- criteria -------------------------------------------------------------------------------


def test_criterion_1_toy_optimality(tmp_path, capsys):
    details, ok = [], True
    for s in TOY_SEEDS:
        assert cli.main(["gen-toy", "--seed", str(s), "--out-dir", str(tmp_path)]) == 0
        t0 = time.perf_counter()
        code = cli.main(["solve", "--data", str(tmp_path / f"toy-{s}/toy.csv"), "--algo", "policy-iteration",
                         "--zeta", "0.5", "--gamma", "0.99", "--p", "1", "--max-depth", "3", "--out", str(tmp_path / f"s{s}")])
        elapsed = time.perf_counter() - t0
        m = read_metrics(tmp_path / f"s{s}/metrics.txt")
        gap = abs(float(m["J"]) - TOY_OPTIMUM)
        good = code == 0 and float(m["accuracy"]) == 1.0 and int(m["decision_nodes"]) == 3 and gap <= 1e-6 and elapsed < 5
        ok &= good
        details.append(f"seed {s}: acc={m['accuracy']} nodes={m['decision_nodes']} |J-J*|={gap:.1e} {elapsed:.2f}s")
    capsys.readouterr()
    record("1 (toy optimality)", ok, f"J*={TOY_OPTIMUM:.10f}; " + "; ".join(details))


def test_criterion_2_theorem1():
    t0 = time.perf_counter()
    report = check_theorem1(seed=0)
    elapsed = time.perf_counter() - t0
    record("2 (theorem 1)", report.passed and report.cases == 500 and elapsed < 60,
           f"max |J_IBMDP - J_OIBMDP| = {report.max_discrepancy:.2e} over {report.cases} policies, {elapsed:.1f}s")


def test_criterion_3_prop1():
    t0 = time.perf_counter()
    report = check_prop1(seed=0)
    elapsed = time.perf_counter() - t0
    record("3 (depth recovery)", report.passed and elapsed < 10,
           f"{int(report.max_discrepancy)} mismatches over 2 x 10^4 rollouts ({report.cases} IGAs), {elapsed:.1f}s")


def test_criterion_4_prop2():
    t0 = time.perf_counter()
    report = check_prop2(seed=0)
    elapsed = time.perf_counter() - t0
    record("4 (exact gradient)", report.passed and elapsed < 120,
           f"max |analytic - finite difference| = {report.max_discrepancy:.2e} over {report.cases} partials, {elapsed:.1f}s")


def test_criterion_5_exact_policy_gradient():
    t0 = time.perf_counter()
    details, ok = [], True
    for s in TOY_SEEDS:
        inst = IbmdpInstance(gen_toy(s).dataset, zeta=ZETA, gamma=GAMMA, max_igas=3)
        solved, trace = exact_policy_gradient(inst, SolverConfig(algorithm="exact-pg", max_iterations=5000))
        reached = next((it for it, J in zip(trace.iterations, trace.returns) if J >= 0.99 * TOY_OPTIMUM), None)
        good = solved.J >= 0.99 * TOY_OPTIMUM and reached is not None
        ok &= good
        details.append(f"seed {s}: final J={solved.J:.4f} (within 1% at iteration {reached})")
    elapsed = time.perf_counter() - t0
    record("5 (exact policy gradient)", ok and elapsed < 600, "; ".join(details) + f"; {elapsed:.0f}s")


def test_criterion_6_oracle():
    t0 = time.perf_counter()
    report = check_oracle(zetas=(ZETA,))
    wide = check_oracle()
    elapsed = time.perf_counter() - t0
    record("6 (exhaustive oracle)", report.passed and wide.passed and elapsed < 60,
           f"|J_PI - J_brute| = {report.max_discrepancy:.1e} at zeta=0.5, {wide.max_discrepancy:.1e} over 5 zetas; "
           f"{report.cases // 5} trees per task, {elapsed:.1f}s")


@pytest.mark.slow
@pytest.mark.parametrize("name", list(UCI))
def test_criterion_7_uci_pareto(name, tmp_path_factory):
    result = uci_sweep(name, tmp_path_factory)
    if result is None:
        record(f"7 ({name})", False, _missing(name))
    _, rows = result
    depth, acc, nodes = UCI[name]
    front = pareto_front(rows)
    ok = len(rows) == 6 and dominates_point(front, acc, nodes)
    pts = ", ".join(f"({r.accuracy:.3f}, {r.decision_nodes})" for r in front)
    total = sum(_uci_elapsed.values())
    record(f"7 ({name})", ok and total < UCI_RUNTIME_BUDGET,
           f"M_max={depth}: front {pts} must reach accuracy >= {acc} with <= {nodes} nodes; {_uci_elapsed[name]:.1f}s")


def test_criterion_8_cross_solver_toy(toy_models):
    gaps = []
    for model in toy_models.values():
        pi, _ = policy_iteration(model)
        vi, _ = value_iteration(model, SolverConfig(algorithm="value-iteration"))
        gaps.append(abs(pi.J - vi.J))
    record("8 (toy)", max(gaps) <= 1e-6, f"max |J_VI - J_PI| = {max(gaps):.1e} over 5 toy models")


@pytest.mark.slow
@pytest.mark.parametrize("name", list(UCI))
def test_criterion_8_cross_solver_uci(name, tmp_path_factory):
    result = uci_sweep(name, tmp_path_factory)
    if result is None:
        record(f"8 ({name})", False, _missing(name))
    model, _rows = result
    gaps = []
    for zeta in DEFAULT_ZETAS:
        with pytest.warns(RuntimeWarning) if zeta >= 1 else nullcontext():
            m = model.with_zeta(zeta)
        pi, _ = policy_iteration(m)
        vi, _ = value_iteration(m, SolverConfig(algorithm="value-iteration"))
        gaps.append(abs(pi.J - vi.J))
    record(f"8 ({name})", max(gaps) <= 1e-6, f"max |J_VI - J_PI| = {max(gaps):.1e} over {len(gaps)} zetas")


def _dominance_gap(model, rows):
    worst = -np.inf
    for r in rows:
        m = model.with_zeta(r.zeta)
        J_star = policy_iteration(m)[0].J
        worst = max(worst, tree_return(load_tree(r.tree_path), m) - J_star)
    return worst


@pytest.mark.filterwarnings("ignore:zeta >= R_max")
def test_criterion_9_dominance_toy(tmp_path):
    worst, count = -np.inf, 0
    configs = {
        "policy-iteration": SolverConfig(),
        "value-iteration": SolverConfig(algorithm="value-iteration"),
        "q-learning": SolverConfig(algorithm="q-learning", total_steps=200_000, eval_every=50_000),
        "exact-pg": SolverConfig(algorithm="exact-pg", max_iterations=300),
    }
    for s in TOY_SEEDS:
        model = OibmdpModel(IbmdpInstance(gen_toy(s).dataset, zeta=0.0, gamma=GAMMA, max_igas=3))
        for algo, config in configs.items():
            rows = run_sweep(model, DEFAULT_ZETAS, algo, [s], tmp_path / f"{algo}-{s}", workers=1, base_config=config)
            worst = max(worst, _dominance_gap(model, rows))
            count += len(rows)
    record("9 (toy)", worst <= 1e-8, f"max tree_return - J* = {worst:.1e} over {count} rows from 4 solvers")


@pytest.mark.slow
@pytest.mark.filterwarnings("ignore:zeta >= R_max")
@pytest.mark.parametrize("name", list(UCI))
def test_criterion_9_dominance_uci(name, tmp_path_factory):
    result = uci_sweep(name, tmp_path_factory)
    if result is None:
        record(f"9 ({name})", False, _missing(name))
    model, rows = result
    worst = _dominance_gap(model, rows)
    record(f"9 ({name})", worst <= 1e-8, f"max tree_return - J* = {worst:.1e} over {len(rows)} rows")


@pytest.mark.slow
def test_criterion_10_q_learning_reported():
    details, ok = [], True
    for s in TOY_SEEDS:
        model = OibmdpModel(IbmdpInstance(gen_toy(s).dataset, zeta=ZETA, gamma=GAMMA, max_igas=3))
        solved, _ = q_learning_dt(model, SolverConfig(algorithm="q-learning", seed=s))
        ok &= solved.J <= TOY_OPTIMUM + 1e-8
        details.append(f"seed {s}: J={solved.J:.4f}")
    record("10 (tabular q-learning, reported only)", ok, "; ".join(details) + f"; J*={TOY_OPTIMUM:.4f}")
