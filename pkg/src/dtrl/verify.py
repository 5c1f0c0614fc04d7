"""Numerical property checks: observation-MDP equivalence, depth recovery, exact gradient, brute-force optimum."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from dtrl.dataset import Dataset, gen_toy
from dtrl.ibmdp import (
    FeatureBounds,
    FullState,
    FullStateSpace,
    IbmdpInstance,
    Split,
    TabularPolicy,
    action_mask,
    apply_iga,
    evaluate_policy_exact,
    igas_since_base,
    low_mask,
    policy_gradient_exact,
    random_policy,
    softmax_policy,
    split_threshold,
)
from dtrl.oibmdp import OibmdpModel, policy_return
from dtrl.solvers import policy_iteration

TOY_SEEDS = (0, 1, 2, 3, 4)
TOY_ZETA = 0.5
TOY_GAMMA = 0.99


@dataclass
class CheckReport:
    name: str
    passed: bool
    max_discrepancy: float
    tolerance: float
    cases: int
    details: list = field(default_factory=list)
    failure: dict | None = None

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max discrepancy {self.max_discrepancy:.3e} (tolerance {self.tolerance:g}) over {self.cases} cases"


def toy_instance(seed: int, max_igas: int = 3, zeta: float = TOY_ZETA, gamma: float = TOY_GAMMA) -> IbmdpInstance:
    return IbmdpInstance(gen_toy(seed).dataset, p=1, zeta=zeta, gamma=gamma, max_igas=max_igas)


# --- observation-MDP equivalence ------------------------------------------------


def check_theorem1(seed: int = 0, policies_per_task: int = 100, tolerance: float = 1e-8, tasks=TOY_SEEDS) -> CheckReport:
    """Random reactive policies have the same return in the IBMDP and the observation MDP.

    Half of the policies are stochastic (Dirichlet rows), half deterministic.
    """
    rng = np.random.default_rng(seed)
    worst, failure, cases = 0.0, None, 0
    details = []
    for task in tasks:
        inst = toy_instance(task)
        model = OibmdpModel(inst)
        space = FullStateSpace(inst)
        task_worst = 0.0
        for i in range(policies_per_task):
            if i % 2 == 0:
                policy = random_policy(model.mask, rng)
            else:
                choice = np.array([rng.choice(np.flatnonzero(row)) for row in model.mask])
                policy = TabularPolicy.deterministic(choice, model.n_actions)
            j_full = evaluate_policy_exact(inst, policy, space).J
            j_obs, _ = policy_return(model, policy)
            gap = abs(j_full - j_obs)
            cases += 1
            task_worst = max(task_worst, gap)
            if gap > worst:
                worst = gap
                if gap > tolerance:
                    failure = {"task": task, "policy_index": i, "J_ibmdp": j_full, "J_oibmdp": j_obs, "probs": policy.probs.tolist()}
        details.append((task, task_worst))
    return CheckReport("theorem1", worst <= tolerance, worst, tolerance, cases, details, failure)


# --- depth recovery from bounds --------------------------------------------------


def _random_dataset(rng, n, d) -> Dataset:
    x = rng.random((n, d))
    y = np.arange(n) % 2
    return Dataset(x, y, ("a", "b"), tuple(f"f{k}" for k in range(d)), np.tile([0.0, 1.0], (d, 1)))


def check_prop1(seed: int = 0, rollouts: int = 10_000, max_len: int = 8, configs=((1, 2), (2, 3))) -> CheckReport:
    """Replay random IGA sequences and compare the true count with the one recovered from bounds."""
    rng = np.random.default_rng(seed)
    mismatches, cases = 0, 0
    failure = None
    details = []
    for p, d in configs:
        inst = IbmdpInstance(_random_dataset(rng, 32, d), p=p, zeta=0.0, gamma=0.9, max_igas=max_len)
        config_mismatch = 0
        for _ in range(rollouts):
            state = FullState(int(rng.integers(32)), FeatureBounds.root(d))
            length = int(rng.integers(0, max_len + 1))
            if igas_since_base(state.bounds, p) != 0:
                config_mismatch += 1
            for true_count in range(1, length + 1):
                action = Split(int(rng.integers(d)), int(rng.integers(1, p + 1)))
                state, _ = apply_iga(state, action, inst)
                cases += 1
                if igas_since_base(state.bounds, p) != true_count:
                    config_mismatch += 1
                    if failure is None:
                        failure = {"p": p, "d": d, "bounds": str(state.bounds), "true": true_count}
        mismatches += config_mismatch
        details.append(((p, d), config_mismatch))
    return CheckReport("prop1", mismatches == 0, float(mismatches), 0.0, cases, details, failure)


# --- exact gradient --------------------------------------------------------------


def finite_difference_gradient(instance, logits, space, step=1e-5):
    mask = action_mask(instance.observations, instance.dataset.n_classes)
    grad = np.zeros_like(logits)
    for o, a in zip(*np.nonzero(mask)):
        plus = logits.copy()
        plus[o, a] += step
        minus = logits.copy()
        minus[o, a] -= step
        jp = evaluate_policy_exact(instance, softmax_policy(plus, mask), space).J
        jm = evaluate_policy_exact(instance, softmax_policy(minus, mask), space).J
        grad[o, a] = (jp - jm) / (2 * step)
    return grad


def check_prop2(seed: int = 0, tables: int = 20, tolerance: float = 1e-5, step: float = 1e-5, task: int = 0, max_igas: int = 2) -> CheckReport:
    """Analytic softmax gradients against central finite differences of the exact return."""
    rng = np.random.default_rng(seed)
    inst = toy_instance(task, max_igas=max_igas)
    space = FullStateSpace(inst)
    mask = action_mask(inst.observations, inst.dataset.n_classes)
    worst, failure = 0.0, None
    details = []
    for t in range(tables):
        logits = np.where(mask, rng.normal(scale=1.0, size=mask.shape), 0.0)
        grad, _ = policy_gradient_exact(inst, logits, space)
        fd = finite_difference_gradient(inst, logits, space, step)
        err = float(np.max(np.abs(grad - fd)))
        details.append((t, err))
        if err > worst:
            worst = err
            if err > tolerance:
                failure = {"table": t, "logits": logits.tolist(), "error": err}
    return CheckReport("prop2", worst <= tolerance, worst, tolerance, tables * int(mask.sum()), details, failure)


# --- exhaustive oracle ---------------------------------------------------------------


def enumerate_trees(dataset: Dataset, p: int, max_igas: int, bounds: FeatureBounds | None = None, depth: int = 0):
    """Every tree a depth-capped deterministic reactive policy can encode.

    Trees are nested tuples: ``("leaf", h)`` or ``("split", k, threshold, low, high)``.
    Two policies that agree on every observation they can reach encode the
    same tree, so this covers all deterministic reactive policies.
    """
    d, K = dataset.n_features, dataset.n_classes
    bounds = bounds or FeatureBounds.root(d)
    out = [("leaf", h) for h in range(K)]
    if depth < max_igas:
        for k in range(d):
            for u in range(1, p + 1):
                t = split_threshold(bounds, k, u, p)
                lows = enumerate_trees(dataset, p, max_igas, bounds.refine(k, t, low=True), depth + 1)
                highs = enumerate_trees(dataset, p, max_igas, bounds.refine(k, t, low=False), depth + 1)
                out.extend(("split", k, t, lo, hi) for lo, hi in itertools.product(lows, highs))
    return out


def renewal_return(tree, dataset: Dataset, zeta: float, gamma: float) -> float:
    """Return of a tree from per-sample routing: each episode earns zeta per split then +-1, and restarts.

    ``J = E[episode reward] / (1 - E[gamma ** episode length])`` with the sample
    drawn uniformly; independent of any Bellman solve.
    """
    n = dataset.n_samples
    depth = np.zeros(n, dtype=np.int64)
    pred = np.zeros(n, dtype=np.int64)
    stack = [(tree, np.arange(n), 0)]
    while stack:
        node, idx, dep = stack.pop()
        if node[0] == "leaf":
            depth[idx] = dep
            pred[idx] = node[1]
            continue
        _, k, t, lo, hi = node
        m = low_mask(dataset.samples[idx, k], t)
        stack.append((lo, idx[m], dep + 1))
        stack.append((hi, idx[~m], dep + 1))
    r = np.where(pred == dataset.labels, 1.0, -1.0)
    g = gamma**depth
    episode = zeta * (1.0 - g) / (1.0 - gamma) + g * r
    return float(episode.mean() / (1.0 - gamma * g.mean()))


def brute_force_optimum(dataset: Dataset, p: int, max_igas: int, zeta: float, gamma: float):
    best, best_tree, count = -np.inf, None, 0
    for tree in enumerate_trees(dataset, p, max_igas):
        count += 1
        J = renewal_return(tree, dataset, zeta, gamma)
        if J > best:
            best, best_tree = J, tree
    return best, best_tree, count


def enumerate_all_policies(model: OibmdpModel):
    """Every deterministic policy over all observations (use only on tiny models)."""
    choices = [np.flatnonzero(row) for row in model.mask]
    for combo in itertools.product(*choices):
        yield TabularPolicy.deterministic(np.array(combo), model.n_actions)


def check_oracle(seed: int = 0, tolerance: float = 1e-10, max_igas: int = 2, tasks=TOY_SEEDS, zetas=(-1.0, -0.2, 0.2, TOY_ZETA, 0.9)) -> CheckReport:
    """Policy iteration's optimum equals the best of all enumerated trees."""
    worst, failure, cases = 0.0, None, 0
    details = []
    for task in tasks:
        for zeta in zetas:
            inst = toy_instance(task, max_igas=max_igas, zeta=zeta)
            solved, _ = policy_iteration(OibmdpModel(inst))
            best, _, count = brute_force_optimum(inst.dataset, 1, max_igas, zeta, inst.gamma)
            gap = abs(solved.J - best)
            cases += count
            details.append((task, zeta, solved.J, best, count))
            if gap > worst:
                worst = gap
                if gap > tolerance:
                    failure = {"task": task, "zeta": zeta, "J_pi": solved.J, "J_brute": best}
    return CheckReport("oracle", worst <= tolerance, worst, tolerance, cases, details, failure)


CHECKS = {
    "theorem1": check_theorem1,
    "prop1": check_prop1,
    "prop2": check_prop2,
    "oracle": check_oracle,
}
