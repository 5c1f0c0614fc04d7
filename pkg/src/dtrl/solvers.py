"""Exact and approximate solvers for observation MDPs, plus exact policy-gradient ascent on the IBMDP."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from dtrl.errors import ConvergenceError
from dtrl.ibmdp import (
    FullStateSpace,
    IbmdpInstance,
    TabularPolicy,
    action_mask,
    evaluate_policy_exact,
    policy_gradient_exact,
    softmax_policy,
)
from dtrl.oibmdp import OibmdpModel, bellman_residual, policy_return

ALGORITHMS = ("policy-iteration", "value-iteration", "q-learning", "exact-pg")
EXACT_ALGORITHMS = ("policy-iteration", "value-iteration")

# Q-values closer than this (relative) count as tied
TIE_RTOL = 1e-11


@dataclass
class SolverConfig:
    algorithm: str = "policy-iteration"
    tolerance: float = 1e-10
    max_iterations: int = 10_000
    learning_rate: float = 0.05
    alpha: float = 0.1
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_fraction: float = 0.8
    total_steps: int = 2_000_000
    eval_every: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be > 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        for eps in (self.epsilon_start, self.epsilon_end):
            if not 0.0 <= eps <= 1.0:
                raise ValueError("exploration rates must be in [0, 1]")


@dataclass
class TrainingTrace:
    iterations: list[int] = field(default_factory=list)
    returns: list[float] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)
    _t0: float = field(default_factory=time.perf_counter, repr=False)

    def record(self, iteration: int, J: float) -> None:
        if self.iterations and iteration <= self.iterations[-1]:
            raise ValueError("trace iterations must be strictly increasing")
        self.iterations.append(int(iteration))
        self.returns.append(float(J))
        self.wall_clock.append(time.perf_counter() - self._t0)

    def __len__(self):
        return len(self.iterations)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write("# dtrl-trace v1\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "J", "wall_clock_s"])
            for row in zip(self.iterations, self.returns, self.wall_clock):
                w.writerow([row[0], repr(row[1]), f"{row[2]:.6f}"])


@dataclass
class SolvedPolicy:
    policy: TabularPolicy
    V: np.ndarray
    J: float
    Q: np.ndarray | None = None
    logits: np.ndarray | None = None

    @property
    def probs(self):
        return self.policy.probs


def greedy_actions(Q: np.ndarray, current: np.ndarray | None = None) -> np.ndarray:
    """Argmax per row with deterministic tie-breaking.

    Among actions within ``TIE_RTOL`` of the best, keep ``current`` if it is
    one of them, else take the lowest index (predicts before splits, lower
    class, lower feature and numerator).
    """
    best = Q.max(axis=1)
    tol = TIE_RTOL * np.maximum(1.0, np.abs(best))
    near = Q >= (best - tol)[:, None]
    choice = np.argmax(near, axis=1)
    if current is not None:
        keep = near[np.arange(len(Q)), current]
        choice = np.where(keep, current, choice)
    return choice


def _finish(model: OibmdpModel, actions: np.ndarray) -> SolvedPolicy:
    policy = TabularPolicy.deterministic(actions, model.n_actions)
    J, V = policy_return(model, policy)
    return SolvedPolicy(policy, V, J, model.q_values(V))


def policy_iteration(model: OibmdpModel, config: SolverConfig | None = None):
    """Howard policy iteration with exact evaluation on the observation chain."""
    config = config or SolverConfig()
    trace = TrainingTrace()
    actions = np.argmax(model.counts, axis=1)  # start from predict-majority everywhere
    for it in range(1, config.max_iterations + 1):
        policy = TabularPolicy.deterministic(actions, model.n_actions)
        J, V = policy_return(model, policy)
        trace.record(it, J)
        Q = model.q_values(V)
        new = greedy_actions(Q, actions)
        if np.array_equal(new, actions):
            break
        actions = new
    else:
        raise ConvergenceError(f"policy iteration did not stabilise in {config.max_iterations} iterations")
    # canonical tie-breaking among optimal actions
    Q = model.q_values(V)
    final = greedy_actions(Q)
    solved = _finish(model, final)
    gap = float(np.max(solved.Q.max(axis=1) - solved.V))
    if gap > config.tolerance * max(1.0, abs(solved.J)):
        raise ConvergenceError(f"policy iteration ended with Bellman gap {gap:.3e}")
    if not np.array_equal(final, actions):
        trace.record(trace.iterations[-1] + 1, solved.J)
    return solved, trace


def value_iteration(model: OibmdpModel, config: SolverConfig | None = None):
    """Synchronous value iteration; stops once the sup-norm update is below ``tol (1 - gamma) / (2 gamma)``.

    The greedy policy is then evaluated exactly, so the reported ``J`` is the
    true return of the returned policy.
    """
    config = config or SolverConfig()
    trace = TrainingTrace()
    gamma = model.gamma
    threshold = np.inf if gamma == 0 else config.tolerance * (1.0 - gamma) / (2.0 * gamma)
    V = np.zeros(model.n_obs)
    for it in range(1, config.max_iterations + 1):
        V_new = model.q_values(V).max(axis=1)
        delta = float(np.max(np.abs(V_new - V)))
        V = V_new
        trace.record(it, float(V[0]))
        if delta < threshold:
            break
    else:
        raise ConvergenceError(f"value iteration did not converge in {config.max_iterations} sweeps")
    solved = _finish(model, greedy_actions(model.q_values(V)))
    trace.record(trace.iterations[-1] + 1, solved.J)
    return solved, trace


def q_learning_dt(model: OibmdpModel, config: SolverConfig | None = None, Q0: np.ndarray | None = None):
    """Epsilon-greedy tabular Q-learning on the simulated observation chain.

    At observations at the depth cap both acting and bootstrapping are
    restricted to predicts; those masked entries are never written.
    """
    config = config or SolverConfig(algorithm="q-learning")
    rng = np.random.default_rng(config.seed)
    K, A = model.n_classes, model.n_actions
    gamma, alpha, zeta = model.gamma, config.alpha, model.zeta
    Q = np.zeros((model.n_obs, A)) if Q0 is None else np.array(Q0, dtype=float)
    legal = [np.flatnonzero(row) for row in model.mask]
    reward = model.reward.tolist()
    child_low = model.child_low.tolist()
    child_high = model.child_high.tolist()
    prob_low = model.prob_low.tolist()
    trace = TrainingTrace()

    decay_steps = max(1, int(config.epsilon_fraction * config.total_steps))
    eps0, eps1 = config.epsilon_start, config.epsilon_end

    def greedy(o):
        q = Q[o, legal[o]]
        return int(legal[o][int(np.argmax(q))])

    o = 0
    chunk = 65536
    step = 0
    while step < config.total_steps:
        n = min(chunk, config.total_steps - step)
        u_eps = rng.random(n)
        u_act = rng.random(n)
        u_tr = rng.random(n)
        for t in range(n):
            s = step + t
            eps = eps1 if s >= decay_steps else eps0 + (eps1 - eps0) * s / decay_steps
            acts = legal[o]
            if u_eps[t] < eps:
                a = int(acts[int(u_act[t] * len(acts))])
            else:
                a = greedy(o)
            if a < K:
                r = reward[o][a]
                nxt = 0
            else:
                j = a - K
                r = zeta
                nxt = child_low[o][j] if u_tr[t] < prob_low[o][j] else child_high[o][j]
            target = r + gamma * Q[nxt, legal[nxt]].max()
            Q[o, a] += alpha * (target - Q[o, a])
            o = nxt
            if (s + 1) % config.eval_every == 0 or s + 1 == config.total_steps:
                J, _ = policy_return(model, _greedy_policy(model, Q))
                trace.record(s + 1, J)
        step += n
    policy = _greedy_policy(model, Q)
    J, V = policy_return(model, policy)
    return SolvedPolicy(policy, V, J, Q), trace


def _greedy_policy(model: OibmdpModel, Q: np.ndarray) -> TabularPolicy:
    masked = np.where(model.mask, Q, -np.inf)
    return TabularPolicy.deterministic(greedy_actions(masked), model.n_actions)


def exact_policy_gradient(instance: IbmdpInstance, config: SolverConfig | None = None, space: FullStateSpace | None = None):
    """Gradient ascent on tabular softmax logits with exact gradients on the full IBMDP.

    Starts from uniform logits; stops at ``max_iterations`` or when the
    gradient norm drops below ``tolerance``. Returns the final (stochastic)
    policy.
    """
    config = config or SolverConfig(algorithm="exact-pg")
    space = space or FullStateSpace(instance)
    obs = instance.observations
    mask = action_mask(obs, instance.dataset.n_classes)
    theta = np.zeros(mask.shape)
    trace = TrainingTrace()
    for it in range(1, config.max_iterations + 1):
        grad, J = policy_gradient_exact(instance, theta, space)
        trace.record(it, J)
        if np.linalg.norm(grad) < config.tolerance:
            break
        theta = theta + config.learning_rate * grad
    else:
        trace.record(config.max_iterations + 1, evaluate_policy_exact(instance, softmax_policy(theta, mask), space).J)
    policy = softmax_policy(theta, mask)
    ev = evaluate_policy_exact(instance, policy, space)
    return SolvedPolicy(policy, _obs_values(space, ev.V, len(obs)), ev.J, logits=theta), trace


def _obs_values(space: FullStateSpace, V: np.ndarray, n_obs: int) -> np.ndarray:
    """Average full-state value per observation (uniform over member samples)."""
    total = np.zeros(n_obs)
    count = np.zeros(n_obs)
    np.add.at(total, space.obs_index, V)
    np.add.at(count, space.obs_index, 1)
    return total / np.maximum(count, 1)


def solve(model: OibmdpModel, config: SolverConfig, space: FullStateSpace | None = None):
    """Dispatch on ``config.algorithm``."""
    if config.algorithm == "policy-iteration":
        return policy_iteration(model, config)
    if config.algorithm == "value-iteration":
        return value_iteration(model, config)
    if config.algorithm == "q-learning":
        return q_learning_dt(model, config)
    return exact_policy_gradient(model.instance, config, space)


__all__ = [
    "ALGORITHMS",
    "SolvedPolicy",
    "SolverConfig",
    "TrainingTrace",
    "bellman_residual",
    "exact_policy_gradient",
    "greedy_actions",
    "policy_iteration",
    "q_learning_dt",
    "solve",
    "value_iteration",
]
