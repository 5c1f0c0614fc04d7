"""Fully observable MDP over feature bounds, with counting-derived dynamics.

Observations are the reachable non-empty boxes. Predicting class ``h`` in
box ``o`` earns ``(n_h - (n_o - n_h)) / n_o`` and restarts at the root; a
split earns ``zeta`` and moves to each child box with probability
proportional to its sample count.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from dtrl.ibmdp import (
    FullStateSpace,
    IbmdpInstance,
    ObservationSpace,
    Predict,
    TabularPolicy,
    action_mask,
    evaluate_policy_exact,
)


class OibmdpModel:
    """Observation MDP for one ``(dataset, p, zeta, gamma, max_igas)``.

    Arrays are indexed by observation (rows) and action (columns; the
    ``K`` predicts first, then splits in (feature, numerator) order).
    ``reward`` holds NaN at masked actions. ``prob_low[o, j]`` is the chance
    split ``j`` sends the chain to ``child_low[o, j]``; the rest goes to
    ``child_high[o, j]``. A child index of -1 means the box is empty, in
    which case its probability is exactly 0.
    """

    def __init__(self, instance: IbmdpInstance, obs: ObservationSpace | None = None):
        self.instance = instance
        self.obs = obs if obs is not None else instance.observations
        ds = instance.dataset
        self.n_classes = ds.n_classes
        self.zeta = float(instance.zeta)
        self.gamma = float(instance.gamma)
        self.p = instance.p
        self.max_igas = instance.max_igas
        self.actions = instance.actions
        self.counts = np.array(
            [np.bincount(ds.labels[m], minlength=ds.n_classes) for m in self.obs.members], dtype=np.int64
        )
        self.size = self.counts.sum(axis=1)
        self.mask = action_mask(self.obs, ds.n_classes)
        self.depth = self.obs.depth
        self.child_low = self.obs.child_low
        self.child_high = self.obs.child_high

        K = ds.n_classes
        n = len(self.obs)
        # exact predict rewards as numerator / size[o]
        self.reward_num = 2 * self.counts - self.size[:, None]
        self.reward = np.full((n, self.n_actions), np.nan)
        self.reward[:, :K] = self.reward_num / self.size[:, None]
        split_reward = np.where(self.mask[:, K:], self.zeta, np.nan)
        self.reward[:, K:] = split_reward

        low_size = np.where(self.child_low >= 0, self.size[np.maximum(self.child_low, 0)], 0)
        high_size = np.where(self.child_high >= 0, self.size[np.maximum(self.child_high, 0)], 0)
        self.low_count = low_size
        self.high_count = high_size
        total = low_size + high_size
        with np.errstate(invalid="ignore", divide="ignore"):
            self.prob_low = np.where(total > 0, low_size / np.maximum(total, 1), 0.0)

    @property
    def n_obs(self) -> int:
        return len(self.obs)

    @property
    def n_actions(self) -> int:
        return self.n_classes + self.obs.n_splits

    def with_zeta(self, zeta: float) -> OibmdpModel:
        """Same observation structure, different IGA reward."""
        return OibmdpModel(self.instance.with_zeta(zeta), self.obs)

    # exact views --------------------------------------------------------------

    def reward_exact(self, o: int, a: int) -> Fraction:
        K = self.n_classes
        if a < K:
            return Fraction(int(self.reward_num[o, a]), int(self.size[o]))
        if not self.mask[o, a]:
            raise ValueError("masked action")
        return Fraction(self.zeta)

    def successors(self, o: int, a: int) -> list[tuple[int, Fraction]]:
        """Exact successor distribution of ``(o, a)``."""
        K = self.n_classes
        if a < K:
            return [(0, Fraction(1))]
        if not self.mask[o, a]:
            raise ValueError("masked action")
        j = a - K
        lo_n, hi_n = int(self.low_count[o, j]), int(self.high_count[o, j])
        out = []
        if lo_n:
            out.append((int(self.child_low[o, j]), Fraction(lo_n, lo_n + hi_n)))
        if hi_n:
            out.append((int(self.child_high[o, j]), Fraction(hi_n, lo_n + hi_n)))
        return out

    def bounds(self, o: int):
        return self.obs.bounds(o)

    # backups ------------------------------------------------------------------

    def q_values(self, V: np.ndarray) -> np.ndarray:
        """One-step lookahead ``R + gamma * E[V(next)]``; -inf at masked actions."""
        K = self.n_classes
        Q = np.empty((self.n_obs, self.n_actions))
        Q[:, :K] = self.reward[:, :K] + self.gamma * V[0]
        v_low = np.where(self.child_low >= 0, V[np.maximum(self.child_low, 0)], 0.0)
        v_high = np.where(self.child_high >= 0, V[np.maximum(self.child_high, 0)], 0.0)
        cont = self.prob_low * v_low + (1.0 - self.prob_low) * v_high
        Q[:, K:] = np.where(self.mask[:, K:], self.zeta + self.gamma * cont, -np.inf)
        return Q


def build_model(dataset, p: int = 1, zeta: float = 0.5, gamma: float = 0.99, max_igas: int = 3) -> OibmdpModel:
    if max_igas < 1:
        raise ValueError("max_igas must be >= 1")
    return OibmdpModel(IbmdpInstance(dataset, p=p, zeta=zeta, gamma=gamma, max_igas=max_igas))


def policy_return(model: OibmdpModel, policy: TabularPolicy) -> tuple[float, np.ndarray]:
    """Exact ``(J, V)`` of a reactive policy on the observation chain.

    Splits strictly increase depth and every predict returns to the root, so
    each value is affine in the root value: ``V(o) = W(o) + C(o) V(root)``.
    ``W`` and ``C`` follow from one backward pass over depth levels, and
    ``V(root) = W(root) / (1 - C(root))``. This is Gaussian elimination on the
    Bellman system in topological order.
    """
    K = model.n_classes
    gamma = model.gamma
    probs = policy.probs
    n = model.n_obs
    W = np.zeros(n)
    C = np.zeros(n)
    pred_p = probs[:, :K]
    split_p = probs[:, K:]
    base_w = np.einsum("ij,ij->i", pred_p, np.nan_to_num(model.reward[:, :K]))
    base_c = gamma * pred_p.sum(axis=1)
    lo = model.child_low
    hi = model.child_high
    pl = model.prob_low
    for depth in range(int(model.depth.max()), -1, -1):
        idx = np.flatnonzero(model.depth == depth)
        w = base_w[idx].copy()
        c = base_c[idx].copy()
        sp_ = split_p[idx]
        if np.any(sp_ > 0):
            lo_i, hi_i, pl_i = lo[idx], hi[idx], pl[idx]
            w_next = pl_i * np.where(lo_i >= 0, W[np.maximum(lo_i, 0)], 0.0) + (1 - pl_i) * np.where(
                hi_i >= 0, W[np.maximum(hi_i, 0)], 0.0
            )
            c_next = pl_i * np.where(lo_i >= 0, C[np.maximum(lo_i, 0)], 0.0) + (1 - pl_i) * np.where(
                hi_i >= 0, C[np.maximum(hi_i, 0)], 0.0
            )
            w += np.einsum("ij,ij->i", sp_, model.zeta + gamma * w_next)
            c += np.einsum("ij,ij->i", sp_, gamma * c_next)
        W[idx] = w
        C[idx] = c
    root_value = W[0] / (1.0 - C[0])
    V = W + C * root_value
    return float(V[0]), V


def bellman_residual(model: OibmdpModel, policy: TabularPolicy, V: np.ndarray) -> float:
    Q = model.q_values(V)
    Q = np.where(np.isfinite(Q), Q, 0.0)
    return float(np.max(np.abs((policy.probs * Q).sum(axis=1) - V)))


# --- Theorem-1 support ---------------------------------------------------------


@dataclass
class ConsistencyReport:
    max_reward_gap: float
    max_transition_gap: float
    worst: tuple | None = None

    @property
    def max_discrepancy(self) -> float:
        return max(self.max_reward_gap, self.max_transition_gap)


def marginal_consistency(model: OibmdpModel, instance: IbmdpInstance, exact: bool = True) -> ConsistencyReport:
    """Compare the model against ``sum_s p(s|o) R'(s, a)`` and the aggregated IBMDP transitions.

    ``p(s|o)`` is uniform over the samples in box ``o``; each sample's reward
    and successor come from the per-sample IBMDP semantics (label match,
    IGA replayed on exact bounds). With ``exact=True`` the model side is read
    as rationals, otherwise from the float tables the solvers use.
    """
    from dtrl.ibmdp import FullState, apply_iga

    obs = instance.observations
    ds = instance.dataset
    K = ds.n_classes
    worst = None
    r_gap = 0.0
    t_gap = 0.0
    for o in range(model.n_obs):
        members = obs.members[o]
        n_o = len(members)
        bounds = obs.bounds(o)
        for a, act in enumerate(model.actions):
            if not model.mask[o, a]:
                continue
            if isinstance(act, Predict):
                rewards = np.where(ds.labels[members] == act.cls, 1, -1)
                expected_r = Fraction(int(rewards.sum()), n_o)
                expected_t = {0: Fraction(1)}
            else:
                expected_r = Fraction(instance.zeta)
                expected_t: dict[int, Fraction] = {}
                for i in members:
                    nxt, _ = apply_iga(FullState(int(i), bounds), act, instance)
                    o2 = obs.index_of(nxt.bounds)
                    expected_t[o2] = expected_t.get(o2, Fraction(0)) + Fraction(1, n_o)
            if exact:
                got_r = model.reward_exact(o, a)
                got_t = dict(model.successors(o, a))
            else:
                got_r = Fraction(float(model.reward[o, a]))
                got_t = {}
                if a < K:
                    got_t[0] = Fraction(1)
                else:
                    j = a - K
                    for child, pr in ((model.child_low[o, j], model.prob_low[o, j]), (model.child_high[o, j], 1.0 - model.prob_low[o, j])):
                        if child >= 0:
                            got_t[int(child)] = got_t.get(int(child), Fraction(0)) + Fraction(float(pr))
            gap = abs(float(expected_r - got_r))
            if gap > r_gap:
                r_gap, worst = gap, ("reward", o, a)
            for o2 in set(expected_t) | set(got_t):
                gap = abs(float(expected_t.get(o2, 0) - got_t.get(o2, 0)))
                if gap > t_gap:
                    t_gap, worst = gap, ("transition", o, a, o2)
    return ConsistencyReport(r_gap, t_gap, worst)


def theorem1_gap(instance: IbmdpInstance, model: OibmdpModel, policy: TabularPolicy, space: FullStateSpace | None = None):
    """``|J_IBMDP - J_OIBMDP|`` for one reactive policy."""
    j_full = evaluate_policy_exact(instance, policy, space).J
    j_obs, _ = policy_return(model, policy)
    return abs(j_full - j_obs), j_full, j_obs


def simulate(model: OibmdpModel, policy: TabularPolicy, steps: int, rng: np.random.Generator) -> np.ndarray:
    """Visit counts per observation over ``steps`` transitions of the observation chain."""
    K = model.n_classes
    visits = np.zeros(model.n_obs, dtype=np.int64)
    cdf = np.cumsum(policy.probs, axis=1)
    o = 0
    u_act = rng.random(steps)
    u_tr = rng.random(steps)
    for t in range(steps):
        visits[o] += 1
        a = int(np.searchsorted(cdf[o], u_act[t] * cdf[o, -1], side="right"))
        a = min(a, model.n_actions - 1)
        if a < K:
            o = 0
        else:
            j = a - K
            o = int(model.child_low[o, j]) if u_tr[t] < model.prob_low[o, j] else int(model.child_high[o, j])
    return visits


# --- text dump -------------------------------------------------------------------

MODEL_FORMAT = "dtrl-model v1"


def dump_model(model: OibmdpModel, fh) -> None:
    """Write the model as text.

    Layout::

        # dtrl-model v1
        params n_obs=<n> n_classes=<K> n_features=<d> p=<p> zeta=<z> gamma=<g> max_igas=<M>
        obs <i> depth=<m> n=<|X_o|> counts=<c_1>,...,<c_K> bounds=<L_1>:<U_1>,...   (rationals a/b)
        act <i> <action> reward=<r> next=<o'>@<prob>[,<o''>@<prob>]

    Actions are ``C<h>`` for predicts and ``S<k>/<u>`` for splits; rewards and
    probabilities are exact rationals. Masked actions are omitted.
    """
    K = model.n_classes
    fh.write(f"# {MODEL_FORMAT}\n")
    fh.write(
        f"params n_obs={model.n_obs} n_classes={K} n_features={model.obs.n_features} p={model.p} "
        f"zeta={model.zeta!r} gamma={model.gamma!r} max_igas={model.max_igas}\n"
    )
    for o in range(model.n_obs):
        b = model.bounds(o)
        bounds = ",".join(f"{lo}:{hi}" for lo, hi in zip(b.lower, b.upper))
        counts = ",".join(str(int(c)) for c in model.counts[o])
        fh.write(f"obs {o} depth={int(model.depth[o])} n={int(model.size[o])} counts={counts} bounds={bounds}\n")
        for a, act in enumerate(model.actions):
            if not model.mask[o, a]:
                continue
            name = f"C{act.cls}" if isinstance(act, Predict) else f"S{act.feature}/{act.numerator}"
            succ = ",".join(f"{o2}@{pr}" for o2, pr in model.successors(o, a))
            fh.write(f"act {o} {name} reward={model.reward_exact(o, a)} next={succ}\n")
