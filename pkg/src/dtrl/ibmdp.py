"""Iterative bounding MDPs over a classification dataset.

A full state is ``(sample index, feature bounds)``. Bounds are exact
rationals; reachable bounds for splitting parameter ``p`` have per-feature
form ``(a / q**n, b / q**n)`` with ``q = p + 1``, which is also how the
observation enumeration encodes them (three int64 arrays), so dictionary
keys stay cheap.

Routing follows the tree convention: a sample with ``x_k <= v`` takes the
low branch (``U_k := v``), otherwise the high branch (``L_k := v``). Box
membership is defined to agree with routing, i.e. ``L_k < x_k <= U_k`` with
the lower end closed at 0.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from dtrl.dataset import Dataset
from dtrl.errors import (
    MaskedActionError,
    ProblemTooLargeError,
    UnsupportedSplitParameterError,
)


def is_prime(n: int) -> bool:
    if n < 2:
        return False
    i = 2
    while i * i <= n:
        if n % i == 0:
            return False
        i += 1
    return True


# --- bounds and actions ------------------------------------------------------


@dataclass(frozen=True)
class FeatureBounds:
    """Per-feature known ranges ``(L_k, U_k)`` as exact rationals."""

    lower: tuple[Fraction, ...]
    upper: tuple[Fraction, ...]

    def __post_init__(self):
        lower = tuple(Fraction(v) for v in self.lower)
        upper = tuple(Fraction(v) for v in self.upper)
        if len(lower) != len(upper) or not lower:
            raise ValueError("lower and upper must be non-empty and of equal length")
        for lo, hi in zip(lower, upper):
            if not (0 <= lo < hi <= 1):
                raise ValueError(f"invalid bound pair ({lo}, {hi})")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def root(cls, d: int) -> FeatureBounds:
        return cls((Fraction(0),) * d, (Fraction(1),) * d)

    @property
    def n_features(self) -> int:
        return len(self.lower)

    def width(self, k: int) -> Fraction:
        return self.upper[k] - self.lower[k]

    def is_root(self) -> bool:
        return all(lo == 0 for lo in self.lower) and all(hi == 1 for hi in self.upper)

    def refine(self, k: int, threshold: Fraction, low: bool) -> FeatureBounds:
        if low:
            upper = self.upper[:k] + (threshold,) + self.upper[k + 1 :]
            return FeatureBounds(self.lower, upper)
        lower = self.lower[:k] + (threshold,) + self.lower[k + 1 :]
        return FeatureBounds(lower, self.upper)

    def contains(self, x) -> bool:
        for k, v in enumerate(x):
            lo, hi = self.lower[k], self.upper[k]
            if v > hi:
                return False
            if lo != 0 and not v > lo:
                return False
        return True

    def as_floats(self) -> tuple[tuple[float, ...], tuple[float, ...]]:
        return tuple(map(float, self.lower)), tuple(map(float, self.upper))

    def __str__(self):
        return " ".join(f"[{lo},{hi}]" for lo, hi in zip(self.lower, self.upper))


@dataclass(frozen=True)
class Predict:
    cls: int


@dataclass(frozen=True)
class Split:
    feature: int
    numerator: int  # threshold fraction is numerator / (p + 1)


def action_list(n_classes: int, n_features: int, p: int) -> list:
    """All actions in canonical order: predicts by class, then splits by (feature, numerator).

    The order doubles as the greedy tie-break preference.
    """
    acts: list = [Predict(h) for h in range(n_classes)]
    acts += [Split(k, u) for k in range(n_features) for u in range(1, p + 1)]
    return acts


def split_threshold(bounds: FeatureBounds, k: int, u: int, p: int) -> Fraction:
    """Exact threshold ``L_k + u / (p + 1) * (U_k - L_k)``."""
    if not 1 <= u <= p:
        raise ValueError(f"split numerator must be in 1..{p}, got {u}")
    lo, hi = bounds.lower[k], bounds.upper[k]
    return lo + Fraction(u, p + 1) * (hi - lo)


def goes_low(x: float, threshold: Fraction) -> bool:
    """Exact ``x <= threshold`` (Python compares float and Fraction exactly)."""
    return x <= threshold


def low_mask(values: np.ndarray, threshold: Fraction) -> np.ndarray:
    """Vectorized exact ``values <= threshold``.

    ``float(threshold)`` is correctly rounded, so the float comparison can only
    disagree with the exact one where a value equals that float; those
    entries are re-checked exactly.
    """
    t = float(threshold)
    mask = values <= t
    tie = values == t
    if tie.any():
        for i in np.flatnonzero(tie):
            mask[i] = values[i] <= threshold
    return mask


def igas_since_base(bounds: FeatureBounds, p: int) -> int:
    """Number of information-gathering actions since the last base action.

    Sums, over features, the exponent of ``p + 1`` in the reduced denominator
    of ``U_k - L_k``. Only well defined when ``p + 1`` is prime.
    """
    q = p + 1
    if not is_prime(q):
        raise UnsupportedSplitParameterError(f"p + 1 = {q} is not prime; depth cannot be recovered from bounds")
    total = 0
    for k in range(bounds.n_features):
        den = bounds.width(k).denominator
        while den % q == 0:
            den //= q
            total += 1
    return total


# --- instance ----------------------------------------------------------------


@dataclass(frozen=True)
class IbmdpInstance:
    dataset: Dataset
    p: int = 1
    zeta: float = 0.5
    gamma: float = 0.99
    max_igas: int = 3

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if not is_prime(self.p + 1):
            raise UnsupportedSplitParameterError(f"p + 1 = {self.p + 1} must be prime for depth-capped IBMDPs")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if self.max_igas < 0:
            raise ValueError("max_igas must be >= 0")
        if (self.p + 1) ** self.max_igas >= 2**62:
            raise ValueError("max_igas too large for int64 bound encoding")
        if self.zeta >= 1.0:
            warnings.warn("zeta >= R_max: degenerate without depth cap", RuntimeWarning, stacklevel=3)

    @property
    def n_actions(self) -> int:
        return self.dataset.n_classes + self.dataset.n_features * self.p

    @cached_property
    def actions(self) -> list:
        return action_list(self.dataset.n_classes, self.dataset.n_features, self.p)

    @cached_property
    def observations(self) -> ObservationSpace:
        return enumerate_observations(self)

    def with_zeta(self, zeta: float) -> IbmdpInstance:
        inst = IbmdpInstance(self.dataset, self.p, zeta, self.gamma, self.max_igas)
        if "observations" in self.__dict__:
            inst.__dict__["observations"] = self.__dict__["observations"]
        return inst


@dataclass(frozen=True)
class FullState:
    sample_index: int
    bounds: FeatureBounds


def initial_state(instance: IbmdpInstance, rng: np.random.Generator) -> FullState:
    i = int(rng.integers(instance.dataset.n_samples))
    return FullState(i, FeatureBounds.root(instance.dataset.n_features))


def apply_iga(state: FullState, action: Split, instance: IbmdpInstance) -> tuple[FullState, float]:
    """Refine the bounds of ``action.feature`` around the sample; reward zeta."""
    if igas_since_base(state.bounds, instance.p) >= instance.max_igas:
        raise MaskedActionError(f"split not allowed: {instance.max_igas} IGAs already taken")
    k = action.feature
    v = split_threshold(state.bounds, k, action.numerator, instance.p)
    x = float(instance.dataset.samples[state.sample_index, k])
    bounds = state.bounds.refine(k, v, low=goes_low(x, v))
    return FullState(state.sample_index, bounds), float(instance.zeta)


def apply_predict(
    state: FullState, action: Predict, instance: IbmdpInstance, rng: np.random.Generator
) -> tuple[FullState, float]:
    """Classify the current sample, then restart from a uniformly drawn sample at root bounds."""
    y = int(instance.dataset.labels[state.sample_index])
    reward = 1.0 if action.cls == y else -1.0
    return initial_state(instance, rng), reward


def step(state: FullState, action, instance: IbmdpInstance, rng: np.random.Generator):
    if isinstance(action, Split):
        return apply_iga(state, action, instance)
    return apply_predict(state, action, instance, rng)


# --- observation enumeration -------------------------------------------------


class ObservationSpace:
    """Reachable, non-empty feature bounds within ``max_igas`` IGAs of the root.

    Row ``i`` describes observation ``i``: per-feature bound numerators
    ``lo[i, k] / q**fdepth[i, k]`` and ``hi[i, k] / q**fdepth[i, k]``, the
    member sample indices, and for every split action (column ``j`` of
    ``child_low``/``child_high``, split ``k = j // p``, ``u = j % p + 1``)
    the index of each child box, ``-1`` when the child is empty or the
    observation is at the depth cap. Index 0 is the root.
    """

    def __init__(self, n_features, p, max_igas, lo, hi, fdepth, members, child_low, child_high):
        self.n_features = n_features
        self.p = p
        self.q = p + 1
        self.max_igas = max_igas
        self.lo = lo
        self.hi = hi
        self.fdepth = fdepth
        self.members = members
        self.child_low = child_low
        self.child_high = child_high
        self.depth = fdepth.sum(axis=1)
        self._index = {self._key(lo[i], hi[i], fdepth[i]): i for i in range(len(members))}

    @staticmethod
    def _key(lo_row, hi_row, fd_row) -> bytes:
        return lo_row.tobytes() + hi_row.tobytes() + fd_row.tobytes()

    def __len__(self):
        return len(self.members)

    @property
    def n_splits(self) -> int:
        return self.n_features * self.p

    def capped(self) -> np.ndarray:
        return self.depth >= self.max_igas

    def bounds(self, i: int) -> FeatureBounds:
        q = self.q
        den = [q ** int(n) for n in self.fdepth[i]]
        lower = tuple(Fraction(int(a), m) for a, m in zip(self.lo[i], den))
        upper = tuple(Fraction(int(b), m) for b, m in zip(self.hi[i], den))
        return FeatureBounds(lower, upper)

    def encode(self, bounds: FeatureBounds):
        q = self.q
        lo = np.empty(self.n_features, dtype=np.int64)
        hi = np.empty(self.n_features, dtype=np.int64)
        fd = np.empty(self.n_features, dtype=np.int64)
        for k in range(self.n_features):
            n = 0
            den = bounds.width(k).denominator
            while den % q == 0:
                den //= q
                n += 1
            if den != 1:
                return None
            m = q**n
            a, b = bounds.lower[k] * m, bounds.upper[k] * m
            if a.denominator != 1 or b.denominator != 1:
                return None
            lo[k], hi[k], fd[k] = a.numerator, b.numerator, n
        return lo, hi, fd

    def index_of(self, bounds: FeatureBounds) -> int:
        enc = self.encode(bounds)
        if enc is None:
            raise KeyError(str(bounds))
        return self._index[self._key(*enc)]

    def get(self, bounds: FeatureBounds, default=None):
        try:
            return self.index_of(bounds)
        except KeyError:
            return default

    def split_of(self, j: int) -> tuple[int, int]:
        return j // self.p, j % self.p + 1


def _expand(x, p, q, lo_row, hi_row, fd_row, members):
    """Children of one box for every split action, as (j, low_members, high_members, k, v_num)."""
    d = x.shape[1]
    for k in range(d):
        a, b, n = int(lo_row[k]), int(hi_row[k]), int(fd_row[k])
        den = q ** (n + 1)
        col = x[members, k]
        for u in range(1, p + 1):
            v_num = a * q + u * (b - a)
            mask = low_mask(col, Fraction(v_num, den))
            yield k * p + (u - 1), members[mask], members[~mask], k, v_num


def enumerate_observations(instance: IbmdpInstance) -> ObservationSpace:
    """Breadth-first enumeration from the root, pruning boxes without samples.

    Order is by depth, then by discovering parent, then by action order.
    """
    x = instance.dataset.samples
    n, d = x.shape
    p, q, cap = instance.p, instance.p + 1, instance.max_igas
    n_splits = d * p

    lo_rows = [np.zeros(d, dtype=np.int64)]
    hi_rows = [np.ones(d, dtype=np.int64)]
    fd_rows = [np.zeros(d, dtype=np.int64)]
    members = [np.arange(n, dtype=np.int64)]
    depth = [0]
    index = {ObservationSpace._key(lo_rows[0], hi_rows[0], fd_rows[0]): 0}
    child_low: list[np.ndarray] = []
    child_high: list[np.ndarray] = []

    i = 0
    while i < len(members):
        cl = np.full(n_splits, -1, dtype=np.int64)
        ch = np.full(n_splits, -1, dtype=np.int64)
        if depth[i] < cap:
            lo_row, hi_row, fd_row = lo_rows[i], hi_rows[i], fd_rows[i]
            for j, low_m, high_m, k, v_num in _expand(x, p, q, lo_row, hi_row, fd_row, members[i]):
                for side, sub, out in ((0, low_m, cl), (1, high_m, ch)):
                    if len(sub) == 0:
                        continue
                    # denominators are per feature: only feature k moves to q**(n+1)
                    c_lo = lo_row.copy()
                    c_hi = hi_row.copy()
                    c_fd = fd_row.copy()
                    c_fd[k] += 1
                    c_lo[k] = lo_row[k] * q if side == 0 else v_num
                    c_hi[k] = v_num if side == 0 else hi_row[k] * q
                    key = ObservationSpace._key(c_lo, c_hi, c_fd)
                    idx = index.get(key)
                    if idx is None:
                        idx = len(members)
                        index[key] = idx
                        lo_rows.append(c_lo)
                        hi_rows.append(c_hi)
                        fd_rows.append(c_fd)
                        members.append(sub)
                        depth.append(depth[i] + 1)
                    out[j] = idx
        child_low.append(cl)
        child_high.append(ch)
        i += 1

    return ObservationSpace(
        n_features=d,
        p=p,
        max_igas=cap,
        lo=np.array(lo_rows),
        hi=np.array(hi_rows),
        fdepth=np.array(fd_rows),
        members=members,
        child_low=np.array(child_low).reshape(len(members), n_splits),
        child_high=np.array(child_high).reshape(len(members), n_splits),
    )


def max_observation_count(d: int, p: int, max_igas: int) -> int:
    """Upper bound ``sum_m (2 p d)**m`` on the number of observations."""
    return sum((2 * p * d) ** m for m in range(max_igas + 1))


# --- policies ------------------------------------------------------------------


def action_mask(obs: ObservationSpace, n_classes: int) -> np.ndarray:
    """Boolean (n_obs, K + d p) table of legal actions."""
    m = np.ones((len(obs), n_classes + obs.n_splits), dtype=bool)
    m[obs.capped(), n_classes:] = False
    return m


@dataclass
class TabularPolicy:
    """Action distribution per observation, rows aligned with an ObservationSpace."""

    probs: np.ndarray  # (n_obs, n_actions)

    @classmethod
    def deterministic(cls, actions: np.ndarray, n_actions: int) -> TabularPolicy:
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs)

    @classmethod
    def uniform(cls, mask: np.ndarray) -> TabularPolicy:
        probs = mask.astype(float)
        return cls(probs / probs.sum(axis=1, keepdims=True))

    def greedy_actions(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)

    def check(self, mask: np.ndarray, atol: float = 1e-12) -> None:
        if self.probs.shape != mask.shape:
            raise ValueError(f"policy shape {self.probs.shape} != mask shape {mask.shape}")
        if np.any(self.probs < 0):
            raise ValueError("negative probabilities")
        if np.any(self.probs[~mask] != 0):
            raise ValueError("masked actions must have probability 0")
        if np.max(np.abs(self.probs.sum(axis=1) - 1.0)) > atol:
            raise ValueError("policy rows must sum to 1")


def softmax_policy(logits: np.ndarray, mask: np.ndarray) -> TabularPolicy:
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return TabularPolicy(e / e.sum(axis=1, keepdims=True))


def random_policy(mask: np.ndarray, rng: np.random.Generator) -> TabularPolicy:
    """Random stochastic policy (Dirichlet rows over the legal actions)."""
    w = rng.gamma(1.0, size=mask.shape) * mask
    return TabularPolicy(w / w.sum(axis=1, keepdims=True))


# --- full state space ---------------------------------------------------------

FULL_STATE_LIMIT = 1_000_000


class FullStateSpace:
    """Explicit IBMDP chain over reachable ``(sample, bounds)`` pairs.

    Successors are computed by replaying :func:`apply_iga` on the exact
    bounds of each state, independently of the counted children recorded in
    the observation space.
    """

    def __init__(self, instance: IbmdpInstance, limit: int = FULL_STATE_LIMIT):
        obs = instance.observations
        ds = instance.dataset
        size = sum(len(m) for m in obs.members)
        if size > limit:
            raise ProblemTooLargeError(f"IBMDP has {size} full states (limit {limit})")
        self.instance = instance
        self.obs_index = np.concatenate([np.full(len(m), o, dtype=np.int64) for o, m in enumerate(obs.members)])
        self.sample_index = np.concatenate(obs.members)
        self.n_states = size
        lookup = {(int(o), int(i)): s for s, (o, i) in enumerate(zip(self.obs_index, self.sample_index))}
        self.root_states = np.array([lookup[(0, i)] for i in range(ds.n_samples)], dtype=np.int64)

        K = ds.n_classes
        n_act = instance.n_actions
        # reward per (state, action); split successors per (state, split)
        self.reward = np.full((size, n_act), float(instance.zeta))
        y = ds.labels[self.sample_index]
        self.reward[:, :K] = -1.0
        self.reward[np.arange(size), y] = 1.0
        self.next_state = np.full((size, n_act - K), -1, dtype=np.int64)
        capped = obs.capped()
        bounds_cache = {}
        for s in range(size):
            o = int(self.obs_index[s])
            if capped[o]:
                continue
            b = bounds_cache.get(o)
            if b is None:
                b = bounds_cache[o] = obs.bounds(o)
            state = FullState(int(self.sample_index[s]), b)
            for j in range(n_act - K):
                k, u = obs.split_of(j)
                nxt, _ = apply_iga(state, Split(k, u), instance)
                o2 = obs.index_of(nxt.bounds)
                self.next_state[s, j] = lookup[(o2, nxt.sample_index)]
        self.mask = action_mask(obs, K)[self.obs_index]

    def transition_matrix(self, policy: TabularPolicy) -> sp.csr_matrix:
        """State-to-state matrix under ``policy`` (rows sum to 1)."""
        K = self.instance.dataset.n_classes
        n = self.n_states
        pi = policy.probs[self.obs_index]
        rows, cols, vals = [], [], []
        split_pi = pi[:, K:]
        valid = self.next_state >= 0
        r, j = np.nonzero(valid & (split_pi > 0))
        rows.append(r)
        cols.append(self.next_state[r, j])
        vals.append(split_pi[r, j])
        pred = pi[:, :K].sum(axis=1)
        nz = np.flatnonzero(pred > 0)
        N = len(self.root_states)
        rows.append(np.repeat(nz, N))
        cols.append(np.tile(self.root_states, len(nz)))
        vals.append(np.repeat(pred[nz] / N, N))
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        )

    def initial_distribution(self) -> np.ndarray:
        mu = np.zeros(self.n_states)
        mu[self.root_states] = 1.0 / len(self.root_states)
        return mu


@dataclass
class FullEvaluation:
    J: float
    V: np.ndarray  # (n_states,)
    Q: np.ndarray  # (n_states, n_actions), nan where masked

    @property
    def A(self) -> np.ndarray:
        return self.Q - self.V[:, None]


def _solve(matrix, rhs):
    return spla.spsolve(matrix.tocsc(), rhs)


def evaluate_policy_exact(instance: IbmdpInstance, policy: TabularPolicy, space: FullStateSpace | None = None):
    """Exact ``J``, ``V`` and ``Q`` of a reactive policy on the full IBMDP state space."""
    space = space or FullStateSpace(instance)
    gamma = instance.gamma
    K = instance.dataset.n_classes
    P = space.transition_matrix(policy)
    pi = policy.probs[space.obs_index]
    r = (pi * space.reward).sum(axis=1)
    lhs = sp.identity(space.n_states, format="csr") - gamma * P
    V = _solve(lhs, r)
    Q = np.full(space.reward.shape, np.nan)
    restart = V[space.root_states].mean()
    Q[:, :K] = space.reward[:, :K] + gamma * restart
    valid = space.next_state >= 0
    split_q = np.full(space.next_state.shape, np.nan)
    split_q[valid] = space.reward[:, K:][valid] + gamma * V[space.next_state[valid]]
    Q[:, K:] = split_q
    J = float(space.initial_distribution() @ V)
    return FullEvaluation(J=J, V=V, Q=Q)


def bellman_residual(instance: IbmdpInstance, policy: TabularPolicy, ev: FullEvaluation, space: FullStateSpace) -> float:
    P = space.transition_matrix(policy)
    pi = policy.probs[space.obs_index]
    r = (pi * space.reward).sum(axis=1)
    return float(np.max(np.abs(ev.V - (r + instance.gamma * (P @ ev.V)))))


def occupancy(instance: IbmdpInstance, policy: TabularPolicy, space: FullStateSpace | None = None) -> np.ndarray:
    """Normalized discounted state occupancy ``(1 - gamma) sum_t gamma^t Pr(s_t = s)``."""
    space = space or FullStateSpace(instance)
    gamma = instance.gamma
    P = space.transition_matrix(policy)
    lhs = sp.identity(space.n_states, format="csr") - gamma * P.T
    x = _solve(lhs, space.initial_distribution())
    return (1.0 - gamma) * x


def policy_gradient_exact(instance: IbmdpInstance, logits: np.ndarray, space: FullStateSpace | None = None):
    """Gradient of ``J`` with respect to tabular softmax logits over observations.

    Returns ``(gradient, J)``; masked entries of the gradient are 0.
    """
    space = space or FullStateSpace(instance)
    obs = instance.observations
    mask = action_mask(obs, instance.dataset.n_classes)
    policy = softmax_policy(logits, mask)
    ev = evaluate_policy_exact(instance, policy, space)
    d = occupancy(instance, policy, space)
    adv = np.nan_to_num(ev.A, nan=0.0)
    per_state = (d / (1.0 - instance.gamma))[:, None] * policy.probs[space.obs_index] * adv
    grad = np.zeros_like(logits, dtype=float)
    np.add.at(grad, space.obs_index, per_state)
    grad[~mask] = 0.0
    return grad, ev.J


# --- simulation ----------------------------------------------------------------


def rollout(instance: IbmdpInstance, policy: TabularPolicy, steps: int, rng: np.random.Generator, callback=None):
    """Simulate the IBMDP with exact-bounds semantics for ``steps`` transitions.

    ``callback(t, state, obs_idx, action_idx, reward, next_state)`` is called
    each step. Returns the list of rewards.
    """
    obs = instance.observations
    acts = instance.actions
    state = initial_state(instance, rng)
    o = 0
    cdf = np.cumsum(policy.probs, axis=1)
    rewards = np.empty(steps)
    for t in range(steps):
        a = int(np.searchsorted(cdf[o], rng.random() * cdf[o, -1], side="right"))
        a = min(a, len(acts) - 1)
        nxt, r = step(state, acts[a], instance, rng)
        rewards[t] = r
        o_next = 0 if isinstance(acts[a], Predict) else obs.index_of(nxt.bounds)
        if callback is not None:
            callback(t, state, o, a, r, nxt)
        state, o = nxt, o_next
    return rewards
