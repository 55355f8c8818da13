"""Small tabular MDPs with finite-support stochastic rewards.

Provides chain-style test environments, fixed-policy rollout datasets, and an
exact categorical distributional-DP oracle used as ground truth for return
distributions.  All constructed objects are immutable and safe to share.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .dist1d import CategoricalDistribution
from .errors import ConfigError, UsageError

ROW_ATOL = 1e-12


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.asarray(a, dtype=dtype).copy()
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class RewardSupport:
    """Finite support of a stochastic reward: values with probabilities."""

    values: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values)
        p = _frozen(self.probs)
        if v.size == 0:
            raise ConfigError("reward support must not be empty")
        if v.shape != p.shape:
            raise ConfigError("reward values and probs must have equal length")
        if np.any(p < -ROW_ATOL) or abs(p.sum() - 1.0) > ROW_ATOL:
            raise ConfigError("reward probabilities must sum to 1 within 1e-12")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_pairs(cls, pairs) -> "RewardSupport":
        pairs = list(pairs)
        if not pairs:
            raise ConfigError("reward support must not be empty")
        return cls(np.array([v for v, _ in pairs]), np.array([p for _, p in pairs]))

    def mean(self) -> float:
        return float(self.values @ self.probs)


DETERMINISTIC_ZERO = RewardSupport(np.array([0.0]), np.array([1.0]))


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP with per-(s, a) finite-support stochastic rewards.

    Attributes
    ----------
    transition : (S, A, S) array of next-state probabilities.
    rewards : nested tuple, rewards[s][a] is a RewardSupport.
    terminal : (S,) boolean flags; terminal states self-loop with reward 0.
    gamma : discount in (0, 1).
    """

    n_states: int
    n_actions: int
    transition: np.ndarray
    rewards: tuple
    terminal: np.ndarray
    gamma: float

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ConfigError("gamma must lie strictly inside (0, 1)")
        tr = _frozen(self.transition)
        term = _frozen(self.terminal, dtype=bool)
        if tr.shape != (self.n_states, self.n_actions, self.n_states):
            raise ConfigError("transition tensor must have shape (S, A, S)")
        if term.shape != (self.n_states,):
            raise ConfigError("terminal flags must have shape (S,)")
        if np.any(np.abs(tr.sum(axis=2) - 1.0) > ROW_ATOL):
            raise ConfigError("each transition row must sum to 1 within 1e-12")
        rw = tuple(tuple(row) for row in self.rewards)
        if len(rw) != self.n_states or any(len(row) != self.n_actions for row in rw):
            raise ConfigError("rewards must be an (S, A) grid of RewardSupport")
        for s in range(self.n_states):
            if not term[s]:
                continue
            for a in range(self.n_actions):
                if tr[s, a, s] != 1.0:
                    raise ConfigError(f"terminal state {s} must self-loop")
                sup = rw[s][a]
                if sup.values.size != 1 or sup.values[0] != 0.0:
                    raise ConfigError(f"terminal state {s} must have reward 0")
        object.__setattr__(self, "transition", tr)
        object.__setattr__(self, "terminal", term)
        object.__setattr__(self, "rewards", rw)

    def reward_extremes(self) -> tuple[float, float]:
        lo = min(float(sup.values.min()) for row in self.rewards for sup in row)
        hi = max(float(sup.values.max()) for row in self.rewards for sup in row)
        return lo, hi


@dataclass(frozen=True)
class FixedPolicy:
    """Stationary stochastic policy: per-state action probabilities."""

    probs: np.ndarray

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 2:
            raise ConfigError("policy probs must be a (S, A) matrix")
        if np.any(p < -ROW_ATOL) or np.any(np.abs(p.sum(axis=1) - 1.0) > ROW_ATOL):
            raise ConfigError("each policy row must sum to 1 within 1e-12")
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "FixedPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def from_action_probs(cls, n_states: int, action_probs) -> "FixedPolicy":
        row = np.asarray(action_probs, dtype=np.float64)
        return cls(np.tile(row, (n_states, 1)))


@dataclass(frozen=True)
class Transition:
    s: int
    a: int
    r: float
    s_next: int
    mask: int  # 0 iff s_next is terminal


@dataclass(frozen=True)
class Dataset:
    """Offline transition set plus per-state action visit counts."""

    transitions: tuple
    behaviour_counts: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "transitions", tuple(self.transitions))
        counts = _frozen(self.behaviour_counts, dtype=np.int64)
        recount = np.zeros_like(counts)
        np.add.at(recount, (self._col("s", int), self._col("a", int)), 1)
        if not np.array_equal(recount, counts):
            raise ConfigError("behaviour_counts inconsistent with transitions")
        object.__setattr__(self, "behaviour_counts", counts)

    def _col(self, name, dtype):
        return np.array([getattr(t, name) for t in self.transitions], dtype=dtype)

    def __len__(self) -> int:
        return len(self.transitions)

    @classmethod
    def from_transitions(cls, transitions, n_states: int, n_actions: int) -> "Dataset":
        ts = tuple(transitions)
        counts = np.zeros((n_states, n_actions), dtype=np.int64)
        for t in ts:
            counts[t.s, t.a] += 1
        return cls(ts, counts)

    def arrays(self) -> dict[str, np.ndarray]:
        """Column view for vectorized batch sampling."""
        return {
            "s": self._col("s", np.int64),
            "a": self._col("a", np.int64),
            "r": self._col("r", np.float64),
            "s_next": self._col("s_next", np.int64),
            "mask": self._col("mask", np.float64),
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "a", "r", "s_next", "mask"])
            for t in self.transitions:
                w.writerow([t.s, t.a, format(t.r, ".17g"), t.s_next, t.mask])

    @classmethod
    def from_csv(cls, path, n_states: int, n_actions: int) -> "Dataset":
        ts = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                ts.append(Transition(int(row["s"]), int(row["a"]), float(row["r"]),
                                     int(row["s_next"]), int(row["mask"])))
        return cls.from_transitions(ts, n_states, n_actions)


def build_chain_mdp(n_states: int, reward_spec, gamma: float) -> TabularMdp:
    """Deterministic left-to-right chain ending in a terminal state.

    `reward_spec` gives one reward support per chain step (n_states - 1 of
    them), each a sequence of (value, probability) pairs; a single support is
    broadcast to every step.  The chain has one action.
    """
    if n_states < 2:
        raise ConfigError("chain needs at least 2 states")
    steps = list(reward_spec)
    if steps and isinstance(steps[0], tuple) and not isinstance(steps[0][0], (tuple, list)):
        steps = [steps]  # single support given flat
    if len(steps) == 1:
        steps = steps * (n_states - 1)
    if len(steps) != n_states - 1:
        raise ConfigError(f"expected {n_states - 1} reward supports, got {len(steps)}")
    supports = [RewardSupport.from_pairs(st) for st in steps]

    S, A = n_states, 1
    tr = np.zeros((S, A, S))
    rewards = []
    for s in range(S - 1):
        tr[s, 0, s + 1] = 1.0
        rewards.append((supports[s],))
    tr[S - 1, 0, S - 1] = 1.0
    rewards.append((DETERMINISTIC_ZERO,))
    terminal = np.zeros(S, dtype=bool)
    terminal[S - 1] = True
    return TabularMdp(S, A, tr, tuple(rewards), terminal, gamma)


def build_branch_chain(prefix_len: int, gamma: float,
                       branch_rewards=(1.0, -1.0)) -> TabularMdp:
    """Linear chain that forks once into two reward branches.

    States 0..prefix_len-1 step right with reward 0; the last prefix state
    splits equiprobably into two branch states, each paying its branch reward
    on the way into the shared terminal state.  Returns from every prefix
    state are bimodal, and the bimodality reaches Bellman targets through
    bootstrapped next-state values rather than per-transition reward draws.
    """
    if prefix_len < 1:
        raise ConfigError("branch chain needs at least one prefix state")
    r_hi, r_lo = branch_rewards
    S, A = prefix_len + 3, 1
    hi, lo, term = prefix_len, prefix_len + 1, prefix_len + 2
    tr = np.zeros((S, A, S))
    rewards = []
    for s in range(prefix_len - 1):
        tr[s, 0, s + 1] = 1.0
        rewards.append((DETERMINISTIC_ZERO,))
    tr[prefix_len - 1, 0, hi] = 0.5
    tr[prefix_len - 1, 0, lo] = 0.5
    rewards.append((DETERMINISTIC_ZERO,))
    tr[hi, 0, term] = 1.0
    rewards.append((RewardSupport(np.array([float(r_hi)]), np.array([1.0])),))
    tr[lo, 0, term] = 1.0
    rewards.append((RewardSupport(np.array([float(r_lo)]), np.array([1.0])),))
    tr[term, 0, term] = 1.0
    rewards.append((DETERMINISTIC_ZERO,))
    terminal = np.zeros(S, dtype=bool)
    terminal[term] = True
    return TabularMdp(S, A, tr, tuple(rewards), terminal, gamma)


def build_decision_chain(n_states: int, gamma: float,
                         action_rewards=(1.0, 0.0, 2.0)) -> TabularMdp:
    """Chain where every action steps right but rewards differ by action.

    Used for offline experiments: action 0 is good, action 1 is poor, and
    action 2 is best but deliberately left out of behaviour data to exercise
    the support constraint of rejection extraction.
    """
    if n_states < 2:
        raise ConfigError("chain needs at least 2 states")
    S, A = n_states, len(action_rewards)
    tr = np.zeros((S, A, S))
    rewards = []
    for s in range(S - 1):
        row = []
        for a in range(A):
            tr[s, a, s + 1] = 1.0
            row.append(RewardSupport(np.array([action_rewards[a]]), np.array([1.0])))
        rewards.append(tuple(row))
    for a in range(A):
        tr[S - 1, a, S - 1] = 1.0
    rewards.append(tuple(DETERMINISTIC_ZERO for _ in range(A)))
    terminal = np.zeros(S, dtype=bool)
    terminal[S - 1] = True
    return TabularMdp(S, A, tr, tuple(rewards), terminal, gamma)


def generate_dataset(mdp: TabularMdp, behaviour: FixedPolicy, n: int,
                     horizon: int, seed: int, start_state: int = 0) -> Dataset:
    """Collect exactly n transitions by episodic rollout of `behaviour`.

    Pure function of its arguments: the same seed always yields the same
    dataset.
    """
    if n < 1:
        raise UsageError("need at least one transition")
    rng = np.random.default_rng(seed)
    transitions = []
    while len(transitions) < n:
        s = start_state
        for _ in range(horizon):
            a = int(rng.choice(mdp.n_actions, p=behaviour.probs[s]))
            sup = mdp.rewards[s][a]
            r = float(sup.values[rng.choice(sup.values.size, p=sup.probs)])
            s_next = int(rng.choice(mdp.n_states, p=mdp.transition[s, a]))
            mask = 0 if mdp.terminal[s_next] else 1
            transitions.append(Transition(s, a, r, s_next, mask))
            if len(transitions) >= n or mask == 0:
                break
            s = s_next
    return Dataset.from_transitions(transitions, mdp.n_states, mdp.n_actions)


@dataclass(frozen=True)
class DistributionalTable:
    """Per-(s, a) categorical return distributions on a shared support grid."""

    support: np.ndarray
    probs: np.ndarray  # (S, A, N)

    def dist(self, s: int, a: int) -> CategoricalDistribution:
        p = self.probs[s, a]
        return CategoricalDistribution(self.support, p / p.sum())

    def means(self) -> np.ndarray:
        return self.probs @ self.support

    @property
    def atom_width(self) -> float:
        return float(self.support[1] - self.support[0])


def project_onto_grid(values: np.ndarray, masses: np.ndarray, support: np.ndarray) -> np.ndarray:
    """Project point masses onto the grid, splitting between neighbours."""
    n = support.size
    lo, width = support[0], support[1] - support[0]
    pos = np.clip((values - lo) / width, 0.0, n - 1)
    left = np.floor(pos).astype(np.int64)
    left = np.minimum(left, n - 2)
    frac = pos - left
    out = np.zeros(n)
    np.add.at(out, left, masses * (1.0 - frac))
    np.add.at(out, left + 1, masses * frac)
    return out


def dp_sweep(mdp: TabularMdp, policy: FixedPolicy, probs: np.ndarray,
              support: np.ndarray) -> np.ndarray:
    """One application of the projected distributional Bellman operator."""
    S, A, N = probs.shape
    state_mix = np.einsum("sa,san->sn", policy.probs, probs)
    new = np.zeros_like(probs)
    proj_zero = project_onto_grid(np.array([0.0]), np.array([1.0]), support)
    for s in range(S):
        if mdp.terminal[s]:
            new[s, :, :] = proj_zero
            continue
        for a in range(A):
            sup = mdp.rewards[s][a]
            acc = np.zeros(N)
            for s_next in np.nonzero(mdp.transition[s, a] > 0)[0]:
                p_next = mdp.transition[s, a, s_next]
                if mdp.terminal[s_next]:
                    src_vals, src_mass = np.array([0.0]), np.array([1.0])
                else:
                    src_vals, src_mass = support, state_mix[s_next]
                for rv, rp in zip(sup.values, sup.probs):
                    acc += project_onto_grid(rv + mdp.gamma * src_vals,
                                        (p_next * rp) * src_mass, support)
            new[s, a] = acc
    return new


def default_support_bounds(mdp: TabularMdp) -> tuple[float, float]:
    """Grid bounds guaranteed to cover every attainable return (and 0)."""
    r_lo, r_hi = mdp.reward_extremes()
    lo = min(0.0, r_lo / (1.0 - mdp.gamma))
    hi = max(0.0, r_hi / (1.0 - mdp.gamma))
    if hi - lo < 1e-9:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def auto_sweeps(mdp: TabularMdp, support_size: int) -> int:
    lo, hi = default_support_bounds(mdp)
    width = (hi - lo) / (support_size - 1)
    k = math.log(max(width / max(hi - lo, 1e-12), 1e-300)) / math.log(mdp.gamma)
    return max(16, int(math.ceil(k)) + 8)


def oracle_return_distribution(mdp: TabularMdp, policy: FixedPolicy,
                               support_size: int = 401, sweeps: int | None = None,
                               v_min: float | None = None,
                               v_max: float | None = None) -> DistributionalTable:
    """Ground-truth return distributions by exact categorical DP.

    Iterates the projected distributional Bellman operator from the zero
    distribution until (near) its fixed point; accurate to within roughly one
    atom width in sup-W1.
    """
    if support_size < 2:
        raise ConfigError("support needs at least 2 atoms")
    lo, hi = default_support_bounds(mdp)
    if v_min is not None or v_max is not None:
        if v_min is None or v_max is None or v_min > lo + 1e-12 or v_max < hi - 1e-12:
            raise ConfigError(
                f"support bounds must cover [{lo:.6g}, {hi:.6g}] to include attainable returns")
        lo, hi = v_min, v_max
    if sweeps is None:
        sweeps = auto_sweeps(mdp, support_size)
    support = np.linspace(lo, hi, support_size)
    probs = np.tile(project_onto_grid(np.array([0.0]), np.array([1.0]), support),
                    (mdp.n_states, mdp.n_actions, 1))
    for _ in range(sweeps):
        probs = dp_sweep(mdp, policy, probs, support)
    support.flags.writeable = False
    probs.flags.writeable = False
    return DistributionalTable(support, probs)


def scalar_q_values(mdp: TabularMdp, policy: FixedPolicy) -> np.ndarray:
    """Exact expected-return Q by solving the linear policy-evaluation system."""
    S, A = mdp.n_states, mdp.n_actions
    r_bar = np.array([[mdp.rewards[s][a].mean() for a in range(A)] for s in range(S)])
    r_bar[mdp.terminal, :] = 0.0
    # Q = r + gamma * P * Pi * Q over flattened (s, a) pairs; terminal rows absorb.
    m = np.zeros((S * A, S * A))
    for s in range(S):
        for a in range(A):
            if mdp.terminal[s]:
                continue
            for s_next in range(S):
                p = mdp.transition[s, a, s_next]
                if p == 0.0 or mdp.terminal[s_next]:
                    continue
                for a_next in range(A):
                    m[s * A + a, s_next * A + a_next] = p * policy.probs[s_next, a_next]
    q = np.linalg.solve(np.eye(S * A) - mdp.gamma * m, r_bar.ravel())
    return q.reshape(S, A)


def policy_return(mdp: TabularMdp, policy: FixedPolicy, start_state: int = 0) -> float:
    """Exact expected discounted return of `policy` from the start state."""
    q = scalar_q_values(mdp, policy)
    return float(policy.probs[start_state] @ q[start_state])


def greedy_policy(mdp: TabularMdp, q: np.ndarray) -> FixedPolicy:
    probs = np.zeros((mdp.n_states, mdp.n_actions))
    probs[np.arange(mdp.n_states), q.argmax(axis=1)] = 1.0
    return FixedPolicy(probs)
