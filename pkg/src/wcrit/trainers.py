"""Experiment drivers.

Fixed-policy distributional evaluation against the exact DP oracle, offline
training with rejection-sampling action selection, supervised fitting of
synthetic target distributions, and the DP contraction-rate study.  Every
driver is a pure function of its config (seed included): rerunning with the
same inputs reproduces the same outputs bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import baselines, dist1d, env, flowcritic
from .approx import (EmbeddingConfig, TargetParams, adam_init, adam_step,
                     ema_update, quantile_net_forward)
from .baselines import IqnConfig
from .errors import ConfigError, UsageError
from .flowcritic import FlowCriticConfig, TimeSchedule

EVAL_PAIR_CAP = 256


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class EnvSpec:
    """Declarative environment description used by configs and the CLI."""

    kind: str = "chain"  # chain | branch_chain | decision_chain
    n_states: int = 3
    gamma: float = 0.9
    rewards: str = "0:1|-1:0.5,1:0.5"  # chain: per-step supports, "v:p,v:p|..."
    branch_rewards: str = "1,-1"       # branch_chain: the two branch payoffs
    action_rewards: str = "1,0,2"      # decision_chain: reward per action
    behaviour: str = ""                # action probabilities; empty = uniform

    def __post_init__(self):
        if self.kind not in ("chain", "branch_chain", "decision_chain"):
            raise ConfigError(f"unknown environment kind {self.kind!r}")


def parse_reward_steps(spec: str):
    steps = []
    for part in spec.split("|"):
        atoms = []
        for atom in part.split(","):
            v, _, p = atom.partition(":")
            atoms.append((float(v), float(p)))
        steps.append(atoms)
    return steps


def build_env(spec: EnvSpec):
    """Construct (mdp, behaviour policy) from a declarative spec."""
    if spec.kind == "chain":
        mdp = env.build_chain_mdp(spec.n_states, parse_reward_steps(spec.rewards),
                                  spec.gamma)
    elif spec.kind == "branch_chain":
        hi, lo = (float(x) for x in spec.branch_rewards.split(","))
        mdp = env.build_branch_chain(spec.n_states - 3, spec.gamma, (hi, lo))
    else:
        action_rewards = tuple(float(x) for x in spec.action_rewards.split(","))
        mdp = env.build_decision_chain(spec.n_states, spec.gamma, action_rewards)
    if spec.behaviour:
        probs = [float(x) for x in spec.behaviour.split(",")]
        if len(probs) != mdp.n_actions:
            raise ConfigError("behaviour probabilities must cover every action")
        behaviour = env.FixedPolicy.from_action_probs(mdp.n_states, probs)
    else:
        behaviour = env.FixedPolicy.uniform(mdp.n_states, mdp.n_actions)
    return mdp, behaviour


@dataclass(frozen=True)
class RunConfig:
    """Everything one training run depends on, seed included."""

    env: EnvSpec = field(default_factory=EnvSpec)
    critic_kind: str = "flowiqn"  # flowiqn | independent_cfm | iqn
    flow: FlowCriticConfig = field(default_factory=FlowCriticConfig)
    iqn: IqnConfig = field(default_factory=IqnConfig)
    gradient_steps: int = 1000
    batch_size: int = 16
    eval_every: int = 1000
    seed: int = 0
    J: int = 8
    dataset_size: int = 2000
    horizon: int = 64
    eval_samples: int = 128
    support_size: int = 401
    lr: float = 1e-3
    rho: float = 0.005
    sched_refresh: int = 1000
    scalarize_grid: int = 8
    cosine_basis: int = 64
    fourier_freqs: int = 64
    hlgauss_bins: int = 51
    step_embed_dim: int = 128
    hlgauss_sigma: float = 0.0  # 0 = auto-scale to twice the bin width

    def __post_init__(self):
        if self.gradient_steps < 0 or self.batch_size < 1:
            raise ConfigError("gradient_steps must be >= 0 and batch_size >= 1")
        if self.critic_kind not in ("flowiqn", "independent_cfm", "iqn"):
            raise ConfigError(f"unknown critic kind {self.critic_kind!r}")


def iqm_or_mean(values) -> float:
    """IQM when at least 4 values are present, plain mean otherwise."""
    v = np.asarray(values, dtype=np.float64)
    return dist1d.iqm(v) if v.size >= 4 else float(v.mean())


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    mean_w2: float
    iqm_neg_w2: float
    sup_w2: float
    loss: float


@dataclass
class MetricsTrace:
    records: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def append(self, rec: MetricsRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise UsageError("trace steps must be strictly increasing")
        self.records.append(rec)

    @property
    def final(self) -> MetricsRecord:
        return self.records[-1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "mean_w2", "iqm_neg_w2", "sup_w2", "loss"])
            for r in self.records:
                w.writerow([r.step, format(r.mean_w2, ".17g"),
                            format(r.iqm_neg_w2, ".17g"), format(r.sup_w2, ".17g"),
                            format(r.loss, ".17g")])


@dataclass(frozen=True)
class EvalResult:
    pairs: tuple
    w2: np.ndarray
    mean: float
    sup: float
    iqm_neg: float


def evaluate_w2(sampler, oracle: env.DistributionalTable, pairs,
                n_samples: int) -> EvalResult:
    """Per-pair W2 between critic samples and the atomized oracle."""
    w2 = []
    for s, a in pairs:
        model = sampler(s, a, n_samples)
        target = dist1d.atomize(oracle.dist(s, a), n_samples)
        w2.append(dist1d.wasserstein_emp(model, target, 2.0, resample=n_samples))
    w2 = np.array(w2)
    if w2.size == 0:
        raise UsageError("evaluation needs at least one state-action pair")
    return EvalResult(tuple(pairs), w2, float(w2.mean()), float(w2.max()),
                      iqm_or_mean(-w2))


# ---------------------------------------------------------------------------
# shared run machinery


def _visited_pairs(data: env.Dataset):
    pairs = [(int(s), int(a)) for s, a in np.argwhere(data.behaviour_counts > 0)]
    return pairs[:EVAL_PAIR_CAP]


def _embedding_config(cfg: RunConfig, sm: flowcritic.SourceMap) -> EmbeddingConfig:
    span = max(sm.q_max - sm.q_min, 1e-6)
    lo = min(sm.q_min, sm.l) - 0.1 * span
    hi = max(sm.q_max, sm.u) + 0.1 * span
    sigma = cfg.hlgauss_sigma
    if sigma <= 0:
        sigma = 0.75 * (hi - lo) / cfg.hlgauss_bins
    return EmbeddingConfig(cosine_basis=cfg.cosine_basis,
                           fourier_dim=2 * cfg.fourier_freqs,
                           fourier_freqs=cfg.fourier_freqs,
                           hlgauss_bins=cfg.hlgauss_bins,
                           hlgauss_sigma=sigma,
                           hlgauss_range=(lo, hi),
                           step_embed_dim=cfg.step_embed_dim)


def fixed_policy_rule(policy: env.FixedPolicy):
    """One next action per transition, sampled from the policy at s'."""
    cdf = np.cumsum(policy.probs, axis=1)
    n_actions = policy.probs.shape[1]

    def rule(s_next, rng):
        u = rng.uniform(size=np.asarray(s_next).size)
        return np.minimum((u[:, None] > cdf[s_next]).sum(axis=1), n_actions - 1)

    return rule


class _FlowMembers:
    """Ensemble of velocity fields with per-member Adam state."""

    def __init__(self, n_states, n_actions, cfg: RunConfig, embed, sm, rng):
        fcfg = replace(cfg.flow, gamma=cfg.env.gamma)
        self.cfg = fcfg
        self.fields = []
        self.opts = []
        for _ in range(fcfg.ensemble_size):
            f = flowcritic.init_velocity_field(n_states, n_actions, fcfg, embed,
                                               sm, rng, rho=cfg.rho)
            self.fields.append(f)
            self.opts.append(adam_init(f.net.to_arrays(), lr=cfg.lr))

    def loss_only(self, batch, rule, schedule, rng) -> float:
        losses = []
        for f in self.fields:
            y, tau_p = flowcritic.bellman_targets(batch, f, rule, self.cfg, schedule, rng)
            cb = flowcritic.couple_batch(tau_p, y, batch["s"], batch["a"],
                                         f.source, self.cfg, rng)
            loss, _ = flowcritic.combined_loss(cb, f, self.cfg, rng)
            losses.append(loss)
        return float(np.mean(losses))

    def train_step(self, batch, rule, schedule, rng) -> float:
        losses = []
        for i, f in enumerate(self.fields):
            y, tau_p = flowcritic.bellman_targets(batch, f, rule, self.cfg, schedule, rng)
            cb = flowcritic.couple_batch(tau_p, y, batch["s"], batch["a"],
                                         f.source, self.cfg, rng)
            loss, grads = flowcritic.combined_loss(cb, f, self.cfg, rng)
            arrays, self.opts[i] = adam_step(f.net.to_arrays(), grads, self.opts[i])
            f = f.with_net_arrays(arrays)
            f = f.with_target(ema_update(f.target, arrays))
            self.fields[i] = f
            losses.append(loss)
        return float(np.mean(losses))

    def sampler(self, schedule):
        def sample(s, a, n):
            chunks = [flowcritic.sample_return_distribution(f, s, a, n, schedule).samples
                      for f in self.fields]
            return dist1d.EmpiricalDistribution(np.concatenate(chunks))
        return sample

    def scalar_scores(self, s_arr, a_arr, k_grid, schedule, use_target):
        per = [flowcritic.scalarize_many(f, s_arr, a_arr, k_grid, schedule,
                                         use_target=use_target)
               for f in self.fields]
        stacked = np.stack(per)
        if self.cfg.ensemble_aggregate == "min":
            return stacked.min(axis=0)
        return stacked.mean(axis=0)


class _IqnCritic:
    def __init__(self, n_states, n_actions, cfg: RunConfig, rng):
        self.cfg = replace(cfg.iqn, gamma=cfg.env.gamma)
        self.net = baselines.init_iqn_net(n_states, n_actions, self.cfg,
                                          cfg.cosine_basis, rng)
        self.target = TargetParams(tuple(a.copy() for a in self.net.to_arrays()), cfg.rho)
        self.opt = adam_init(self.net.to_arrays(), lr=cfg.lr)

    def _targets(self, batch, rule, rng):
        k = self.cfg.n_quantiles_per_update
        s_next = batch["s_next"]
        a_next = np.asarray(rule(s_next, rng), dtype=np.int64)
        tau_t = rng.uniform(size=(s_next.size, k))
        tnet = self.net.with_arrays(list(self.target.shadow))
        q, _ = quantile_net_forward(tnet, np.repeat(s_next, k),
                                    np.repeat(a_next, k), tau_t.ravel())
        q = q.reshape(s_next.size, k)
        return batch["r"][:, None] + self.cfg.gamma * batch["mask"][:, None] * q

    def _loss(self, batch, rule, rng):
        y = self._targets(batch, rule, rng)
        tau = rng.uniform(size=(batch["s"].size, self.cfg.n_quantiles_per_update))
        return baselines.iqn_loss(self.net, batch["s"], batch["a"], tau, y, self.cfg)

    def loss_only(self, batch, rule, schedule, rng) -> float:
        return self._loss(batch, rule, rng)[0]

    def train_step(self, batch, rule, schedule, rng) -> float:
        loss, grads = self._loss(batch, rule, rng)
        arrays, self.opt = adam_step(self.net.to_arrays(), grads, self.opt)
        self.net = self.net.with_arrays(arrays)
        self.target = ema_update(self.target, arrays)
        return loss

    def sampler(self, schedule):
        return lambda s, a, n: baselines.iqn_sample_distribution(self.net, s, a, n)

    def scalar_scores(self, s_arr, a_arr, k_grid, schedule, use_target):
        net = self.net.with_arrays(list(self.target.shadow)) if use_target else self.net
        fracs = (np.arange(k_grid) + 0.5) / k_grid
        q, _ = quantile_net_forward(net, np.repeat(s_arr, k_grid),
                                    np.repeat(a_arr, k_grid),
                                    np.tile(fracs, np.asarray(s_arr).size))
        return q.reshape(-1, k_grid).mean(axis=1)


@dataclass
class _RunState:
    mdp: env.TabularMdp
    behaviour: env.FixedPolicy
    data: env.Dataset
    arrays: dict
    oracle: env.DistributionalTable
    critic: object
    schedule: TimeSchedule
    pairs: list
    train_rng: np.random.Generator
    eval_rng: np.random.Generator


def _setup_run(cfg: RunConfig, oracle_policy=None) -> _RunState:
    ss = np.random.SeedSequence(cfg.seed)
    data_ss, init_ss, train_ss, eval_ss = ss.spawn(4)
    mdp, behaviour = build_env(cfg.env)
    data = env.generate_dataset(mdp, behaviour, cfg.dataset_size, cfg.horizon,
                                seed=int(data_ss.generate_state(1)[0]))
    arrays = data.arrays()
    oracle = env.oracle_return_distribution(mdp, oracle_policy or behaviour,
                                            cfg.support_size)
    init_rng = np.random.default_rng(init_ss)
    if cfg.critic_kind == "iqn":
        critic = _IqnCritic(mdp.n_states, mdp.n_actions, cfg, init_rng)
        schedule = flowcritic.uniform_schedule(cfg.flow.M)
    else:
        fcfg = replace(cfg.flow, gamma=cfg.env.gamma,
                       coupling_mode=("independent" if cfg.critic_kind == "independent_cfm"
                                      else cfg.flow.coupling_mode))
        r = arrays["r"]
        sm = flowcritic.compute_bounds(float(r.min()), float(r.max()),
                                       cfg.env.gamma, fcfg.kappa)
        embed = _embedding_config(cfg, sm)
        cfg2 = replace(cfg, flow=fcfg)
        critic = _FlowMembers(mdp.n_states, mdp.n_actions, cfg2, embed, sm, init_rng)
        schedule = flowcritic.uniform_schedule(fcfg.M)
    return _RunState(mdp, behaviour, data, arrays, oracle, critic, schedule,
                     _visited_pairs(data), np.random.default_rng(train_ss),
                     np.random.default_rng(eval_ss))


def _sample_batch(state: _RunState, batch_size: int, rng) -> dict:
    idx = rng.integers(0, len(state.data), size=batch_size)
    return {k: v[idx] for k, v in state.arrays.items()}


def _maybe_refresh_schedule(state: _RunState, cfg: RunConfig, step: int) -> None:
    if cfg.critic_kind == "iqn" or cfg.flow.schedule_mode != "adaptive":
        return
    if step % cfg.sched_refresh != 0:
        return
    probe_n = min(64, len(state.data))
    batch = _sample_batch(state, probe_n, state.train_rng)
    tau = state.train_rng.uniform(size=probe_n)
    state.schedule = flowcritic.update_schedule(state.critic.fields[0],
                                                (batch["s"], batch["a"], tau),
                                                state.schedule, cfg.flow.M)


def _run_loop(state: _RunState, cfg: RunConfig, rule) -> MetricsTrace:
    trace = MetricsTrace()

    def record(step):
        res = evaluate_w2(state.critic.sampler(state.schedule), state.oracle,
                          state.pairs, cfg.eval_samples)
        probe = _sample_batch(state, cfg.batch_size, state.eval_rng)
        loss = state.critic.loss_only(probe, rule, state.schedule, state.eval_rng)
        trace.append(MetricsRecord(step, res.mean, res.iqm_neg, res.sup, loss))

    record(0)
    for step in range(1, cfg.gradient_steps + 1):
        _maybe_refresh_schedule(state, cfg, step)
        batch = _sample_batch(state, cfg.batch_size, state.train_rng)
        loss = state.critic.train_step(batch, rule, state.schedule, state.train_rng)
        if not np.isfinite(loss):
            trace.diagnostics["diverged_at"] = step
            break
        if step % cfg.eval_every == 0 or step == cfg.gradient_steps:
            record(step)
    return trace


def train_fixed_policy(cfg: RunConfig) -> MetricsTrace:
    """Train the configured critic on Bellman targets under the fixed policy."""
    state = _setup_run(cfg)
    return _run_loop(state, cfg, fixed_policy_rule(state.behaviour))


# ---------------------------------------------------------------------------
# offline training with rejection-sampling extraction


def in_support_greedy_policy(mdp: env.TabularMdp, counts: np.ndarray) -> env.FixedPolicy:
    """Best deterministic policy restricted to actions seen in the dataset."""
    support = counts > 0
    support[mdp.terminal] = True  # terminal rows are irrelevant; keep them valid
    support[~support.any(axis=1)] = True
    q = np.zeros((mdp.n_states, mdp.n_actions))
    r_bar = np.array([[mdp.rewards[s][a].mean() for a in range(mdp.n_actions)]
                      for s in range(mdp.n_states)])
    for _ in range(10_000):
        v = np.where(support, q, -np.inf).max(axis=1)
        v[mdp.terminal] = 0.0
        q_new = r_bar + mdp.gamma * mdp.transition @ v
        q_new[mdp.terminal] = 0.0
        if np.abs(q_new - q).max() < 1e-13:
            q = q_new
            break
        q = q_new
    probs = np.zeros_like(q)
    masked = np.where(support, q, -np.inf)
    probs[np.arange(mdp.n_states), masked.argmax(axis=1)] = 1.0
    return env.FixedPolicy(probs)


class _RejectionRule:
    """Draw J candidates from the empirical behaviour policy, keep the best.

    Scores come from the scalarized target critic during bootstrapping;
    states without behaviour data fall back to a uniform candidate draw and
    are recorded in the diagnostics.
    """

    def __init__(self, critic, counts: np.ndarray, cfg: RunConfig):
        self.critic = critic
        self.cfg = cfg
        self.n_actions = counts.shape[1]
        self.support = counts > 0
        totals = counts.sum(axis=1, keepdims=True)
        self.no_data = totals[:, 0] == 0
        probs = np.where(totals > 0, counts / np.maximum(totals, 1), 1.0 / self.n_actions)
        self.cdf = np.cumsum(probs, axis=1)
        self.schedule = None
        self.fallback_states = set()

    def _draw_candidates(self, states, rng):
        u = rng.uniform(size=(states.size, self.cfg.J))
        cand = (u[:, :, None] > self.cdf[states][:, None, :]).sum(axis=2)
        return np.minimum(cand, self.n_actions - 1)

    def select(self, states, rng, use_target: bool):
        states = np.asarray(states, dtype=np.int64)
        for s in np.unique(states[self.no_data[states]]):
            self.fallback_states.add(int(s))
        cand = self._draw_candidates(states, rng)
        uniq_s, inv = np.unique(states, return_inverse=True)
        s_rep = np.repeat(uniq_s, self.n_actions)
        a_rep = np.tile(np.arange(self.n_actions), uniq_s.size)
        scores = self.critic.scalar_scores(s_rep, a_rep, self.cfg.scalarize_grid,
                                           self.schedule, use_target)
        score_table = scores.reshape(uniq_s.size, self.n_actions)
        cand_scores = score_table[inv[:, None], cand]
        best = cand_scores.argmax(axis=1)
        return cand[np.arange(states.size), best]

    def __call__(self, s_next, rng):
        return self.select(s_next, rng, use_target=True)


@dataclass
class OfflineResult:
    trace: MetricsTrace
    policy: np.ndarray  # deterministic action per state
    extraction_return: float
    behaviour_return: float
    diagnostics: dict


def train_offline_rejection(cfg: RunConfig) -> OfflineResult:
    """Critic training with rejection-sampled next actions, then extraction.

    Bootstrap actions maximize the scalarized target critic over J candidates
    drawn from the empirical behaviour distribution; the final policy table
    repeats the draw per state under the online critic.  Returns are exact
    policy values on the underlying MDP.
    """
    state = _setup_run(cfg)
    # the offline critic tracks the best in-support policy, so evaluate W2
    # against that policy's exact return distributions
    greedy = in_support_greedy_policy(state.mdp, state.data.behaviour_counts)
    state.oracle = env.oracle_return_distribution(state.mdp, greedy, cfg.support_size)
    rule = _RejectionRule(state.critic, state.data.behaviour_counts, cfg)
    rule.schedule = state.schedule

    trace = MetricsTrace()

    def record(step):
        res = evaluate_w2(state.critic.sampler(state.schedule), state.oracle,
                          state.pairs, cfg.eval_samples)
        probe = _sample_batch(state, cfg.batch_size, state.eval_rng)
        loss = state.critic.loss_only(probe, rule, state.schedule, state.eval_rng)
        trace.append(MetricsRecord(step, res.mean, res.iqm_neg, res.sup, loss))

    record(0)
    for step in range(1, cfg.gradient_steps + 1):
        _maybe_refresh_schedule(state, cfg, step)
        rule.schedule = state.schedule
        batch = _sample_batch(state, cfg.batch_size, state.train_rng)
        loss = state.critic.train_step(batch, rule, state.schedule, state.train_rng)
        if not np.isfinite(loss):
            trace.diagnostics["diverged_at"] = step
            break
        if step % cfg.eval_every == 0 or step == cfg.gradient_steps:
            record(step)

    # deployment-time extraction uses the online critic
    states = np.arange(state.mdp.n_states)
    actions = rule.select(states, state.train_rng, use_target=False)
    policy_probs = np.zeros((state.mdp.n_states, state.mdp.n_actions))
    policy_probs[states, actions] = 1.0
    extraction = env.FixedPolicy(policy_probs)
    diag = dict(trace.diagnostics)
    diag["fallback_states"] = sorted(rule.fallback_states)
    return OfflineResult(trace, actions,
                         env.policy_return(state.mdp, extraction),
                         env.policy_return(state.mdp, state.behaviour),
                         diag)


# ---------------------------------------------------------------------------
# supervised fitting of a fixed synthetic target (no bootstrapping)


@dataclass(frozen=True)
class SyntheticSpec:
    """A fixed 1D target distribution with known support bounds."""

    name: str
    sampler: object            # callable (rng, size) -> samples
    quantile: object           # callable (grid) -> target quantiles
    q_min: float
    q_max: float


def fit_synthetic_target(spec: SyntheticSpec, fcfg: FlowCriticConfig, steps: int,
                         seed: int, batch_transitions: int = 4,
                         loss_tail: int = 200, lr: float = 1e-3,
                         run_cfg: RunConfig | None = None):
    """Train a flow critic against a fixed target distribution.

    Returns (field, schedule, mean loss over the last `loss_tail` steps).
    There is no Bellman bootstrapping: target samples come straight from the
    spec's sampler, which makes this the direct surrogate for the conditional
    Wasserstein bound.
    """
    base = run_cfg or RunConfig()
    ss = np.random.SeedSequence(seed)
    init_rng, train_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    sm = flowcritic.SourceMap(fcfg.kappa, spec.q_min, spec.q_max,
                              spec.q_max - fcfg.kappa * (spec.q_max - spec.q_min),
                              spec.q_max)
    embed = _embedding_config(replace(base, flow=fcfg), sm)
    fld = flowcritic.init_velocity_field(1, 1, fcfg, embed, sm, init_rng)
    opt = adam_init(fld.net.to_arrays(), lr=lr)
    schedule = flowcritic.uniform_schedule(fcfg.M)
    zeros = np.zeros(batch_transitions, dtype=np.int64)
    losses = []
    for _ in range(steps):
        y = spec.sampler(train_rng, (batch_transitions, fcfg.K))
        tau_p = train_rng.uniform(size=(batch_transitions, fcfg.K))
        cb = flowcritic.couple_batch(tau_p, y, zeros, zeros, sm, fcfg, train_rng)
        loss, grads = flowcritic.combined_loss(cb, fld, fcfg, train_rng)
        arrays, opt = adam_step(fld.net.to_arrays(), grads, opt)
        fld = fld.with_net_arrays(arrays)
        fld = fld.with_target(ema_update(fld.target, arrays))
        losses.append(loss)
    tail = losses[-loss_tail:] if losses else [float("nan")]
    return fld, schedule, float(np.mean(tail))


# ---------------------------------------------------------------------------
# contraction-rate study


@dataclass(frozen=True)
class ContractionResult:
    distances: np.ndarray  # sup-W_p to the converged fixed point, per sweep
    ratios: np.ndarray
    atom_width: float
    gamma: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sweep", "sup_wp", "ratio"])
            for k, d in enumerate(self.distances):
                ratio = self.ratios[k - 1] if k >= 1 else ""
                w.writerow([k, format(d, ".17g"),
                            format(ratio, ".17g") if ratio != "" else ""])


def contraction_study(mdp: env.TabularMdp, policy: env.FixedPolicy, p: float = 2.0,
                      sweeps: int = 60, support_size: int = 401) -> ContractionResult:
    """Distances of DP iterates (from the zero distribution) to the fixed point."""
    lo, hi = env.default_support_bounds(mdp)
    support = np.linspace(lo, hi, support_size)
    start = np.tile(env.project_onto_grid(np.array([0.0]), np.array([1.0]), support),
                    (mdp.n_states, mdp.n_actions, 1))
    iterates = [start]
    probs = start
    n_conv = max(env.auto_sweeps(mdp, support_size) * 2, sweeps + 50)
    for k in range(n_conv):
        probs = env.dp_sweep(mdp, policy, probs, support)
        if k < sweeps:
            iterates.append(probs)
    fixed = [[dist1d.CategoricalDistribution(support, probs[s, a] / probs[s, a].sum())
              for a in range(mdp.n_actions)] for s in range(mdp.n_states)]
    dists = []
    for it in iterates:
        worst = 0.0
        for s in range(mdp.n_states):
            for a in range(mdp.n_actions):
                d = dist1d.wasserstein_cat(
                    dist1d.CategoricalDistribution(support, it[s, a] / it[s, a].sum()),
                    fixed[s][a], p)
                worst = max(worst, d)
        dists.append(worst)
    dists = np.array(dists)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = dists[1:] / dists[:-1]
    return ContractionResult(dists, ratios, float(support[1] - support[0]), mdp.gamma)
