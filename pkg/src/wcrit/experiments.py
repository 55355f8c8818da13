"""Canonical desk-scale experiment definitions.

Shared by the acceptance tests and the runnable scripts so both exercise the
same configurations: the synthetic-target bound study, the coupling and
schedule ablations on a bimodal-return chain, and the offline rejection
sanity run.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import ndtr

from . import dist1d, flowcritic, trainers
from .trainers import EnvSpec, RunConfig, SyntheticSpec

DESK_NET = dict(hidden_dims=(64, 64), embed_dim=32)
DESK_EMBED = dict(cosine_basis=32, fourier_freqs=16, hlgauss_bins=41, step_embed_dim=32)


# ---------------------------------------------------------------------------
# synthetic targets for the Wasserstein-bound study


def _gaussian_mixture(name, means, sigmas, weights):
    means = np.asarray(means, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    q_min = float((means - 4 * sigmas).min())
    q_max = float((means + 4 * sigmas).max())

    def sampler(rng, size):
        comp = rng.choice(means.size, p=weights, size=size)
        draws = rng.normal(means[comp], sigmas[comp])
        return np.clip(draws, q_min, q_max)

    def quantile(grid):
        lo = np.full_like(np.asarray(grid, dtype=np.float64), q_min)
        hi = np.full_like(lo, q_max)
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            cdf = sum(w * ndtr((mid - m) / s) for w, m, s in zip(weights, means, sigmas))
            above = cdf >= grid
            hi = np.where(above, mid, hi)
            lo = np.where(above, lo, mid)
        return 0.5 * (lo + hi)

    return SyntheticSpec(name, sampler, quantile, q_min, q_max)


def _atoms(name, values, weights):
    cat = dist1d.CategoricalDistribution(np.asarray(values, dtype=np.float64),
                                         np.asarray(weights, dtype=np.float64))

    def sampler(rng, size):
        return cat.support[rng.choice(cat.support.size, p=cat.probs, size=size)]

    def quantile(grid):
        return dist1d.quantile_function(cat, np.asarray(grid))

    return SyntheticSpec(name, sampler, quantile,
                         float(cat.support.min()), float(cat.support.max()))


def _uniform(name, lo, hi):
    def sampler(rng, size):
        return rng.uniform(lo, hi, size=size)

    def quantile(grid):
        return lo + np.asarray(grid, dtype=np.float64) * (hi - lo)

    return SyntheticSpec(name, sampler, quantile, lo, hi)


def synthetic_specs() -> list:
    return [
        _gaussian_mixture("gauss-mix-even", [-1.0, 1.0], [0.15, 0.2], [0.5, 0.5]),
        _gaussian_mixture("gauss-mix-skew", [-0.5, 0.8], [0.1, 0.3], [0.3, 0.7]),
        _atoms("bimodal-atoms", [-1.0, 1.0], [0.5, 0.5]),
        _atoms("skew-atoms", [-1.0, 0.7], [0.3, 0.7]),
        _uniform("uniform", -1.0, 1.0),
    ]


def synthetic_flow_config() -> flowcritic.FlowCriticConfig:
    return flowcritic.FlowCriticConfig(K=16, M=8, kappa=1.0, **DESK_NET)


@dataclass(frozen=True)
class BoundCase:
    name: str
    w2_sq: float
    final_loss: float
    slack: float

    @property
    def bound(self) -> float:
        return self.final_loss + self.slack


def run_bound_study(steps: int = 5000, seed: int = 0, grid: int = 512) -> list:
    """Fit each synthetic target; report W2^2 against loss + 0.05 (u - l)^2."""
    fcfg = synthetic_flow_config()
    results = []
    base = RunConfig(**DESK_EMBED)
    for i, spec in enumerate(synthetic_specs()):
        fld, schedule, final_loss = trainers.fit_synthetic_target(
            spec, fcfg, steps, seed=seed + i, run_cfg=base)
        model = flowcritic.sample_return_distribution(fld, 0, 0, grid, schedule)
        target = dist1d.EmpiricalDistribution(spec.quantile((np.arange(grid) + 0.5) / grid))
        w2 = dist1d.wasserstein_emp(model, target, 2.0)
        slack = 0.05 * (fld.source.u - fld.source.l) ** 2
        results.append(BoundCase(spec.name, w2 ** 2, final_loss, slack))
    return results


# ---------------------------------------------------------------------------
# coupling and schedule ablations (bimodal-return chain)


def bimodal_chain_env() -> EnvSpec:
    # two zero-reward prefix states, then an equiprobable fork to +1 / -1
    return EnvSpec(kind="branch_chain", n_states=5, gamma=0.5, branch_rewards="1,-1")


def ablation_config(critic_kind: str, schedule_mode: str, seed: int,
                    steps: int = 20000) -> RunConfig:
    flow = flowcritic.FlowCriticConfig(K=8, M=4, kappa=1.0,
                                       schedule_mode=schedule_mode, **DESK_NET)
    return RunConfig(env=bimodal_chain_env(), critic_kind=critic_kind, flow=flow,
                     gradient_steps=steps, batch_size=16, eval_every=max(steps // 4, 1),
                     seed=seed, dataset_size=2000, horizon=8, eval_samples=128,
                     lr=1e-3, **DESK_EMBED)


def run_coupling_pair(seed: int, steps: int = 20000):
    """Final mean W2 of sorted vs independent coupling, same everything else."""
    sorted_trace = trainers.train_fixed_policy(ablation_config("flowiqn", "uniform",
                                                               seed, steps))
    indep_trace = trainers.train_fixed_policy(ablation_config("independent_cfm",
                                                              "uniform", seed, steps))
    return sorted_trace.final.mean_w2, indep_trace.final.mean_w2


def run_schedule_pair(seed: int, steps: int = 20000):
    """Final mean W2 of adaptive vs uniform integration at matched M."""
    uniform_trace = trainers.train_fixed_policy(ablation_config("flowiqn", "uniform",
                                                                seed, steps))
    adaptive_trace = trainers.train_fixed_policy(ablation_config("flowiqn", "adaptive",
                                                                 seed, steps))
    return adaptive_trace.final.mean_w2, uniform_trace.final.mean_w2


# ---------------------------------------------------------------------------
# offline rejection sanity run


def offline_env() -> EnvSpec:
    # action 2 pays best but has zero behaviour support; extraction must ignore it
    return EnvSpec(kind="decision_chain", n_states=5, gamma=0.9,
                   action_rewards="1,0,2", behaviour="0.3,0.7,0")


def offline_config(seed: int, steps: int = 3000) -> RunConfig:
    flow = flowcritic.FlowCriticConfig(K=8, M=4, kappa=0.25, **DESK_NET)
    return RunConfig(env=offline_env(), critic_kind="flowiqn", flow=flow,
                     gradient_steps=steps, batch_size=16, eval_every=max(steps // 2, 1),
                     seed=seed, J=8, dataset_size=2000, horizon=8, eval_samples=128,
                     lr=1e-3, **DESK_EMBED)


def run_offline_sanity(seed: int, steps: int = 3000) -> trainers.OfflineResult:
    return trainers.train_offline_rejection(offline_config(seed, steps))


# ---------------------------------------------------------------------------
# contraction study environments


def contraction_cases() -> list:
    """(name, mdp, policy) triples spanning three discount factors."""
    cases = []
    for gamma in (0.5, 0.9, 0.99):
        spec = EnvSpec(kind="chain", n_states=4, gamma=gamma,
                       rewards="1:0.5,-1:0.5|0:1|2:0.5,0:0.5")
        mdp, policy = trainers.build_env(spec)
        cases.append((f"chain-gamma{gamma}", mdp, policy))
    return cases
