"""Distributional critics with quantile-coupled flow matching, at desk scale.

Tabular MDPs with exact distributional-DP oracles, a from-scratch
differentiable stack, the quantile-coupled flow critic with its shortcut and
adaptive-schedule variants, control baselines, experiment drivers, and a
batch CLI.
"""

from .dist1d import (CategoricalDistribution, CoupledPairs, EmpiricalDistribution,
                     brute_force_wasserstein, iqm, monotone_coupling,
                     quantile_function, wasserstein_cat, wasserstein_emp)
from .env import (Dataset, FixedPolicy, TabularMdp, Transition, build_chain_mdp,
                  build_decision_chain, generate_dataset, oracle_return_distribution)
from .errors import ConfigError, NumericError, UsageError
from .flowcritic import (CoupledBatch, FlowCriticConfig, SourceMap, TimeSchedule,
                         VelocityField, compute_bounds)
from .trainers import EnvSpec, MetricsTrace, RunConfig

__all__ = [
    "CategoricalDistribution", "ConfigError", "CoupledBatch", "CoupledPairs",
    "Dataset", "EmpiricalDistribution", "EnvSpec", "FixedPolicy",
    "FlowCriticConfig", "MetricsTrace", "NumericError", "RunConfig", "SourceMap",
    "TabularMdp", "TimeSchedule", "Transition", "UsageError", "VelocityField",
    "brute_force_wasserstein", "build_chain_mdp", "build_decision_chain",
    "compute_bounds", "generate_dataset", "iqm", "monotone_coupling",
    "oracle_return_distribution", "quantile_function", "wasserstein_cat",
    "wasserstein_emp",
]
