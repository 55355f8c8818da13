"""Control critics isolating the coupling claim.

The independent-coupling critic shares every piece of the flow critic (net,
schedule, targets) and differs only in pairing source and target samples by
draw order instead of by rank.  The IQN-style critic is a standard quantile
regression baseline over the same embedding architecture.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import approx, flowcritic
from .approx import QuantileNet
from .dist1d import EmpiricalDistribution
from .errors import ConfigError, UsageError


def independent_cfm_loss(batch: flowcritic.CoupledBatch, field: flowcritic.VelocityField):
    """Velocity regression with pairing by draw order, never sorted.

    The batch must have been built with coupling_mode="independent"; the
    regression itself is identical to the sorted-coupling loss.
    """
    if batch.coupling != "independent":
        raise UsageError("expected an independently coupled batch")
    return flowcritic.flowiqn_loss(batch, field)


@dataclass(frozen=True)
class IqnConfig:
    """Quantile-regression critic hyperparameters."""

    n_quantiles_per_update: int = 16
    huber_kappa: float = 1.0
    hidden_dims: tuple = (256, 256)
    embed_dim: int = 64
    gamma: float = 0.99

    def __post_init__(self):
        if self.n_quantiles_per_update < 1:
            raise ConfigError("need at least one quantile per update")
        if self.huber_kappa <= 0:
            raise ConfigError("huber_kappa must be positive")


def init_iqn_net(n_states: int, n_actions: int, cfg: IqnConfig,
                 cosine_basis: int, rng: np.random.Generator) -> QuantileNet:
    """Implicit quantile net q(s, a, tau) reusing the multiplicative embedding."""
    return approx.init_quantile_net(n_states, n_actions, cfg.embed_dim,
                                    cosine_basis, 0, cfg.hidden_dims, rng)


def _huber(u: np.ndarray, kappa: float):
    au = np.abs(u)
    quad = au <= kappa
    loss = np.where(quad, 0.5 * u * u, kappa * (au - 0.5 * kappa))
    grad = np.where(quad, u, kappa * np.sign(u))
    return loss, grad


def iqn_loss(net: QuantileNet, s, a, tau: np.ndarray, targets: np.ndarray,
             cfg: IqnConfig):
    """Asymmetric quantile-Huber loss over all (tau, target) pairs.

    tau has shape (B, Kq) and targets (B, Kt); the loss averages
    |tau - 1{u < 0}| * L_kappa(u) / kappa with u = y - q(s, a, tau).
    """
    tau = np.asarray(tau, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    b, kq = tau.shape
    kt = targets.shape[1]
    q, cache = approx.quantile_net_forward(
        net, np.repeat(np.asarray(s, dtype=np.int64), kq),
        np.repeat(np.asarray(a, dtype=np.int64), kq), tau.ravel())
    q = q.reshape(b, kq)
    u = targets[:, None, :] - q[:, :, None]  # (B, Kq, Kt)
    hub, hub_grad = _huber(u, cfg.huber_kappa)
    weight = np.abs(tau[:, :, None] - (u < 0))
    loss = float(np.mean(weight * hub / cfg.huber_kappa))
    dq = -(weight * hub_grad / cfg.huber_kappa).sum(axis=2) / u.size
    grads = approx.quantile_net_backward(net, cache, dq.ravel())
    return loss, grads


def iqn_sample_distribution(net: QuantileNet, s: int, a: int, n: int) -> EmpiricalDistribution:
    """Evaluate q(s, a, .) on the (k - 0.5)/n grid, sorted."""
    if n < 1:
        raise UsageError("need at least one sample")
    fracs = (np.arange(n) + 0.5) / n
    q, _ = approx.quantile_net_forward(net, np.full(n, s), np.full(n, a), fracs)
    return EmpiricalDistribution(q)
