"""Quantile-coupled flow-matching critic.

The critic is a velocity field conditioned on (s, a), a quantile fraction,
the current value, flow time, and (for the shortcut variant) a step size.
Return samples are produced by Euler integration from an affine source map of
the quantile fraction; training regresses the field onto sorted-coupled
displacement targets built from bootstrapped Bellman samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import approx
from .approx import EmbeddingConfig, QuantileNet, TargetParams
from .dist1d import EmpiricalDistribution
from .errors import ConfigError, NumericError, UsageError

CURVATURE_EMA_BETA = 0.3
CURVATURE_FD_STEP = 1e-3


# ---------------------------------------------------------------------------
# source map


@dataclass(frozen=True)
class SourceMap:
    """Affine map from quantile fractions to the source interval [l, u]."""

    kappa: float
    q_min: float
    q_max: float
    l: float
    u: float

    def __post_init__(self):
        if not self.l <= self.u:
            raise ConfigError("source interval must satisfy l <= u")

    def g(self, tau):
        """l + tau * (u - l); monotone non-decreasing in tau."""
        return self.l + np.asarray(tau, dtype=np.float64) * (self.u - self.l)


def compute_bounds(r_min: float, r_max: float, gamma: float, kappa: float) -> SourceMap:
    """Source interval from dataset reward extremes.

    q_max = r_max / (1 - gamma), q_min = r_min / (1 - gamma), u = q_max and
    l = q_max - kappa * (q_max - q_min).  A degenerate interval (r_min ==
    r_max) is widened slightly so the map stays usable.
    """
    if r_min > r_max:
        raise ConfigError("r_min must not exceed r_max")
    if not (0.0 < gamma < 1.0):
        raise ConfigError("gamma must lie strictly inside (0, 1)")
    if not (0.0 < kappa <= 1.0):
        raise ConfigError("kappa must lie in (0, 1]")
    q_max = r_max / (1.0 - gamma)
    q_min = r_min / (1.0 - gamma)
    u = q_max
    l = q_max - kappa * (q_max - q_min)
    if u - l < 1e-12:
        l = u - 1e-6 * max(1.0, abs(u))
    return SourceMap(kappa, q_min, q_max, l, u)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class FlowCriticConfig:
    """Hyperparameters of the flow critic and its training objective."""

    K: int = 16
    M: int = 8
    kappa: float = 0.1
    gamma: float = 0.99
    lambda_c: float = 0.3
    shortcut_enabled: bool = False
    shortcut_step_sizes: tuple = (0.5, 0.25, 0.125)
    schedule_mode: str = "uniform"
    ensemble_size: int = 1
    coupling_mode: str = "sorted"
    tau_mode: str = "reuse"  # "reuse" sorts the target fractions; "fresh" redraws
    ensemble_aggregate: str = "mean"
    hidden_dims: tuple = (256, 256)
    embed_dim: int = 64

    def __post_init__(self):
        if self.K < 1 or self.M < 1:
            raise ConfigError("K and M must be >= 1")
        if not (0.0 <= self.lambda_c <= 1.0):
            raise ConfigError("lambda_c must lie in [0, 1]")
        if not (0.0 < self.kappa <= 1.0):
            raise ConfigError("kappa must lie in (0, 1]")
        if self.schedule_mode not in ("uniform", "adaptive"):
            raise ConfigError("schedule_mode must be 'uniform' or 'adaptive'")
        if self.coupling_mode not in ("sorted", "independent"):
            raise ConfigError("coupling_mode must be 'sorted' or 'independent'")
        if self.tau_mode not in ("reuse", "fresh"):
            raise ConfigError("tau_mode must be 'reuse' or 'fresh'")
        if self.ensemble_aggregate not in ("mean", "min"):
            raise ConfigError("ensemble_aggregate must be 'mean' or 'min'")
        if self.ensemble_size < 1:
            raise ConfigError("ensemble_size must be >= 1")


# ---------------------------------------------------------------------------
# time schedule


@dataclass(frozen=True)
class TimeSchedule:
    """Integration knots 0 = t_0 < ... < t_M = 1 plus curvature-EMA state."""

    knots: np.ndarray
    bin_edges: np.ndarray
    curvature_ema: np.ndarray
    eps: float = 1e-6

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=np.float64)
        if knots[0] != 0.0 or knots[-1] != 1.0:
            raise ConfigError("schedule endpoints must be exactly 0 and 1")
        if np.any(np.diff(knots) <= 0):
            raise ConfigError("schedule knots must be strictly increasing")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "bin_edges", np.asarray(self.bin_edges, dtype=np.float64))
        object.__setattr__(self, "curvature_ema",
                           np.asarray(self.curvature_ema, dtype=np.float64))

    @property
    def n_steps(self) -> int:
        return self.knots.size - 1


def uniform_schedule(M: int, n_bins: int = 16, eps: float = 1e-6) -> TimeSchedule:
    knots = np.linspace(0.0, 1.0, M + 1)
    return TimeSchedule(knots, np.linspace(0.0, 1.0, n_bins + 1), np.zeros(n_bins), eps)


def knots_from_curvature(bin_edges: np.ndarray, curvature: np.ndarray,
                         eps: float, M: int) -> np.ndarray:
    """Invert the cumulative sqrt-curvature profile to place M+1 knots.

    The curvature estimate is piecewise constant per bin; its cumulative
    integral is linear within bins, so inversion is piecewise linear.  All-zero
    curvature with eps = 0 falls back to the uniform grid.
    """
    widths = np.diff(bin_edges)
    w = np.sqrt(np.maximum(curvature, 0.0) + eps)
    if w.max() <= 0.0:
        return np.linspace(0.0, 1.0, M + 1)
    w = np.maximum(w, w.max() * 1e-12)  # keep the cumulative profile strictly increasing
    cum = np.concatenate(([0.0], np.cumsum(w * widths)))
    cum /= cum[-1]
    knots = np.interp(np.linspace(0.0, 1.0, M + 1), cum, bin_edges)
    knots[0], knots[-1] = 0.0, 1.0
    return knots


# ---------------------------------------------------------------------------
# velocity field


@dataclass(frozen=True)
class VelocityField:
    """Online and EMA-target parameters of one critic ensemble member."""

    net: QuantileNet
    target: TargetParams
    shortcut: bool
    embed: EmbeddingConfig
    source: SourceMap

    def target_net(self) -> QuantileNet:
        cached = self.__dict__.get("_target_net_cache")
        if cached is None:
            cached = self.net.with_arrays(list(self.target.shadow))
            object.__setattr__(self, "_target_net_cache", cached)
        return cached

    def with_net_arrays(self, arrays) -> "VelocityField":
        return VelocityField(self.net.with_arrays(arrays), self.target,
                             self.shortcut, self.embed, self.source)

    def with_target(self, target: TargetParams) -> "VelocityField":
        return VelocityField(self.net, target, self.shortcut, self.embed, self.source)


def init_velocity_field(n_states: int, n_actions: int, cfg: FlowCriticConfig,
                        embed: EmbeddingConfig, source: SourceMap,
                        rng: np.random.Generator, rho: float = 0.005) -> VelocityField:
    extra_dim = embed.hlgauss_bins + embed.fourier_dim
    if cfg.shortcut_enabled:
        extra_dim += embed.step_embed_dim
    net = approx.init_quantile_net(n_states, n_actions, cfg.embed_dim,
                                   embed.cosine_basis, extra_dim,
                                   cfg.hidden_dims, rng)
    target = TargetParams(tuple(a.copy() for a in net.to_arrays()), rho)
    return VelocityField(net, target, cfg.shortcut_enabled, embed, source)


def _assemble_extra(field: VelocityField, z, t, d) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64).ravel()

    def row_features(values, embedder):
        # scalar inputs (shared across the batch) are embedded once and broadcast
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 0:
            feat = embedder(arr[None], field.embed)
            return np.broadcast_to(feat, (z.size, feat.shape[1]))
        return embedder(arr, field.embed)

    cols = [approx.hl_gauss_embed(z, field.embed),
            row_features(t, approx.fourier_time_embed)]
    if field.shortcut:
        cols.append(row_features(0.0 if d is None else d, approx.step_size_embed))
    return np.concatenate(cols, axis=1)


def velocity(field: VelocityField, s, a, tau, z, t, d=None, use_target: bool = False):
    """Evaluate the field on flat row arrays; returns (values, backward cache)."""
    net = field.target_net() if use_target else field.net
    extra = _assemble_extra(field, z, t, d)
    return approx.quantile_net_forward(net, s, a, np.asarray(tau).ravel(), extra)


def integrate(field: VelocityField, s, a, tau, schedule: TimeSchedule,
              use_target: bool = False) -> np.ndarray:
    """Forward Euler over the schedule knots, starting from the source map.

    The running state is kept as source + accumulated displacement, which
    makes step composition exactly associative for fields constant in time
    and value.
    """
    s = np.atleast_1d(np.asarray(s, dtype=np.int64))
    a = np.atleast_1d(np.asarray(a, dtype=np.int64))
    tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    net = field.target_net() if use_target else field.net
    cond = approx.quantile_net_cond(net, s, a, tau)  # fixed along the trajectory
    z0 = field.source.g(tau)
    acc = np.zeros_like(z0)
    knots = schedule.knots
    for m in range(schedule.n_steps):
        dt = knots[m + 1] - knots[m]
        z = z0 + acc
        extra = _assemble_extra(field, z, knots[m], dt)
        v, _ = approx.quantile_net_head(net, cond, extra)
        acc = acc + dt * v
        if not np.isfinite(acc.sum()):
            raise NumericError(f"non-finite flow state at Euler step {m}")
    return z0 + acc


# ---------------------------------------------------------------------------
# Bellman targets and coupling


def bellman_targets(batch: dict, field: VelocityField, next_action_rule,
                    cfg: FlowCriticConfig, schedule: TimeSchedule,
                    rng: np.random.Generator):
    """K bootstrapped target samples per transition and their fractions.

    `batch` holds column arrays s, a, r, s_next, mask.  `next_action_rule`
    maps (s_next array, rng) to one next action per transition.  Targets are
    y = r + gamma * mask * Q_target(s', a', tau') at tau' ~ Unif[0, 1].
    """
    r = batch["r"]
    mask = batch["mask"]
    s_next = batch["s_next"]
    n = r.size
    a_next = np.asarray(next_action_rule(s_next, rng), dtype=np.int64)
    tau_p = rng.uniform(size=(n, cfg.K))
    z = integrate(field,
                  np.repeat(s_next, cfg.K), np.repeat(a_next, cfg.K),
                  tau_p.ravel(), schedule, use_target=True).reshape(n, cfg.K)
    y = r[:, None] + cfg.gamma * mask[:, None] * z
    return y, tau_p


@dataclass(frozen=True)
class CoupledBatch:
    """Per-transition coupled (fraction, source, target) triples.

    Under sorted coupling each row of tau, z0 and y is non-decreasing; one
    interpolation time t is drawn per transition, and z_t / u are the linear
    interpolants and displacement targets.
    """

    s: np.ndarray
    a: np.ndarray
    tau: np.ndarray
    z0: np.ndarray
    y: np.ndarray
    t: np.ndarray
    z_t: np.ndarray
    u: np.ndarray
    coupling: str = "sorted"

    def __post_init__(self):
        if self.coupling == "sorted":
            for name in ("tau", "z0", "y"):
                arr = getattr(self, name)
                if np.any(np.diff(arr, axis=1) < 0):
                    raise UsageError(f"sorted coupling requires non-decreasing {name} rows")

    @property
    def n_pairs(self) -> int:
        return self.y.size


def couple_batch(tau_prime: np.ndarray, y: np.ndarray, s, a, sm: SourceMap,
                 cfg: FlowCriticConfig, rng: np.random.Generator) -> CoupledBatch:
    """Pair fractions with target samples and form interpolants.

    In "reuse" mode the target fractions are sorted and reused as source
    fractions; "fresh" mode draws new fractions first.  Independent coupling
    keeps the raw draw order on both sides.
    """
    tau_prime = np.asarray(tau_prime, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if tau_prime.shape != y.shape:
        raise UsageError("fractions and targets must have matching shape")
    tau = rng.uniform(size=y.shape) if cfg.tau_mode == "fresh" else tau_prime
    if cfg.coupling_mode == "sorted":
        tau = np.sort(tau, axis=1)
        y = np.sort(y, axis=1)
    z0 = sm.g(tau)
    t = rng.uniform(size=y.shape[0])
    z_t = (1.0 - t)[:, None] * z0 + t[:, None] * y
    u = y - z0
    return CoupledBatch(np.asarray(s, dtype=np.int64), np.asarray(a, dtype=np.int64),
                        tau, z0, y, t, z_t, u, cfg.coupling_mode)


# ---------------------------------------------------------------------------
# losses


def _flatten_batch(batch: CoupledBatch):
    n, k = batch.y.shape
    return (np.repeat(batch.s, k), np.repeat(batch.a, k), batch.tau.ravel(),
            batch.z_t.ravel(), np.repeat(batch.t, k), batch.u.ravel())


def flowiqn_loss(batch: CoupledBatch, field: VelocityField):
    """Mean squared velocity regression onto coupled displacement targets."""
    s, a, tau, z_t, t, u = _flatten_batch(batch)
    d = 0.0 if field.shortcut else None
    v, cache = velocity(field, s, a, tau, z_t, t, d=d)
    resid = v - u
    loss = float(np.mean(resid ** 2))
    grads = approx.quantile_net_backward(field.net, cache, 2.0 * resid / resid.size)
    return loss, grads


def shortcut_consistency_loss(field: VelocityField, batch: CoupledBatch,
                              cfg: FlowCriticConfig, rng: np.random.Generator):
    """Self-consistency of one 2d step against two composed d steps.

    Targets come from the EMA parameters and are treated as constants; the
    squared gap is averaged over step sizes, transitions and quantile pairs.
    """
    if not cfg.shortcut_enabled:
        raise UsageError("consistency loss requires shortcut_enabled")
    usable = [d for d in cfg.shortcut_step_sizes if 2.0 * d <= 1.0]
    zero = [np.zeros_like(arr) for arr in field.net.to_arrays()]
    if not usable:
        return 0.0, zero
    n, k = batch.y.shape
    total = 0.0
    grads = zero
    count = len(usable) * n * k
    for d in usable:
        t_c = rng.uniform(0.0, 1.0 - 2.0 * d, size=n)
        z_c = (1.0 - t_c)[:, None] * batch.z0 + t_c[:, None] * batch.y
        s, a = np.repeat(batch.s, k), np.repeat(batch.a, k)
        tau = batch.tau.ravel()
        t_rep = np.repeat(t_c, k)
        v1, _ = velocity(field, s, a, tau, z_c.ravel(), t_rep, d=d, use_target=True)
        z_mid = z_c.ravel() + d * v1
        v2, _ = velocity(field, s, a, tau, z_mid, t_rep + d, d=d, use_target=True)
        s_target = 0.5 * (v1 + v2)
        pred, cache = velocity(field, s, a, tau, z_c.ravel(), t_rep, d=2.0 * d)
        resid = pred - s_target
        total += float(np.sum(resid ** 2))
        g = approx.quantile_net_backward(field.net, cache, 2.0 * resid / count)
        grads = [acc + gi for acc, gi in zip(grads, g)]
    return total / count, grads


def combined_loss(batch: CoupledBatch, field: VelocityField, cfg: FlowCriticConfig,
                  rng: np.random.Generator):
    """(1 - lambda_c) * flow-matching loss + lambda_c * consistency loss."""
    fm_loss, fm_grads = flowiqn_loss(batch, field)
    if not cfg.shortcut_enabled:
        return fm_loss, fm_grads
    lc = cfg.lambda_c
    con_loss, con_grads = shortcut_consistency_loss(field, batch, cfg, rng)
    loss = (1.0 - lc) * fm_loss + lc * con_loss
    grads = [(1.0 - lc) * gf + lc * gc for gf, gc in zip(fm_grads, con_grads)]
    return loss, grads


# ---------------------------------------------------------------------------
# evaluation utilities


def scalarize_many(field: VelocityField, s, a, k_grid: int,
                   schedule: TimeSchedule, use_target: bool = False) -> np.ndarray:
    """Risk-neutral value estimates for row arrays of (s, a) pairs."""
    if k_grid < 1:
        raise UsageError("k_grid must be >= 1")
    s = np.atleast_1d(np.asarray(s, dtype=np.int64))
    a = np.atleast_1d(np.asarray(a, dtype=np.int64))
    grid = (np.arange(k_grid) + 0.5) / k_grid
    z = integrate(field, np.repeat(s, k_grid), np.repeat(a, k_grid),
                  np.tile(grid, s.size), schedule, use_target=use_target)
    return z.reshape(s.size, k_grid).mean(axis=1)


def scalarize(field: VelocityField, s: int, a: int, k_grid: int,
              schedule: TimeSchedule, use_target: bool = False) -> float:
    """Mean of the critic's return samples on the (k - 0.5)/K fraction grid."""
    return float(scalarize_many(field, [s], [a], k_grid, schedule, use_target)[0])


def sample_return_distribution(field: VelocityField, s: int, a: int, n: int,
                               schedule: TimeSchedule, mode: str = "grid",
                               rng: np.random.Generator | None = None) -> EmpiricalDistribution:
    """n return samples from the critic's pushforward, as a sorted sample set."""
    if n < 1:
        raise UsageError("need at least one sample")
    if mode == "grid":
        fracs = (np.arange(n) + 0.5) / n
    elif mode == "random":
        if rng is None:
            raise UsageError("random mode needs an rng")
        fracs = rng.uniform(size=n)
    else:
        raise UsageError("mode must be 'grid' or 'random'")
    z = integrate(field, np.full(n, s), np.full(n, a), fracs, schedule)
    return EmpiricalDistribution(z)


# ---------------------------------------------------------------------------
# adaptive schedule refresh


def update_schedule(field: VelocityField, probe_batch, schedule: TimeSchedule,
                    M: int) -> TimeSchedule:
    """Refresh the integration knots from a curvature probe.

    The curvature proxy is E|dv/dt| per time bin, estimated with central
    finite differences along an Euler trajectory of the probe points, then
    EMA-smoothed into the schedule state and inverted through the cumulative
    sqrt-curvature profile.
    """
    s, a, tau = (np.asarray(x) for x in probe_batch)
    edges = schedule.bin_edges
    widths = np.diff(edges)
    mids = 0.5 * (edges[:-1] + edges[1:])
    z0 = field.source.g(tau.astype(np.float64))
    acc = np.zeros_like(z0)
    h = CURVATURE_FD_STEP
    c_new = np.zeros(mids.size)
    for b in range(mids.size):
        z = z0 + acc
        v_hi, _ = velocity(field, s, a, tau, z, mids[b] + h, d=widths[b])
        v_lo, _ = velocity(field, s, a, tau, z, mids[b] - h, d=widths[b])
        c_new[b] = float(np.mean(np.abs(v_hi - v_lo))) / (2.0 * h)
        acc = acc + widths[b] * 0.5 * (v_hi + v_lo)
    ema = (1.0 - CURVATURE_EMA_BETA) * schedule.curvature_ema + CURVATURE_EMA_BETA * c_new
    knots = knots_from_curvature(edges, ema, schedule.eps, M)
    return TimeSchedule(knots, edges, ema, schedule.eps)


# ---------------------------------------------------------------------------
# distillation


def distill_student(teacher: VelocityField, student: QuantileNet, s: int, a: int,
                    fracs, schedule: TimeSchedule):
    """Squared gap between a one-step student and frozen teacher quantiles."""
    fracs = np.asarray(fracs, dtype=np.float64).ravel()
    n = fracs.size
    teacher_vals = integrate(teacher, np.full(n, s), np.full(n, a), fracs,
                             schedule, use_target=True)
    pred, cache = approx.quantile_net_forward(student, np.full(n, s), np.full(n, a), fracs)
    resid = pred - teacher_vals
    loss = float(np.mean(resid ** 2))
    grads = approx.quantile_net_backward(student, cache, 2.0 * resid / n)
    return loss, grads


# ---------------------------------------------------------------------------
# checkpointing


def save_critic_checkpoint(prefix: str, fields, schedule: TimeSchedule,
                           cfg: FlowCriticConfig) -> None:
    """Binary parameter file plus a key=value sidecar with config and knots."""
    arrays = []
    for f in fields:
        arrays.extend(f.net.to_arrays())
        arrays.extend(f.target.shadow)
    approx.save_arrays(f"{prefix}.bin", arrays)
    with open(f"{prefix}.meta", "w") as fh:
        for key in ("K", "M", "kappa", "gamma", "lambda_c", "shortcut_enabled",
                    "schedule_mode", "ensemble_size", "coupling_mode", "tau_mode",
                    "ensemble_aggregate"):
            fh.write(f"critic.{key}={getattr(cfg, key)!r}\n".replace("'", ""))
        fh.write("schedule.knots=" + ",".join(format(k, ".17g") for k in schedule.knots) + "\n")


def load_critic_checkpoint(prefix: str):
    """Returns (raw array list, metadata dict)."""
    arrays = approx.load_arrays(f"{prefix}.bin")
    meta = {}
    with open(f"{prefix}.meta") as fh:
        for line in fh:
            line = line.strip()
            if line:
                key, _, value = line.partition("=")
                meta[key] = value
    return arrays, meta
