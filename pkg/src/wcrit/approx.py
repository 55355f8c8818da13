"""Minimal differentiable approximator stack.

Dense nets with hand-written reverse-mode gradients, the embedding features
used by the critics (cosine quantile basis, Fourier time features, HL-Gauss
value histograms, step-size features), Adam, EMA target parameters, a
finite-difference gradient oracle, and a flat binary checkpoint format.

Everything is float64 numpy; nets are plain dataclasses of arrays and updates
are functional (no in-place mutation), so parameter sets can be shared and
cloned freely.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError, UsageError

SQRT_2PI = np.sqrt(2.0 * np.pi)


# ---------------------------------------------------------------------------
# activations


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(x):
    # tanh form of GELU; the gradient below differentiates this exact expression
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * (x * x * x))))


def gelu_grad(x):
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * x2 * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * (_GELU_C * (1.0 + 3.0 * _GELU_A * x2))


_ACTIVATIONS = {
    "gelu": (gelu, gelu_grad),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x: (x > 0.0).astype(np.float64)),
    "identity": (lambda x: x, lambda x: np.ones_like(x)),
}


# ---------------------------------------------------------------------------
# embedding features (pure functions of their inputs)


@dataclass(frozen=True)
class EmbeddingConfig:
    """Sizes and ranges of the fixed embedding features."""

    cosine_basis: int = 64
    fourier_dim: int = 128
    fourier_freqs: int = 64
    hlgauss_bins: int = 51
    hlgauss_sigma: float = 16.0
    hlgauss_range: tuple = (-1.0, 1.0)
    step_embed_dim: int = 128

    def __post_init__(self):
        if min(self.cosine_basis, self.fourier_dim, self.fourier_freqs,
               self.hlgauss_bins, self.step_embed_dim) < 1:
            raise ConfigError("embedding sizes must be >= 1")
        if self.fourier_dim != 2 * self.fourier_freqs:
            raise ConfigError("fourier_dim must equal 2 * fourier_freqs")
        if self.step_embed_dim % 2 != 0:
            raise ConfigError("step_embed_dim must be even")
        if self.hlgauss_sigma <= 0:
            raise ConfigError("hlgauss_sigma must be positive")
        v_min, v_max = self.hlgauss_range
        if not v_min < v_max:
            raise ConfigError("hlgauss_range must satisfy v_min < v_max")


@lru_cache(maxsize=32)
def _cosine_multipliers(n: int) -> np.ndarray:
    return np.pi * np.arange(n, dtype=np.float64)


def cosine_embed(tau, n: int) -> np.ndarray:
    """cos(pi * i * tau) for i = 0..n-1; tau scalar or (N,) -> (..., n)."""
    t = np.asarray(tau, dtype=np.float64)
    return np.cos(t[..., None] * _cosine_multipliers(n))


@lru_cache(maxsize=32)
def _geometric_freqs(n_freqs: int) -> np.ndarray:
    return np.geomspace(1.0, 1000.0, n_freqs)


def _fourier_features(x, n_freqs: int) -> np.ndarray:
    """Interleaved (sin, cos) at fixed geometric frequencies from 1 to 1000."""
    ang = np.asarray(x, dtype=np.float64)[..., None] * _geometric_freqs(n_freqs)
    out = np.empty(ang.shape[:-1] + (2 * n_freqs,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def fourier_time_embed(t, config: EmbeddingConfig) -> np.ndarray:
    """Fixed Fourier features of flow time; length config.fourier_dim."""
    return _fourier_features(t, config.fourier_freqs)


def step_size_embed(d, config: EmbeddingConfig) -> np.ndarray:
    """Fourier features of the shortcut step size, same scheme as time."""
    return _fourier_features(d, config.step_embed_dim // 2)


@lru_cache(maxsize=32)
def _hlgauss_edges(v_min: float, v_max: float, bins: int) -> np.ndarray:
    return np.linspace(v_min, v_max, bins + 1)


def hl_gauss_embed(z, config: EmbeddingConfig) -> np.ndarray:
    """Histogram-of-Gaussian value embedding: per-bin mass of N(z, sigma^2).

    Masses are renormalized to sum to 1; values far outside the range
    saturate into the nearest end bin.
    """
    v_min, v_max = config.hlgauss_range
    edges = _hlgauss_edges(v_min, v_max, config.hlgauss_bins)
    zz = np.asarray(z, dtype=np.float64)[..., None]
    cdf = ndtr((edges - zz) / config.hlgauss_sigma)
    mass = np.diff(cdf, axis=-1)
    total = mass.sum(axis=-1, keepdims=True)
    degenerate = total[..., 0] < 1e-300
    safe = np.where(total < 1e-300, 1.0, total)
    out = mass / safe
    if np.any(degenerate):
        nearest = np.where(np.asarray(z)[...] > 0.5 * (v_min + v_max),
                           config.hlgauss_bins - 1, 0)
        onehot = np.zeros_like(out)
        np.put_along_axis(onehot, np.asarray(nearest)[..., None], 1.0, axis=-1)
        out = np.where(degenerate[..., None], onehot, out)
    return out


# ---------------------------------------------------------------------------
# dense trunk


@dataclass(frozen=True)
class NetParams:
    """Stack of dense layers; hidden layers use `activation`, output is linear."""

    layers: tuple  # ((W, b), ...)
    activation: str = "gelu"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        for i in range(len(self.layers) - 1):
            if self.layers[i][0].shape[1] != self.layers[i + 1][0].shape[0]:
                raise ConfigError("consecutive layer shapes must compose")
        total = 0.0
        for w, b in self.layers:
            if w.shape[1] != b.shape[0]:
                raise ConfigError("bias length must match layer width")
            total += float(w.sum()) + float(b.sum())
        if not np.isfinite(total):
            raise ConfigError("parameters must be finite")
        object.__setattr__(self, "layers", tuple((w, b) for w, b in self.layers))

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[1]


def init_mlp(dims, rng: np.random.Generator, activation: str = "gelu") -> NetParams:
    """Fan-in-scaled uniform initialization for a [d0, d1, ..., dk] stack."""
    layers = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(d_in)
        layers.append((rng.uniform(-bound, bound, size=(d_in, d_out)),
                       rng.uniform(-bound, bound, size=d_out)))
    return NetParams(tuple(layers), activation)


def forward(params: NetParams, x):
    """Forward pass; returns (output, cache) with cache sufficient for backward.

    `x` may be a single (D,) vector or a (N, D) batch.  Output drops the last
    axis when the final layer has width 1.
    """
    xv = np.asarray(x, dtype=np.float64)
    single = xv.ndim == 1
    h = xv[None, :] if single else xv
    if h.shape[1] != params.in_dim:
        raise UsageError(f"input width {h.shape[1]} != net input {params.in_dim}")
    act, _ = _ACTIVATIONS[params.activation]
    inputs, pres = [], []
    n_layers = len(params.layers)
    for i, (w, b) in enumerate(params.layers):
        inputs.append(h)
        z = h @ w + b
        pres.append(z)
        h = act(z) if i < n_layers - 1 else z
    y = h
    if params.out_dim == 1:
        y = y[:, 0]
    if single:
        y = y[0] if params.out_dim == 1 else y[0, :]
        y = float(y) if params.out_dim == 1 else y
    return y, (inputs, pres, single)


def backward(params: NetParams, cache, dy):
    """Exact gradients of sum(dy * output); returns (per-layer grads, d_input)."""
    inputs, pres, single = cache
    _, act_grad = _ACTIVATIONS[params.activation]
    g = np.asarray(dy, dtype=np.float64)
    if params.out_dim == 1:
        g = g.reshape(-1, 1)
    elif single:
        g = g[None, :]
    if g.shape[0] != inputs[0].shape[0]:
        raise UsageError("output gradient batch size does not match cache")
    grads = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        grads[i] = (inputs[i].T @ g, g.sum(axis=0))
        g = g @ w.T
        if i > 0:
            g = g * act_grad(pres[i - 1])
    dx = g[0] if single else g
    return grads, dx


# ---------------------------------------------------------------------------
# quantile-conditioned scalar nets


@dataclass(frozen=True)
class QuantileNet:
    """Scalar head conditioned on (s, a) and a quantile fraction tau.

    A learned (s, a) embedding is combined multiplicatively with a projected
    cosine basis of tau, optionally concatenated with extra fixed features
    (value histogram, time, step size), and fed through a dense trunk.
    """

    sa_embed: np.ndarray  # (S * A, E)
    tau_w: np.ndarray     # (cosine_basis, E)
    tau_b: np.ndarray     # (E,)
    trunk: NetParams
    n_actions: int

    @property
    def embed_dim(self) -> int:
        return self.sa_embed.shape[1]

    @property
    def cosine_basis(self) -> int:
        return self.tau_w.shape[0]

    @property
    def extra_dim(self) -> int:
        return self.trunk.in_dim - self.embed_dim

    def to_arrays(self) -> list:
        out = [self.sa_embed, self.tau_w, self.tau_b]
        for w, b in self.trunk.layers:
            out.extend([w, b])
        return out

    def with_arrays(self, arrays) -> "QuantileNet":
        layers = tuple((arrays[3 + 2 * i], arrays[4 + 2 * i])
                       for i in range(len(self.trunk.layers)))
        return QuantileNet(arrays[0], arrays[1], arrays[2],
                           NetParams(layers, self.trunk.activation), self.n_actions)


def init_quantile_net(n_states: int, n_actions: int, embed_dim: int,
                      cosine_basis: int, extra_dim: int, hidden_dims,
                      rng: np.random.Generator, activation: str = "gelu") -> QuantileNet:
    sa = rng.uniform(-1.0, 1.0, size=(n_states * n_actions, embed_dim))
    bound = 1.0 / np.sqrt(cosine_basis)
    tau_w = rng.uniform(-bound, bound, size=(cosine_basis, embed_dim))
    tau_b = rng.uniform(-bound, bound, size=embed_dim)
    trunk = init_mlp([embed_dim + extra_dim, *hidden_dims, 1], rng, activation)
    return QuantileNet(sa, tau_w, tau_b, trunk, n_actions)


def quantile_net_cond(net: QuantileNet, s_idx, a_idx, tau):
    """The (s, a) x tau conditioning block, reusable across solver steps."""
    s_idx = np.asarray(s_idx, dtype=np.int64)
    a_idx = np.asarray(a_idx, dtype=np.int64)
    rows = s_idx * net.n_actions + a_idx
    psi = net.sa_embed[rows]
    cosf = cosine_embed(tau, net.cosine_basis)
    phi_pre = cosf @ net.tau_w + net.tau_b
    phi = gelu(phi_pre)
    h = psi * phi
    return h, (rows, psi, cosf, phi_pre, phi)


def quantile_net_head(net: QuantileNet, cond, extra=None):
    """Trunk evaluation on precomputed conditioning plus extra features."""
    h, cond_cache = cond
    x = h if extra is None else np.concatenate([h, extra], axis=1)
    y, trunk_cache = forward(net.trunk, x)
    return y, (*cond_cache, trunk_cache)


def quantile_net_forward(net: QuantileNet, s_idx, a_idx, tau, extra=None):
    """Batched evaluation; returns ((N,) outputs, cache for backward)."""
    return quantile_net_head(net, quantile_net_cond(net, s_idx, a_idx, tau), extra)


def quantile_net_backward(net: QuantileNet, cache, dy) -> list:
    """Gradients of sum(dy * output) in net.to_arrays() order."""
    rows, psi, cosf, phi_pre, phi, trunk_cache = cache
    trunk_grads, dx = backward(net.trunk, trunk_cache, dy)
    dh = dx[:, :net.embed_dim]
    dpsi = dh * phi
    dphi_pre = dh * psi * gelu_grad(phi_pre)
    d_sa = np.zeros_like(net.sa_embed)
    np.add.at(d_sa, rows, dpsi)
    out = [d_sa, cosf.T @ dphi_pre, dphi_pre.sum(axis=0)]
    for gw, gb in trunk_grads:
        out.extend([gw, gb])
    return out


# ---------------------------------------------------------------------------
# optimization


@dataclass(frozen=True)
class AdamState:
    """Bias-corrected Adam moment accumulators for a list of arrays."""

    m: tuple
    v: tuple
    step: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(arrays, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    zeros = tuple(np.zeros_like(a) for a in arrays)
    return AdamState(zeros, tuple(np.zeros_like(a) for a in arrays), 0,
                     lr, beta1, beta2, eps)


def adam_step(arrays, grads, state: AdamState):
    """One bias-corrected Adam update; returns (new_arrays, new_state)."""
    if len(arrays) != len(state.m) or len(arrays) != len(grads):
        raise UsageError("parameter, gradient and state shapes must match")
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(arrays, grads, state.m, state.v):
        m2 = state.beta1 * m + (1.0 - state.beta1) * g
        v2 = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        update = (state.lr / bc1) * m2 / (np.sqrt(v2 / bc2) + state.eps)
        new_params.append(p - update)
        new_m.append(m2)
        new_v.append(v2)
    return new_params, AdamState(tuple(new_m), tuple(new_v), t,
                                 state.lr, state.beta1, state.beta2, state.eps)


@dataclass(frozen=True)
class TargetParams:
    """EMA shadow of a parameter list with smoothing coefficient rho."""

    shadow: tuple
    rho: float = 0.005

    def __post_init__(self):
        if not (0.0 <= self.rho <= 1.0):
            raise ConfigError("rho must lie in [0, 1]")
        object.__setattr__(self, "shadow", tuple(self.shadow))


def ema_update(target: TargetParams, online) -> TargetParams:
    """shadow <- (1 - rho) * shadow + rho * online, elementwise."""
    online = list(online)
    if len(online) != len(target.shadow):
        raise UsageError("shadow and online parameter lists must align")
    rho = target.rho
    return TargetParams(tuple((1.0 - rho) * s + rho * o
                              for s, o in zip(target.shadow, online)), rho)


# ---------------------------------------------------------------------------
# finite-difference oracle


def fd_gradients(loss_fn, arrays, step: float = 1e-6) -> list:
    """Central-difference gradients of loss_fn(arrays) wrt every entry."""
    grads = []
    base = [a.copy() for a in arrays]
    for i, a in enumerate(base):
        g = np.zeros_like(a)
        flat = a.ravel()
        gflat = g.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = loss_fn(base)
            flat[j] = orig - step
            lo = loss_fn(base)
            flat[j] = orig
            gflat[j] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"WCRIT1"


def save_arrays(path, arrays) -> None:
    """Flat binary checkpoint: magic, then little-endian u64 dims and f64 data."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(arrays)))
        for a in arrays:
            a = np.asarray(a, dtype=np.float64)
            fh.write(struct.pack("<Q", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            fh.write(np.ascontiguousarray(a).astype("<f8").tobytes())


def load_arrays(path) -> list:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise UsageError(f"{path}: not a {CHECKPOINT_MAGIC.decode()} checkpoint")
        (count,) = struct.unpack("<Q", fh.read(8))
        out = []
        for _ in range(count):
            (ndim,) = struct.unpack("<Q", fh.read(8))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(8 * size), dtype="<f8").astype(np.float64)
            out.append(data.reshape(shape))
        return out
