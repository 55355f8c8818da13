"""One-dimensional probability machinery.

Empirical and categorical distributions, quantile functions, p-Wasserstein
distances, monotone (sorted) couplings, a brute-force transport oracle, and
inter-quartile-mean aggregation.  Everything here is a pure function on
immutable inputs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import UsageError

PROB_ATOL = 1e-12


def _frozen(a) -> np.ndarray:
    out = np.asarray(a, dtype=np.float64).copy()
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class EmpiricalDistribution:
    """Equal-weight sample set, stored sorted ascending.

    The constructor sorts, so any finite 1D collection of values is a valid
    input.
    """

    samples: np.ndarray

    def __post_init__(self):
        s = np.sort(np.asarray(self.samples, dtype=np.float64).ravel())
        if s.size < 1:
            raise UsageError("empirical distribution needs at least one sample")
        if not np.all(np.isfinite(s)):
            raise UsageError("samples must be finite")
        s.flags.writeable = False
        object.__setattr__(self, "samples", s)

    @property
    def n(self) -> int:
        return self.samples.size

    def mean(self) -> float:
        return float(self.samples.mean())


@dataclass(frozen=True)
class CategoricalDistribution:
    """Probability masses on a strictly increasing finite support."""

    support: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        sup = _frozen(self.support)
        pr = _frozen(self.probs)
        if sup.ndim != 1 or sup.shape != pr.shape:
            raise UsageError("support and probs must be equal-length vectors")
        if sup.size >= 2 and not np.all(np.diff(sup) > 0):
            raise UsageError("support must be strictly increasing")
        if np.any(pr < -PROB_ATOL) or abs(pr.sum() - 1.0) > PROB_ATOL:
            raise UsageError("probs must be nonnegative and sum to 1 within 1e-12")
        object.__setattr__(self, "support", sup)
        object.__setattr__(self, "probs", pr)

    def mean(self) -> float:
        return float(self.support @ self.probs)


@dataclass(frozen=True)
class CoupledPairs:
    """Source/target value pairs sorted by source.

    Both coordinate sequences are non-decreasing, i.e. the coupling is
    monotone.
    """

    pairs: np.ndarray  # shape (n, 2)

    def __post_init__(self):
        p = _frozen(self.pairs)
        if p.ndim != 2 or p.shape[1] != 2:
            raise UsageError("pairs must have shape (n, 2)")
        if np.any(np.diff(p[:, 0]) < 0) or np.any(np.diff(p[:, 1]) < 0):
            raise UsageError("coupling must be monotone in both coordinates")
        object.__setattr__(self, "pairs", p)

    @property
    def sources(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def targets(self) -> np.ndarray:
        return self.pairs[:, 1]


def quantile_function(dist, tau):
    """Generalized inverse CDF, inf{x : F(x) >= tau}; tau=0 gives the minimum.

    `tau` may be a scalar or an array; the result matches its shape.
    """
    t = np.asarray(tau, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise UsageError("quantile level must lie in [0, 1]")
    if isinstance(dist, EmpiricalDistribution):
        n = dist.n
        idx = np.ceil(t * n).astype(np.int64) - 1
        idx = np.clip(idx, 0, n - 1)
        out = dist.samples[idx]
    elif isinstance(dist, CategoricalDistribution):
        cum = np.cumsum(dist.probs)
        idx = np.searchsorted(cum, t, side="left")
        idx = np.clip(idx, 0, dist.support.size - 1)
        out = dist.support[idx]
    else:
        raise UsageError(f"unsupported distribution type: {type(dist).__name__}")
    return float(out) if np.isscalar(tau) else out


def atomize(dist: CategoricalDistribution, n: int) -> EmpiricalDistribution:
    """Equal-mass n-sample approximation via quantiles at (k - 0.5)/n."""
    grid = (np.arange(n) + 0.5) / n
    return EmpiricalDistribution(quantile_function(dist, grid))


def wasserstein_emp(a: EmpiricalDistribution, b: EmpiricalDistribution,
                    p: float = 2.0, resample: int | None = None) -> float:
    """p-Wasserstein distance between equal-weight sample sets.

    For equal sample counts this is the mean p-th power gap between order
    statistics, to the 1/p.  Unequal counts require `resample`, which maps
    both sets onto a common (k - 0.5)/K quantile grid first.
    """
    if p < 1:
        raise UsageError("order p must be >= 1")
    if resample is not None:
        grid = (np.arange(resample) + 0.5) / resample
        xa = quantile_function(a, grid)
        xb = quantile_function(b, grid)
    elif a.n == b.n:
        xa, xb = a.samples, b.samples
    else:
        raise UsageError("sample counts differ; pass resample=K to use a common quantile grid")
    return float(np.mean(np.abs(xa - xb) ** p) ** (1.0 / p))


def wasserstein_cat(a: CategoricalDistribution, b: CategoricalDistribution,
                    p: float = 2.0) -> float:
    """Exact p-Wasserstein distance between categorical distributions.

    Integrates |F_a^{-1} - F_b^{-1}|^p over [0, 1] by merging the CDF
    breakpoints of both inputs; between breakpoints both quantile functions
    are constant.
    """
    if p < 1:
        raise UsageError("order p must be >= 1")
    cuts = np.concatenate(([0.0], np.cumsum(a.probs)[:-1], np.cumsum(b.probs)[:-1], [1.0]))
    cuts = np.unique(np.clip(cuts, 0.0, 1.0))
    widths = np.diff(cuts)
    mids = 0.5 * (cuts[:-1] + cuts[1:])
    xa = quantile_function(a, mids)
    xb = quantile_function(b, mids)
    total = float(np.sum(widths * np.abs(xa - xb) ** p))
    return total ** (1.0 / p)


def monotone_coupling(sources, targets) -> CoupledPairs:
    """Pair k-th order statistics of sources and targets (stable on ties)."""
    src = np.asarray(sources, dtype=np.float64).ravel()
    tgt = np.asarray(targets, dtype=np.float64).ravel()
    if src.size != tgt.size:
        raise UsageError("sources and targets must have equal length")
    s = src[np.argsort(src, kind="stable")]
    t = tgt[np.argsort(tgt, kind="stable")]
    return CoupledPairs(np.stack([s, t], axis=1))


_BRUTE_FORCE_MAX = 8


@lru_cache(maxsize=_BRUTE_FORCE_MAX)
def _all_permutations(n: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n))), dtype=np.int64)


def brute_force_wasserstein(a: EmpiricalDistribution, b: EmpiricalDistribution,
                            p: float = 2.0) -> float:
    """Exhaustive-bijection transport oracle; refuses n > 8."""
    if a.n != b.n:
        raise UsageError("sample counts must match")
    if a.n > _BRUTE_FORCE_MAX:
        raise UsageError(f"brute force limited to n <= {_BRUTE_FORCE_MAX}")
    perms = _all_permutations(a.n)
    costs = np.mean(np.abs(b.samples[perms] - a.samples[None, :]) ** p, axis=1)
    return float(costs.min() ** (1.0 / p))


def iqm(values) -> float:
    """Inter-quartile mean: drop floor(n/4) values from each end, average the rest."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size < 4:
        raise UsageError("iqm needs at least 4 values")
    k = v.size // 4
    return float(v[k:v.size - k].mean())
