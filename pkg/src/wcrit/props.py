"""Fast, self-contained property checks.

Each check returns (ok, detail).  The CLI `props` subcommand runs them all
and exits nonzero on any failure; the acceptance tests reuse the checks whose
budgets match theirs.
"""

from __future__ import annotations

import numpy as np

from . import approx, baselines, dist1d, env, flowcritic, trainers


def check_sorted_coupling_optimality(n_cases: int = 200, seed: int = 0):
    """Sorted pairing matches the exhaustive min-cost bijection exactly."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_cases):
        n = int(rng.integers(1, 9))
        p = float(rng.choice([1.0, 2.0]))
        a = dist1d.EmpiricalDistribution(rng.normal(size=n) * rng.uniform(0.5, 3.0))
        b = dist1d.EmpiricalDistribution(rng.normal(size=n) * rng.uniform(0.5, 3.0))
        gap = abs(dist1d.wasserstein_emp(a, b, p) - dist1d.brute_force_wasserstein(a, b, p))
        worst = max(worst, gap)
    return worst <= 1e-12, f"max |sorted - brute force| = {worst:.3g} over {n_cases} cases"


def check_metric_axioms(n_cases: int = 60, seed: int = 1):
    """Symmetry (exact) and triangle inequality (1e-9) for both W variants."""
    rng = np.random.default_rng(seed)
    for _ in range(n_cases):
        n = int(rng.integers(2, 12))
        xs = [dist1d.EmpiricalDistribution(rng.normal(size=n)) for _ in range(3)]
        p = float(rng.choice([1.0, 2.0]))
        dab = dist1d.wasserstein_emp(xs[0], xs[1], p)
        dba = dist1d.wasserstein_emp(xs[1], xs[0], p)
        if dab != dba:
            return False, "empirical symmetry violated"
        dac = dist1d.wasserstein_emp(xs[0], xs[2], p)
        dcb = dist1d.wasserstein_emp(xs[2], xs[1], p)
        if dab > dac + dcb + 1e-9:
            return False, "empirical triangle inequality violated"
        cats = []
        for _ in range(3):
            m = int(rng.integers(2, 6))
            sup = np.sort(rng.normal(size=m) * 2)
            sup += np.arange(m) * 1e-6  # keep strictly increasing
            pr = rng.dirichlet(np.ones(m))
            pr = pr / pr.sum()
            cats.append(dist1d.CategoricalDistribution(sup, pr))
        dab = dist1d.wasserstein_cat(cats[0], cats[1], p)
        if abs(dab - dist1d.wasserstein_cat(cats[1], cats[0], p)) > 0:
            return False, "categorical symmetry violated"
        if dab > (dist1d.wasserstein_cat(cats[0], cats[2], p)
                  + dist1d.wasserstein_cat(cats[2], cats[1], p)) + 1e-9:
            return False, "categorical triangle inequality violated"
    return True, f"symmetry and triangle hold on {n_cases} random triples"


def check_scale_equivariance(n_cases: int = 50, seed: int = 2):
    """W_p(cX, cY) = |c| W_p(X, Y) within 1e-9."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        n = int(rng.integers(2, 10))
        c = float(rng.uniform(-3, 3))
        p = float(rng.choice([1.0, 2.0]))
        x = rng.normal(size=n)
        y = rng.normal(size=n)
        base = dist1d.wasserstein_emp(dist1d.EmpiricalDistribution(x),
                                      dist1d.EmpiricalDistribution(y), p)
        scaled = dist1d.wasserstein_emp(dist1d.EmpiricalDistribution(c * x),
                                        dist1d.EmpiricalDistribution(c * y), p)
        worst = max(worst, abs(scaled - abs(c) * base))
    return worst <= 1e-9, f"max scale-equivariance gap = {worst:.3g}"


def check_gradients(n_nets: int = 50, seed: int = 3, tol: float = 1e-4):
    """Backward matches central finite differences on random small nets."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_nets):
        if i % 2 == 0:
            dims = [int(rng.integers(2, 6)) for _ in range(int(rng.integers(2, 4)))] + [1]
            net = approx.init_mlp(dims, rng)
            x = rng.normal(size=(3, dims[0]))
            target = rng.normal(size=3)

            def loss_fn(arrays, net=net, x=x, target=target):
                layers = tuple((arrays[2 * j], arrays[2 * j + 1])
                               for j in range(len(net.layers)))
                y, _ = approx.forward(approx.NetParams(layers, net.activation), x)
                return float(np.mean((y - target) ** 2))

            arrays = [p for layer in net.layers for p in layer]
            y, cache = approx.forward(net, x)
            grads_bp, _ = approx.backward(net, cache, 2.0 * (y - target) / y.size)
            flat_bp = [p for layer in grads_bp for p in layer]
        else:
            embed = approx.EmbeddingConfig(cosine_basis=4, fourier_dim=4, fourier_freqs=2,
                                           hlgauss_bins=5, hlgauss_sigma=0.5,
                                           hlgauss_range=(-2.0, 2.0), step_embed_dim=4)
            net = approx.init_quantile_net(2, 2, 3, 4, 9, [5], rng)
            s = rng.integers(0, 2, size=4)
            a = rng.integers(0, 2, size=4)
            tau = rng.uniform(size=4)
            extra = np.concatenate([approx.hl_gauss_embed(rng.normal(size=4), embed),
                                    approx.fourier_time_embed(rng.uniform(size=4), embed)],
                                   axis=1)
            target = rng.normal(size=4)

            def loss_fn(arrays, net=net, s=s, a=a, tau=tau, extra=extra, target=target):
                y, _ = approx.quantile_net_forward(net.with_arrays(arrays), s, a, tau, extra)
                return float(np.mean((y - target) ** 2))

            arrays = net.to_arrays()
            y, cache = approx.quantile_net_forward(net, s, a, tau, extra)
            flat_bp = approx.quantile_net_backward(net, cache, 2.0 * (y - target) / y.size)
        grads_fd = approx.fd_gradients(loss_fn, arrays, step=1e-6)
        for g_bp, g_fd in zip(flat_bp, grads_fd):
            denom = np.maximum(np.maximum(np.abs(g_bp), np.abs(g_fd)), 1e-3)
            worst = max(worst, float((np.abs(g_bp - g_fd) / denom).max()))
    return worst <= tol, f"max relative gradient error = {worst:.3g} over {n_nets} nets"


def _constant_field(value: float, rng: np.random.Generator) -> flowcritic.VelocityField:
    """Shortcut field whose output is exactly `value` for every input."""
    embed = approx.EmbeddingConfig(cosine_basis=4, fourier_dim=4, fourier_freqs=2,
                                   hlgauss_bins=5, hlgauss_sigma=0.5,
                                   hlgauss_range=(-4.0, 4.0), step_embed_dim=4)
    cfg = flowcritic.FlowCriticConfig(K=4, M=2, kappa=1.0, shortcut_enabled=True,
                                      hidden_dims=(4,), embed_dim=3)
    sm = flowcritic.SourceMap(1.0, -1.0, 1.0, -1.0, 1.0)
    fld = flowcritic.init_velocity_field(2, 2, cfg, embed, sm, rng)
    arrays = [np.zeros_like(a) for a in fld.net.to_arrays()]
    arrays[-1] = np.array([value])  # output bias
    fld = fld.with_net_arrays(arrays)
    return fld.with_target(approx.TargetParams(tuple(a.copy() for a in arrays),
                                               fld.target.rho))


def check_shortcut_zero_bias(n_cases: int = 100, seed: int = 4):
    """Constant fields: zero consistency residual and bitwise step composition."""
    rng = np.random.default_rng(seed)
    cfg = flowcritic.FlowCriticConfig(K=4, M=2, kappa=1.0, shortcut_enabled=True,
                                      lambda_c=1.0, hidden_dims=(4,), embed_dim=3)
    for _ in range(n_cases):
        c = float(rng.uniform(-2.0, 2.0))
        fld = _constant_field(c, rng)
        d = float(rng.choice([0.5, 0.25, 0.125]))
        n_bins = 4
        # compare a single 2d step against two composed d steps from the same state
        s = np.zeros(3, dtype=np.int64)
        a = np.zeros(3, dtype=np.int64)
        tau = rng.uniform(size=3)
        sched_2d = flowcritic.TimeSchedule(np.array([0.0, 2 * d, 1.0]) if 2 * d < 1.0
                                           else np.array([0.0, 1.0]),
                                           np.linspace(0, 1, n_bins + 1), np.zeros(n_bins))
        sched_dd = flowcritic.TimeSchedule(np.array([0.0, d, 2 * d, 1.0]) if 2 * d < 1.0
                                           else np.array([0.0, d, 1.0]),
                                           np.linspace(0, 1, n_bins + 1), np.zeros(n_bins))
        z_one = flowcritic.integrate(fld, s, a, tau, sched_2d)
        z_two = flowcritic.integrate(fld, s, a, tau, sched_dd)
        if not np.array_equal(z_one, z_two):
            return False, f"composed steps differ bitwise for constant field {c}"
        y = rng.uniform(-1, 1, size=(2, cfg.K))
        tau_p = rng.uniform(size=(2, cfg.K))
        batch = flowcritic.couple_batch(tau_p, y, np.zeros(2, dtype=np.int64),
                                        np.zeros(2, dtype=np.int64), fld.source, cfg, rng)
        residual, _ = flowcritic.shortcut_consistency_loss(fld, batch, cfg, rng)
        if residual != 0.0:
            return False, f"nonzero consistency residual {residual} for constant field"
    return True, f"exact zero bias on {n_cases} constant-field instances"


def check_single_step_w2_identity(n_cases: int = 100, seed: int = 5):
    """d=1 shortcut loss equals squared empirical W2 on sorted shared grids."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        k = int(rng.integers(2, 12))
        sm = flowcritic.SourceMap(1.0, -1.0, 1.0, -1.0, 1.0)
        tau = np.sort(rng.uniform(size=k))
        z0 = sm.g(tau)
        y = np.sort(rng.normal(size=k) * rng.uniform(0.5, 2.0))
        # monotone one-step map: affine in the source value with slope >= 0
        slope = float(rng.uniform(0.0, 2.0))
        bias = float(rng.normal())
        pred_velocity = slope * z0 + bias          # s_theta(0, z0, d=1)
        outputs = z0 + 1.0 * pred_velocity          # one-step transport of each quantile
        loss = float(np.mean((pred_velocity - (y - z0)) ** 2))
        w2 = dist1d.wasserstein_emp(dist1d.EmpiricalDistribution(outputs),
                                    dist1d.EmpiricalDistribution(y), 2.0)
        worst = max(worst, abs(loss - w2 ** 2))
    return worst <= 1e-9, f"max |single-step loss - W2^2| = {worst:.3g}"


def check_jensen_step(n_cases: int = 100, seed: int = 6):
    """Squared endpoint error never exceeds the integrated squared velocity gap."""
    rng = np.random.default_rng(seed)
    grid = np.linspace(0.0, 1.0, 512)
    for _ in range(n_cases):
        coeffs = rng.normal(size=5)
        freqs = rng.uniform(0.5, 6.0, size=5)
        v = sum(c * np.sin(f * np.pi * grid) for c, f in zip(coeffs, freqs))
        u = float(rng.normal())
        lhs = float(np.mean(v - u)) ** 2
        rhs = float(np.mean((v - u) ** 2))
        if lhs > rhs + 1e-12:
            return False, "Jensen step inequality violated"
    return True, f"endpoint bound holds on {n_cases} random fields"


def check_schedule_constant_curvature():
    """Constant curvature inverts to the uniform grid within 1e-9."""
    for m in (2, 4, 8):
        edges = np.linspace(0.0, 1.0, 17)
        knots = flowcritic.knots_from_curvature(edges, np.full(16, 3.7), 0.0, m)
        if np.abs(knots - np.linspace(0, 1, m + 1)).max() > 1e-9:
            return False, f"constant curvature gave non-uniform knots at M={m}"
    return True, "uniform knots recovered for constant curvature"


def check_coupling_marginals(n_cases: int = 50, seed: int = 7):
    """Sorted and independent coupling share the same per-row multisets."""
    rng = np.random.default_rng(seed)
    sm = flowcritic.SourceMap(1.0, 0.0, 1.0, 0.0, 1.0)
    for _ in range(n_cases):
        k = int(rng.integers(2, 10))
        y = rng.normal(size=(3, k))
        tau = rng.uniform(size=(3, k))
        sort_cfg = flowcritic.FlowCriticConfig(K=k, coupling_mode="sorted")
        ind_cfg = flowcritic.FlowCriticConfig(K=k, coupling_mode="independent")
        s = np.zeros(3, dtype=np.int64)
        cb_s = flowcritic.couple_batch(tau, y, s, s, sm, sort_cfg,
                                       np.random.default_rng(0))
        cb_i = flowcritic.couple_batch(tau, y, s, s, sm, ind_cfg,
                                       np.random.default_rng(0))
        for row in range(3):
            if not (np.allclose(np.sort(cb_s.y[row]), np.sort(cb_i.y[row]))
                    and np.allclose(np.sort(cb_s.tau[row]), np.sort(cb_i.tau[row]))):
                return False, "coupling changed the marginals"
    return True, f"marginals identical across couplings on {n_cases} batches"


def check_oracle_mean(seed: int = 8):
    """Distributional-DP means match scalar policy evaluation within 1e-6."""
    specs = [
        ("0.5:1", 0.5, 4),
        ("1:0.5,-1:0.25,2:0.25", 0.9, 3),
        ("0:0.5,1:0.5|2:1", 0.8, 3),
    ]
    worst = 0.0
    for rewards, gamma, n_states in specs:
        mdp = env.build_chain_mdp(n_states, trainers.parse_reward_steps(rewards), gamma)
        policy = env.FixedPolicy.uniform(mdp.n_states, mdp.n_actions)
        oracle = env.oracle_return_distribution(mdp, policy, support_size=801)
        gap = np.abs(oracle.means() - env.scalar_q_values(mdp, policy)).max()
        worst = max(worst, float(gap))
    return worst <= 1e-6, f"max |oracle mean - scalar DP| = {worst:.3g}"


def check_hlgauss_probability(n_cases: int = 200, seed: int = 9):
    """Value embedding is a probability vector for every finite input."""
    rng = np.random.default_rng(seed)
    embed = approx.EmbeddingConfig(cosine_basis=4, fourier_dim=4, fourier_freqs=2,
                                   hlgauss_bins=11, hlgauss_sigma=0.3,
                                   hlgauss_range=(-1.0, 2.0), step_embed_dim=4)
    z = rng.normal(size=n_cases) * 10.0 ** rng.integers(-3, 6, size=n_cases)
    out = approx.hl_gauss_embed(z, embed)
    ok = bool(np.all(out >= 0) and np.abs(out.sum(axis=1) - 1.0).max() <= 1e-9)
    return ok, "embedding sums to 1 and is nonnegative for extreme inputs"


ALL_CHECKS = [
    ("sorted-coupling optimality", check_sorted_coupling_optimality),
    ("metric axioms", check_metric_axioms),
    ("scale equivariance", check_scale_equivariance),
    ("gradient integrity", check_gradients),
    ("shortcut zero bias", check_shortcut_zero_bias),
    ("single-step W2 identity", check_single_step_w2_identity),
    ("Jensen step bound", check_jensen_step),
    ("constant-curvature schedule", check_schedule_constant_curvature),
    ("coupling marginals", check_coupling_marginals),
    ("oracle mean cross-check", check_oracle_mean),
    ("HL-Gauss probability vector", check_hlgauss_probability),
]


def run_all():
    return [(name, *fn()) for name, fn in ALL_CHECKS]
