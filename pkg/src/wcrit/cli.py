"""Batch experiment front end.

Flat key=value config files (dotted sections, '#' comments), subcommand
dispatch for the trainers and the property suite, sweep orchestration with
IQM summaries, and deterministic CSV/JSON-lines/SVG artifact emission.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import itertools
import json
import os
import sys
from dataclasses import replace

from . import props, trainers
from .errors import ConfigError, UsageError
from .trainers import EnvSpec, RunConfig

SEED_ENV_VAR = "WCRIT_SEED"


# ---------------------------------------------------------------------------
# config file schema


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int_tuple(raw: str) -> tuple:
    return tuple(int(x) for x in raw.split(",") if x != "")


def _parse_float_tuple(raw: str) -> tuple:
    return tuple(float(x) for x in raw.split(",") if x != "")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (section, field, parser); sections map onto the nested RunConfig
_KEYS = {
    "env.kind": ("env", "kind", str),
    "env.n_states": ("env", "n_states", int),
    "env.gamma": ("env", "gamma", float),
    "env.rewards": ("env", "rewards", str),
    "env.branch_rewards": ("env", "branch_rewards", str),
    "env.action_rewards": ("env", "action_rewards", str),
    "env.behaviour": ("env", "behaviour", str),
    "critic.kind": ("root", "critic_kind", str),
    "critic.K": ("flow", "K", int),
    "critic.M": ("flow", "M", int),
    "critic.kappa": ("flow", "kappa", float),
    "critic.lambda_c": ("flow", "lambda_c", float),
    "critic.shortcut": ("flow", "shortcut_enabled", _parse_bool),
    "critic.shortcut_step_sizes": ("flow", "shortcut_step_sizes", _parse_float_tuple),
    "critic.schedule": ("flow", "schedule_mode", str),
    "critic.ensemble_size": ("flow", "ensemble_size", int),
    "critic.coupling": ("flow", "coupling_mode", str),
    "critic.tau_mode": ("flow", "tau_mode", str),
    "critic.ensemble_aggregate": ("flow", "ensemble_aggregate", str),
    "critic.hidden_dims": ("flow", "hidden_dims", _parse_int_tuple),
    "critic.embed_dim": ("flow", "embed_dim", int),
    "iqn.n_quantiles": ("iqn", "n_quantiles_per_update", int),
    "iqn.huber_kappa": ("iqn", "huber_kappa", float),
    "iqn.hidden_dims": ("iqn", "hidden_dims", _parse_int_tuple),
    "iqn.embed_dim": ("iqn", "embed_dim", int),
    "train.gradient_steps": ("root", "gradient_steps", int),
    "train.batch_size": ("root", "batch_size", int),
    "train.eval_every": ("root", "eval_every", int),
    "train.seed": ("root", "seed", int),
    "train.J": ("root", "J", int),
    "train.dataset_size": ("root", "dataset_size", int),
    "train.horizon": ("root", "horizon", int),
    "train.eval_samples": ("root", "eval_samples", int),
    "train.support_size": ("root", "support_size", int),
    "train.lr": ("root", "lr", float),
    "train.rho": ("root", "rho", float),
    "train.sched_refresh": ("root", "sched_refresh", int),
    "train.scalarize_grid": ("root", "scalarize_grid", int),
    "train.dp_sweeps": ("root", "dp_sweeps", int),
    "embed.cosine_basis": ("root", "cosine_basis", int),
    "embed.fourier_freqs": ("root", "fourier_freqs", int),
    "embed.hlgauss_bins": ("root", "hlgauss_bins", int),
    "embed.step_embed_dim": ("root", "step_embed_dim", int),
    "embed.hlgauss_sigma": ("root", "hlgauss_sigma", float),
}

_ALIASES = {"gamma": "env.gamma", "seed": "train.seed"}


class ParseError(ConfigError):
    pass


def parse_config_lines(lines, source: str = "<config>") -> RunConfig:
    values = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        key = _ALIASES.get(key, key)
        if key not in _KEYS:
            raise ParseError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ParseError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = (value.strip(), lineno)

    sections = {"root": {}, "env": {}, "flow": {}, "iqn": {}}
    for key, (raw, lineno) in values.items():
        section, fieldname, parser = _KEYS[key]
        try:
            sections[section][fieldname] = parser(raw)
        except ValueError as exc:
            raise ParseError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from exc
    try:
        return RunConfig(env=EnvSpec(**sections["env"]),
                         flow=trainers.FlowCriticConfig(**sections["flow"]),
                         iqn=trainers.IqnConfig(**sections["iqn"]),
                         **sections["root"])
    except ConfigError as exc:
        raise ParseError(f"{source}: {exc}") from exc


def parse_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config_lines(fh.readlines(), source=str(path))


def serialize_config(cfg: RunConfig) -> str:
    """Canonical key=value form; parse_config(serialize_config(c)) == c."""
    parts = {"root": cfg, "env": cfg.env, "flow": cfg.flow, "iqn": cfg.iqn}
    lines = []
    for key, (section, fieldname, _) in _KEYS.items():
        lines.append(f"{key}={_fmt(getattr(parts[section], fieldname))}")
    return "\n".join(lines) + "\n"


def apply_overrides(cfg: RunConfig, pairs) -> RunConfig:
    """Apply --set key=value pairs on top of a parsed config."""
    sections = {"root": {}, "env": {}, "flow": {}, "iqn": {}}
    for pair in pairs:
        if "=" not in pair:
            raise ParseError(f"override must look like key=value, got {pair!r}")
        key, _, raw = pair.partition("=")
        key = _ALIASES.get(key.strip(), key.strip())
        if key not in _KEYS:
            raise ParseError(f"unknown override key {key!r}")
        section, fieldname, parser = _KEYS[key]
        try:
            sections[section][fieldname] = parser(raw.strip())
        except ValueError as exc:
            raise ParseError(f"bad value for {key!r}: {exc}") from exc
    if sections["env"]:
        cfg = replace(cfg, env=replace(cfg.env, **sections["env"]))
    if sections["flow"]:
        cfg = replace(cfg, flow=replace(cfg.flow, **sections["flow"]))
    if sections["iqn"]:
        cfg = replace(cfg, iqn=replace(cfg.iqn, **sections["iqn"]))
    if sections["root"]:
        cfg = replace(cfg, **sections["root"])
    return cfg


# ---------------------------------------------------------------------------
# artifact emission


def write_events(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_line_svg(path, xs, ys, title: str, width: int = 640, height: int = 400) -> None:
    """Static single-series line chart; output is byte-identical per input."""
    pad = 50.0
    xs = [float(x) for x in xs]
    ys = [float(y) for y in ys]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi - x_lo <= 0:
        x_hi = x_lo + 1.0
    if y_hi - y_lo <= 0:
        y_hi = y_lo + 1.0

    def px(x):
        return pad + (x - x_lo) / (x_hi - x_lo) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y_lo) / (y_hi - y_lo) * (height - 2 * pad)

    points = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
    svg = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
        f'<line x1="{pad:.0f}" y1="{height - pad:.0f}" x2="{width - pad:.0f}" '
        f'y2="{height - pad:.0f}" stroke="black"/>',
        f'<line x1="{pad:.0f}" y1="{pad:.0f}" x2="{pad:.0f}" '
        f'y2="{height - pad:.0f}" stroke="black"/>',
        f'<text x="{pad:.0f}" y="{height - pad + 18:.0f}" font-family="sans-serif" '
        f'font-size="11">{x_lo:.6g}</text>',
        f'<text x="{width - pad:.0f}" y="{height - pad + 18:.0f}" text-anchor="end" '
        f'font-family="sans-serif" font-size="11">{x_hi:.6g}</text>',
        f'<text x="{pad - 6:.0f}" y="{height - pad:.0f}" text-anchor="end" '
        f'font-family="sans-serif" font-size="11">{y_lo:.6g}</text>',
        f'<text x="{pad - 6:.0f}" y="{pad + 4:.0f}" text-anchor="end" '
        f'font-family="sans-serif" font-size="11">{y_hi:.6g}</text>',
        f'<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" points="{points}"/>',
        "</svg>",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(svg) + "\n")


def _trace_records(trace) -> list:
    return [{"step": r.step, "mean_w2": r.mean_w2, "iqm_neg_w2": r.iqm_neg_w2,
             "sup_w2": r.sup_w2, "loss": r.loss} for r in trace.records]


def _emit_trace(trace, out_dir) -> None:
    trace.to_csv(os.path.join(out_dir, "metrics.csv"))
    write_events(os.path.join(out_dir, "events.jsonl"), _trace_records(trace))
    steps = [r.step for r in trace.records]
    if len(steps) >= 2:
        write_line_svg(os.path.join(out_dir, "mean_w2.svg"), steps,
                       [r.mean_w2 for r in trace.records], "mean W2 vs step")


# ---------------------------------------------------------------------------
# subcommands


def run(subcommand: str, cfg: RunConfig, out_dir: str) -> int:
    """Execute one trainer or the property suite; returns an exit status."""
    os.makedirs(out_dir, exist_ok=True)
    if subcommand == "eval-fixed":
        trace = trainers.train_fixed_policy(cfg)
        _emit_trace(trace, out_dir)
        if "diverged_at" in trace.diagnostics:
            print(f"run diverged at step {trace.diagnostics['diverged_at']}")
            return 1
        return 0
    if subcommand == "offline":
        result = trainers.train_offline_rejection(cfg)
        _emit_trace(result.trace, out_dir)
        with open(os.path.join(out_dir, "policy.csv"), "w") as fh:
            fh.write("state,action\n")
            for s, a in enumerate(result.policy):
                fh.write(f"{s},{a}\n")
        summary = {"extraction_return": result.extraction_return,
                   "behaviour_return": result.behaviour_return,
                   "fallback_states": result.diagnostics.get("fallback_states", [])}
        with open(os.path.join(out_dir, "extraction.json"), "w") as fh:
            fh.write(json.dumps(summary, sort_keys=True) + "\n")
        return 1 if "diverged_at" in result.trace.diagnostics else 0
    if subcommand == "contraction":
        mdp, behaviour = trainers.build_env(cfg.env)
        result = trainers.contraction_study(mdp, behaviour, p=2.0,
                                            sweeps=cfg.dp_sweeps,
                                            support_size=cfg.support_size)
        result.to_csv(os.path.join(out_dir, "contraction.csv"))
        return 0
    if subcommand == "props":
        results = props.run_all()
        failures = 0
        lines = []
        for name, ok, detail in results:
            status = "PASS" if ok else "FAIL"
            line = f"[{status}] {name}: {detail}"
            print(line)
            lines.append(line)
            failures += 0 if ok else 1
        with open(os.path.join(out_dir, "props.txt"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
        return 0 if failures == 0 else 1
    print(f"unknown subcommand {subcommand!r}", file=sys.stderr)
    return 2


def _sweep_one(args):
    subcommand, cfg, out_dir = args
    status = run(subcommand, cfg, out_dir)
    final = None
    metrics = os.path.join(out_dir, "metrics.csv")
    if os.path.exists(metrics):
        with open(metrics) as fh:
            rows = list(fh)
        if len(rows) >= 2:
            final = float(rows[-1].split(",")[1])
    extraction = os.path.join(out_dir, "extraction.json")
    ret = None
    if os.path.exists(extraction):
        with open(extraction) as fh:
            ret = json.load(fh).get("extraction_return")
    return status, final, ret


def sweep(cfg: RunConfig, override_specs, seeds: int, out_dir: str,
          jobs: int = 1, subcommand: str = "eval-fixed") -> int:
    """Cartesian product of value overrides x seeds, with an IQM summary."""
    grid_keys, grid_values = [], []
    for spec in override_specs:
        if "=" not in spec:
            raise ParseError(f"sweep override must look like key=v1,v2,..., got {spec!r}")
        key, _, values = spec.partition("=")
        key = _ALIASES.get(key.strip(), key.strip())
        if key not in _KEYS:
            raise ParseError(f"unknown override key {key!r}")
        grid_keys.append(key)
        grid_values.append(values.split(","))
    combos = list(itertools.product(*grid_values)) if grid_keys else [()]

    os.makedirs(out_dir, exist_ok=True)
    tasks = []
    for ci, combo in enumerate(combos):
        pairs = [f"{k}={v}" for k, v in zip(grid_keys, combo)]
        for si in range(seeds):
            sub = apply_overrides(cfg, pairs)
            sub = replace(sub, seed=cfg.seed + si)
            sub_dir = os.path.join(out_dir, f"cfg{ci:03d}_seed{sub.seed}")
            tasks.append((ci, combo, (subcommand, sub, sub_dir)))

    results = {}
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            for (ci, combo, _), out in zip(tasks, pool.map(_sweep_one,
                                                           [t[2] for t in tasks])):
                results.setdefault((ci, combo), []).append(out)
    else:
        for ci, combo, task in tasks:
            results.setdefault((ci, combo), []).append(_sweep_one(task))

    status = 0
    summary_path = os.path.join(out_dir, "summary.csv")
    with open(summary_path, "w") as fh:
        metric_col = "iqm_extraction_return" if subcommand == "offline" else "iqm_final_mean_w2"
        fh.write(",".join(grid_keys + ["n_seeds", metric_col]) + "\n")
        for (ci, combo) in sorted(results):
            outs = results[(ci, combo)]
            status = max(status, max(o[0] for o in outs))
            vals = [o[2] if subcommand == "offline" else o[1] for o in outs]
            vals = [v for v in vals if v is not None]
            agg = trainers.iqm_or_mean(vals) if vals else float("nan")
            fh.write(",".join(list(combo) + [str(len(outs)), format(agg, ".17g")]) + "\n")
    print(f"sweep summary written to {summary_path}")
    return status


# ---------------------------------------------------------------------------
# entry point


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="wcrit",
                                     description="flow-critic desk experiments")
    parser.add_argument("subcommand",
                        choices=["eval-fixed", "offline", "contraction", "props", "sweep"])
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    parser.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2,...",
                        help="sweep a config key over several values (repeatable)")
    parser.add_argument("--seeds", type=int, default=1, help="seed count for sweep")
    parser.add_argument("--cmd", default="eval-fixed",
                        choices=["eval-fixed", "offline"],
                        help="which run each sweep cell executes")
    args = parser.parse_args(argv)

    try:
        cfg = parse_config(args.config) if args.config else RunConfig()
        cfg = apply_overrides(cfg, args.set)
        env_seed = os.environ.get(SEED_ENV_VAR)
        if env_seed is not None:
            cfg = replace(cfg, seed=int(env_seed))
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.subcommand == "sweep":
            return sweep(cfg, args.grid, args.seeds, args.out, jobs=args.jobs,
                         subcommand=args.cmd)
        return run(args.subcommand, cfg, args.out)
    except (ConfigError, UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
