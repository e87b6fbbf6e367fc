"""``smx`` command line: train, eval, bench and plan.

Exit codes: 0 success, 2 configuration or user error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .core import InvalidArgument, PolicyDistribution, RngStream
from .envs import ConfigError, Env, make_env
from .exit import TrainConfig, bootstrap_ci, evaluate, exit_loop, make_planner
from .mcts import PuctConfig, root_policy, search
from .nets import Net, TrainingError, load_checkpoint, save_checkpoint
from .smc import SmcConfig, net_closures, plan

log = logging.getLogger("smx")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SMX_PARTICLE_GRID = [4, 8, 16, 32, 64, 128, 256, 512]
MCTS_BUDGET_GRID = [4, 8, 16, 32, 64, 128, 256, 512, 1024]
PLANNERS = ("smx", "mcts", "none")


class UserError(Exception):
    """Bad configuration or arguments; maps to exit code 2."""


# -- configuration --------------------------------------------------------------

def _section(cls, data, name):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise UserError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise UserError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except (InvalidArgument, TypeError) as exc:
        raise UserError(f"invalid {name!r} section: {exc}") from exc


@dataclass
class RunConfig:
    """Everything a run needs; together with the seed it fixes the metrics."""

    env: dict = field(default_factory=lambda: {"id": "chain"})
    planner: str = "smx"
    smc: SmcConfig = field(default_factory=SmcConfig)
    puct: PuctConfig = field(default_factory=PuctConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    iterations: int = 10
    eval_interval: int = 0
    eval_episodes: int = 0
    checkpoint_interval: int = 0
    workers: int = 1

    TOP_KEYS = ("env", "planner", "smc", "puct", "train", "seed", "iterations", "eval_interval",
                "eval_episodes", "checkpoint_interval", "workers")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise UserError("config must be a mapping at the top level")
        unknown = sorted(set(data) - set(cls.TOP_KEYS))
        if unknown:
            raise UserError(f"unknown config key(s): {', '.join(unknown)}")
        env = data.get("env", {"id": "chain"})
        if isinstance(env, str):
            env = {"id": env}
        if not isinstance(env, dict) or "id" not in env:
            raise UserError("env must be a mapping with an 'id'")
        cfg = cls(
            env=dict(env),
            planner=str(data.get("planner", "smx")),
            smc=_section(SmcConfig, data.get("smc"), "smc"),
            puct=_section(PuctConfig, data.get("puct"), "puct"),
            train=_section(TrainConfig, data.get("train"), "train"),
        )
        for key in ("seed", "iterations", "eval_interval", "eval_episodes", "checkpoint_interval", "workers"):
            if key in data:
                value = data[key]
                if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                    raise UserError(f"{key} must be a nonnegative integer")
                setattr(cfg, key, value)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.planner not in PLANNERS:
            raise UserError(f"planner must be one of {PLANNERS}")
        if self.workers < 1:
            raise UserError("workers must be >= 1")
        try:
            env = make_env(self.env)
        except ConfigError as exc:
            raise UserError(str(exc)) from exc
        if self.planner == "mcts" and not env.discrete:
            raise UserError("the mcts planner needs a discrete action space")

    def to_dict(self) -> dict:
        env = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.env.items()}
        return {
            "env": env,
            "planner": self.planner,
            "smc": self.smc.to_dict(),
            "puct": self.puct.to_dict(),
            "train": self.train.to_dict(),
            "seed": self.seed,
            "iterations": self.iterations,
            "eval_interval": self.eval_interval,
            "eval_episodes": self.eval_episodes,
            "checkpoint_interval": self.checkpoint_interval,
            "workers": self.workers,
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise UserError(f"cannot parse config: {exc}") from exc
        return cls.from_dict(data or {})

    @property
    def planner_config(self):
        return {"smx": self.smc, "mcts": self.puct, "none": None}[self.planner]


def preset_names() -> list[str]:
    root = resources.files("smx") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_config(source: str) -> RunConfig:
    """Read a config from a path, or from a shipped preset name."""
    path = Path(source)
    if path.is_file():
        return RunConfig.from_yaml(path.read_text())
    preset = resources.files("smx") / "presets" / f"{source}.yaml"
    if preset.is_file():
        return RunConfig.from_yaml(preset.read_text())
    raise UserError(f"no config file or preset named {source!r}; presets: {', '.join(preset_names())}")


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    if getattr(args, "planner", None) is not None:
        cfg.planner = args.planner
    if getattr(args, "iterations", None) is not None:
        cfg.iterations = args.iterations
    cfg.validate()
    return cfg


# -- helpers -----------------------------------------------------------------------

def _json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def _write_table(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _binomial_ci(rate: float, n: int) -> tuple[float, float]:
    half = 1.96 * np.sqrt(max(rate * (1 - rate), 0.0) / max(n, 1))
    return max(0.0, rate - half), min(1.0, rate + half)


def _load_net_for(env: Env, checkpoint: str | None, cfg: RunConfig) -> tuple[Net, dict]:
    if checkpoint is None:
        from .exit import build_net
        return build_net(env, cfg.train, cfg.seed), {}
    try:
        net, meta = load_checkpoint(checkpoint)
    except OSError as exc:
        raise UserError(f"cannot read checkpoint: {exc}") from exc
    except InvalidArgument as exc:
        raise UserError(str(exc)) from exc
    want = env.num_actions if env.discrete else env.action_dim
    if net.obs_dim != env.obs_dim or net.out_dim != want or (net.kind == "categorical") != env.discrete:
        raise UserError(f"checkpoint architecture (obs {net.obs_dim}, out {net.out_dim}, {net.kind}) "
                        f"does not match env {env.id} (obs {env.obs_dim}, out {want})")
    return net, meta


def _config_for(args) -> RunConfig:
    """Config from --config, else from the checkpoint's recorded run config."""
    if getattr(args, "config", None):
        return _apply_overrides(load_config(args.config), args)
    if getattr(args, "checkpoint", None):
        try:
            _, meta = load_checkpoint(args.checkpoint)
        except (OSError, InvalidArgument) as exc:
            raise UserError(f"cannot read checkpoint: {exc}") from exc
        if "config" not in meta:
            raise UserError("checkpoint carries no run config; pass --config")
        return _apply_overrides(RunConfig.from_dict(meta["config"]), args)
    raise UserError("pass --config (path or preset) or --checkpoint")


# -- train ------------------------------------------------------------------------

def run_train(cfg: RunConfig, out: Path, export_plot: bool = False) -> int:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml())
    env = make_env(cfg.env)
    meta = {"config": cfg.to_dict()}
    metrics_path, timing_path = out / "metrics.jsonl", out / "timing.jsonl"
    for p in (metrics_path, timing_path):
        p.write_text("")
    records = []
    start = last = time.perf_counter()

    def on_metrics(rec):
        nonlocal last
        now = time.perf_counter()
        with open(metrics_path, "a") as fh:
            fh.write(_json_line(rec) + "\n")
        with open(timing_path, "a") as fh:
            fh.write(_json_line({"iteration": rec["iteration"], "seconds": now - last,
                                 "elapsed": now - start}) + "\n")
        last = now
        records.append(rec)

    try:
        result = exit_loop(env, cfg.planner_config, cfg.train, cfg.iterations, RngStream(cfg.seed),
                           eval_interval=cfg.eval_interval, eval_episodes=cfg.eval_episodes,
                           checkpoint_interval=cfg.checkpoint_interval, workers=cfg.workers,
                           on_metrics=on_metrics, meta=meta)
    except TrainingError as exc:
        it, blob = getattr(exc, "checkpoint", (0, None))
        if blob is not None:
            (out / f"ckpt_{it:06d}.smx").write_bytes(blob)
        print(f"error: training diverged at iteration {getattr(exc, 'iteration', '?')}: {exc}; "
              f"last good checkpoint ckpt_{it:06d}.smx", file=sys.stderr)
        return EXIT_NUMERIC
    for it, blob in result.checkpoints:
        (out / f"ckpt_{it:06d}.smx").write_bytes(blob)
    save_checkpoint(out / "ckpt_final.smx", result.net, meta)
    if export_plot:
        rows = []
        for r in records:
            if r.get("eval_search_solve_rate") is None:
                continue
            for mode in ("prior", "search"):
                rate = r[f"eval_{mode}_solve_rate"]
                lo, hi = _binomial_ci(rate, cfg.eval_episodes)
                rows.append([mode, r["env_steps"], rate, lo, hi])
        _write_table(out / "plot_sample_efficiency.tsv", ["policy", "env_steps", "solve_rate", "ci_lo", "ci_hi"],
                     rows)
    final = records[-1] if records else {}
    print(f"trained {cfg.iterations} iterations on {cfg.env['id']} with {cfg.planner}; "
          f"search solve rate {final.get('search_solve_rate')}; outputs in {out}")
    return EXIT_OK


# -- eval -------------------------------------------------------------------------

def run_eval(cfg: RunConfig, net: Net, modes: list[str], episodes: int, seed: int) -> dict:
    env = make_env(cfg.env)
    planner = make_planner(cfg.planner, cfg.planner_config, env, cfg.workers) if cfg.planner != "none" else None
    rng = RngStream(seed, stream_id=0xE7A1)
    summary = {"env": cfg.env["id"], "episodes": episodes}
    for mode in modes:
        if mode == "search" and planner is None:
            raise UserError("search evaluation needs planner smx or mcts")
        res = evaluate(env, net, mode, episodes, rng.split(), planner)
        if episodes > 0:
            res["iqm_ci"] = list(bootstrap_ci(res["returns"], rng.split()))
        summary[mode] = res
    return summary


def _print_eval(summary: dict) -> None:
    for mode in ("prior", "search"):
        if mode not in summary:
            continue
        r = summary[mode]
        if r["episodes"] == 0:
            print(f"{mode:>6}: no episodes")
            continue
        lo, hi = r["iqm_ci"]
        print(f"{mode:>6}: mean return {r['mean_return']:.4f}  IQM {r['iqm_return']:.4f} "
              f"[{lo:.4f}, {hi:.4f}]  solve rate {r['solve_rate']:.4f}  ({r['episodes']} episodes)")


# -- bench ------------------------------------------------------------------------

def time_decisions(env: Env, net: Net, kind: str, config, roots: list, seed: int) -> np.ndarray:
    """Wall-clock seconds of one planner decision from each root."""
    prior_fn, value_fn = net_closures(net, env)
    rng = RngStream(seed, stream_id=0xBE7C)
    out = np.zeros(len(roots))
    for i, root in enumerate(roots):
        r = rng.split()
        t0 = time.perf_counter()
        if kind == "smx":
            plan(root, prior_fn, value_fn, env, config, r)
        else:
            root_policy(search(root, prior_fn, value_fn, env, config, r), config)
        out[i] = time.perf_counter() - t0
    return out


def run_bench(cfg: RunConfig, net: Net, particles: list[int], horizons: list[int], simulations: list[int],
              decisions: int, episodes: int, seed: int) -> list[dict]:
    env = make_env(cfg.env)
    gen = RngStream(seed, stream_id=0xBE7D)
    roots = [env.reset(gen.split()) for _ in range(decisions)]
    grid = [("smx", {"num_particles": n, "horizon": h}) for h in horizons for n in particles]
    if env.discrete:
        grid += [("mcts", {"simulations": s}) for s in simulations]
    rows = []
    for kind, params in grid:
        if kind == "smx":
            h = params["horizon"]
            config = SmcConfig(**{**cfg.smc.to_dict(), **params,
                                  "resample_period": min(cfg.smc.resample_period, h)})
            budget = params["num_particles"] * h
        else:
            config = PuctConfig(**{**cfg.puct.to_dict(), **params})
            budget = params["simulations"]
        lat = time_decisions(env, net, kind, config, roots, seed)
        row = {"planner": kind, **params, "budget": budget, "latency_ms": 1e3 * float(np.median(lat)),
               "latency_mean_ms": 1e3 * float(lat.mean())}
        if episodes > 0:
            res = evaluate(env, net, "search", episodes, gen.split(), make_planner(kind, config, env))
            row["solve_rate"] = res["solve_rate"]
            row["mean_return"] = res["mean_return"]
        rows.append(row)
    return rows


def _print_table(rows: list[dict]) -> None:
    if not rows:
        return
    cols = ["planner", "num_particles", "horizon", "simulations", "budget", "latency_ms", "solve_rate"]
    cols = [c for c in cols if any(c in r for r in rows)]
    print("  ".join(f"{c:>13}" for c in cols))
    for r in rows:
        cells = []
        for c in cols:
            v = r.get(c, "")
            cells.append(f"{v:>13.3f}" if isinstance(v, float) else f"{v!s:>13}")
        print("  ".join(cells))


# -- plan -------------------------------------------------------------------------

def _fmt_probs(p) -> str:
    return "[" + ", ".join(f"{x:.4f}" for x in p) + "]"


def run_plan(cfg: RunConfig, net: Net, state_text: str, prior: str, value: str, seed: int) -> dict:
    env = make_env(cfg.env)
    try:
        root = env.parse_state(state_text)
    except InvalidArgument as exc:
        raise UserError(str(exc)) from exc
    if env.discrete and env.is_terminal(np.array([root.data], dtype=env.dtype))[0]:
        raise UserError("cannot plan from a terminal state")
    prior_fn, value_fn = net_closures(net, env)
    if prior == "uniform":
        if not env.discrete:
            raise UserError("--prior uniform needs a discrete env")
        prior_fn = lambda b: np.full((len(b), env.num_actions), 1.0 / env.num_actions)  # noqa: E731
    if value == "zero":
        value_fn = lambda b: np.zeros(len(b))  # noqa: E731
    elif value == "exact":
        from .oracle import exact_state_values
        try:
            value_fn = exact_state_values(env, gamma=cfg.smc.search_gamma, roots=[root])
        except InvalidArgument as exc:
            raise UserError(f"exact values unavailable: {exc}") from exc
    rng = RngStream(seed, stream_id=0x91A7)
    if cfg.planner == "mcts":
        tree = search(root, prior_fn, value_fn, env, cfg.puct, rng)
        pol = root_policy(tree, cfg.puct)
        base = PolicyDistribution.categorical(tree.prior[0] / tree.prior[0].sum())
        return {"planner": "mcts", "state": list(root.data), "improved": pol, "prior": base,
                "visits": tree.child_visits(0).tolist()}
    res = plan(root, prior_fn, value_fn, env, cfg.smc, rng)
    return {"planner": "smx", "state": list(root.data), "improved": res.policy, "prior": res.prior,
            "ess": res.ess, "resamples": res.resample_count, "action": res.action}


def _print_plan(out: dict) -> None:
    print(f"state      {out['state']}")
    imp, pri = out["improved"], out["prior"]
    if imp.kind == "categorical":
        print(f"prior      {_fmt_probs(pri.probs)}")
        print(f"improved   {_fmt_probs(imp.probs)}")
    else:
        print(f"prior      mean {_fmt_probs(pri.mean)} std {_fmt_probs(pri.stddev)}")
        for atom, mass in zip(imp.atoms, imp.masses):
            print(f"improved   {_fmt_probs(np.atleast_1d(atom))} mass {mass:.4f}")
    if out["planner"] == "smx":
        print(f"ess        {_fmt_probs(out['ess'])}")
        print(f"resamples  {out['resamples']}")
    else:
        print(f"visits     {out['visits']}")


# -- entry point ----------------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smx", description="SMC planning with expert iteration on toy envs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every iteration")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="config file path or preset name")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--workers", type=int, help="worker threads for batched planning")
        p.add_argument("--planner", choices=PLANNERS, help="override the planner")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", help="run expert iteration")
    common(p, config_required=True)
    p.add_argument("--iterations", type=int, help="override the iteration count")
    p.add_argument("--export-plot", action="store_true", help="write plot tables next to the metrics")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("prior", "search", "both"), default="both")
    p.add_argument("--episodes", type=int, default=64)

    p = sub.add_parser("bench", help="per-decision latency over planner budgets")
    common(p, config_required=False)
    p.add_argument("--checkpoint")
    p.add_argument("--particles", type=_int_list, default=SMX_PARTICLE_GRID)
    p.add_argument("--horizons", type=_int_list, default=[4])
    p.add_argument("--simulations", type=_int_list, default=MCTS_BUDGET_GRID)
    p.add_argument("--decisions", type=int, default=16, help="timed decisions per grid point")
    p.add_argument("--episodes", type=int, default=0, help="search episodes per grid point for solve rate")
    p.add_argument("--export-plot", action="store_true")

    p = sub.add_parser("plan", help="run one search from a given state and print the result")
    common(p, config_required=False)
    p.add_argument("--checkpoint")
    p.add_argument("--state", required=True, help="packed state literal, e.g. '2' for chain")
    p.add_argument("--prior", choices=("net", "uniform"), default="net")
    p.add_argument("--value", choices=("net", "zero", "exact"), default="net")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _dispatch(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def _dispatch(args) -> int:
    if args.command == "train":
        cfg = _config_for(args)
        out = Path(args.out or f"runs/{cfg.env['id']}_{cfg.planner}_seed{cfg.seed}")
        return run_train(cfg, out, args.export_plot)

    if args.command == "eval":
        cfg = _config_for(args)
        env = make_env(cfg.env)
        net, _ = _load_net_for(env, args.checkpoint, cfg)
        if args.episodes < 0:
            raise UserError("episodes must be nonnegative")
        modes = ["prior", "search"] if args.mode == "both" else [args.mode]
        if cfg.planner == "none" and args.mode == "both":
            modes = ["prior"]
        summary = run_eval(cfg, net, modes, args.episodes, cfg.seed)
        _print_eval(summary)
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            (Path(args.out) / "eval.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
        return EXIT_OK

    if args.command == "bench":
        cfg = _config_for(args) if (args.config or args.checkpoint) else _apply_overrides(RunConfig(), args)
        env = make_env(cfg.env)
        net, _ = _load_net_for(env, args.checkpoint, cfg)
        if args.decisions < 1 or args.episodes < 0:
            raise UserError("decisions must be >= 1 and episodes >= 0")
        rows = run_bench(cfg, net, args.particles, args.horizons, args.simulations, args.decisions,
                         args.episodes, cfg.seed)
        _print_table(rows)
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            with open(out / "bench.jsonl", "w") as fh:
                fh.writelines(_json_line(r) + "\n" for r in rows)
            if args.export_plot:
                _write_table(out / "plot_wallclock.tsv",
                             ["planner", "budget", "latency_ms", "latency_mean_ms", "solve_rate"],
                             [[r["planner"], r["budget"], r["latency_ms"], r["latency_mean_ms"],
                               r.get("solve_rate", "")] for r in rows])
        return EXIT_OK

    if args.command == "plan":
        cfg = _config_for(args) if (args.config or args.checkpoint) else _apply_overrides(RunConfig(), args)
        env = make_env(cfg.env)
        net, _ = _load_net_for(env, args.checkpoint, cfg)
        _print_plan(run_plan(cfg, net, args.state, args.prior, args.value, cfg.seed))
        return EXIT_OK
    raise UserError(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
