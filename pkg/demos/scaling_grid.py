"""Search and prior solve rates on permpuzzle across depth and particle count.

Each cell trains SMX-ExIt from scratch for the same number of environment
steps, then evaluates both the planner and the greedy prior.

    python3 demos/scaling_grid.py [iterations] [seed]
"""

import sys
from dataclasses import replace

from smx.cli import load_config
from smx.core import RngStream
from smx.envs import make_env
from smx.exit import evaluate, exit_loop, make_planner


def cell(cfg, env, n, h, iterations, seed):
    smc = replace(cfg.smc, num_particles=n, horizon=h, resample_period=min(4, h))
    net = exit_loop(env, smc, cfg.train, iterations, RngStream(seed)).net
    rng = RngStream(seed, 0xACC5)
    search = evaluate(env, net, "search", 256, rng, make_planner("smx", smc, env))["solve_rate"]
    prior = evaluate(env, net, "prior", 256, rng)["solve_rate"]
    return search, prior


def main(argv):
    iterations = int(argv[0]) if argv else 20
    seed = int(argv[1]) if len(argv) > 1 else 0
    cfg = load_config("permpuzzle_smx")
    env = make_env(cfg.env)
    counts = (4, 8, 16, 32, 64)
    print(f"search/prior solve rate after {iterations} iterations, seed {seed}")
    print("depth " + " ".join(f"{n:>11}" for n in counts))
    for h in (4, 8, 16):
        cells = [cell(cfg, env, n, h, iterations, seed) for n in counts]
        print(f"{h:>5} " + " ".join(f"{s:>5.2f}/{p:<5.2f}" for s, p in cells), flush=True)


if __name__ == "__main__":
    main(sys.argv[1:])
