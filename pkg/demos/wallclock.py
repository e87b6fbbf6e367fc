"""Per-decision latency of SMX and PUCT as the search budget grows.

SMX evaluates all particles of one depth in a single batched call, so its
latency tracks depth rather than particle count; PUCT pays per simulation.

    python3 demos/wallclock.py [checkpoint.smx]
"""

import sys

import numpy as np

from smx.cli import load_config, time_decisions
from smx.core import RngStream
from smx.envs import make_env
from smx.exit import build_net
from smx.mcts import PuctConfig
from smx.nets import load_checkpoint
from smx.smc import SmcConfig


def main(argv):
    cfg = load_config("permpuzzle_smx")
    env = make_env(cfg.env)
    net = load_checkpoint(argv[0])[0] if argv else build_net(env, cfg.train, seed=0)
    gen = RngStream(1)
    roots = [env.reset(gen.split()) for _ in range(16)]
    ms = lambda kind, c: 1e3 * float(np.median(time_decisions(env, net, kind, c, roots, seed=0)))
    print("SMX latency (ms), rows depth, columns particles")
    counts = [4, 8, 16, 32, 64, 128, 256, 512]
    print("depth " + " ".join(f"{n:>7}" for n in counts))
    for h in (2, 4, 8, 16):
        cells = [ms("smx", SmcConfig(num_particles=n, horizon=h, resample_period=2)) for n in counts]
        print(f"{h:>5} " + " ".join(f"{c:>7.1f}" for c in cells))
    print("PUCT latency (ms) by simulations")
    for s in (4, 8, 16, 32, 64, 128, 256, 512, 1024):
        print(f"{s:>5} {ms('mcts', PuctConfig(simulations=s)):>8.1f}")


if __name__ == "__main__":
    main(sys.argv[1:])
