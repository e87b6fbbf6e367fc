"""Compare the SMC planner's improved policy with the exact posterior on a small chain.

The exact target enumerates every trajectory from the root; the planner
estimate should close in on it as the particle count grows.

    python3 demos/chain_oracle.py
"""

import numpy as np

from smx.core import RngStream
from smx.envs import Chain
from smx.oracle import exact_posterior_marginal, exact_state_values, tv_distance
from smx.smc import SmcConfig, plan


def main():
    env = Chain(5)
    values = exact_state_values(env, gamma=1.0)
    uniform = lambda b: np.full((len(b), 2), 0.5)
    root, h = env.reset(), env.horizon
    target = exact_posterior_marginal(env, root, h, uniform, values)
    print(f"exact first-action marginal from state {root.data[0]}: {np.round(target, 4).tolist()}")
    for n in (10, 100, 1000, 10000):
        cfg = SmcConfig(num_particles=n, horizon=h, resample_period=2, resampling_mode="exact", dirichlet_weight=0.0)
        tv = [tv_distance(plan(root, uniform, values, env, cfg, RngStream(s)).policy.probs, target) for s in range(20)]
        print(f"N={n:>6}  mean TV {np.mean(tv):.4f}  (20 seeds)")


if __name__ == "__main__":
    main()
