"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``.  The training
criteria (3, 4, 5) dominate the runtime; set SMX_ACCEPTANCE_FULL=1 to also
run the gridpush leg of criterion 4 when the other two envs already decide it.
"""

import json
import os
import time
from dataclasses import replace

import numpy as np
import pytest
import yaml

from smx.cli import load_config, main, time_decisions
from smx.core import RngStream
from smx.envs import Chain, GridPush, make_env
from smx.exit import (
    build_net,
    evaluate,
    exit_loop,
    gae_targets,
    make_planner,
    policy_loss_continuous,
    policy_loss_discrete,
    value_loss,
)
from smx.mcts import PuctConfig
from smx.nets import Net, ValueBins, symexp, symlog, two_hot_decode, two_hot_encode
from smx.oracle import exact_posterior_marginal, exact_state_values, tv_distance
from smx.smc import SmcConfig, plan, resampling_probs

FULL = os.environ.get("SMX_ACCEPTANCE_FULL") == "1"
RESULTS: dict[int, tuple[bool, str]] = {}
_out = {"write": print}


def emit(text: str) -> None:
    for line in text.splitlines():
        _out["write"](line)


def verdict(k: int, ok: bool, detail: str) -> None:
    RESULTS[k] = (ok, detail)
    emit(f"\ncriterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="module", autouse=True)
def summary(pytestconfig):
    reporter = pytestconfig.pluginmanager.get_plugin("terminalreporter")
    if reporter is not None:
        _out["write"] = reporter.write_line
    yield
    lines = ["", "acceptance summary"]
    for k in range(1, 10):
        ok, detail = RESULTS.get(k, (False, "not run or errored before a verdict"))
        lines.append(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    emit("\n".join(lines))


def uniform(env):
    return lambda batch: np.full((len(batch), env.num_actions), 1.0 / env.num_actions)


def r_squared(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    return float(1.0 - resid @ resid / ((y - y.mean()) @ (y - y.mean())))


# -- 1: oracle consistency ------------------------------------------------------------

def test_c1_oracle_consistency():
    t0 = time.process_time()
    env = Chain(5)
    values = exact_state_values(env, gamma=1.0)
    root, h = env.reset(), env.horizon
    target = exact_posterior_marginal(env, root, h, uniform(env), values)
    tv = []
    for n in (100, 1000, 10000):
        cfg = SmcConfig(num_particles=n, horizon=h, resample_period=2, resampling_mode="exact", dirichlet_weight=0.0)
        tv.append(np.mean([tv_distance(plan(root, uniform(env), values, env, cfg, RngStream(s)).policy.probs, target)
                           for s in range(20)]))
    cpu = time.process_time() - t0
    ok = tv[2] < 0.02 and tv[0] > tv[1] > tv[2] and cpu < 60
    verdict(1, ok, f"mean TV over 20 seeds N=1e2/1e3/1e4: {tv[0]:.4f}/{tv[1]:.4f}/{tv[2]:.4f} "
                   f"(need <0.02, decreasing); {cpu:.1f}s")
    assert ok


# -- 2: policy improvement --------------------------------------------------------------

def test_c2_policy_improvement():
    t0 = time.process_time()
    env, gamma = Chain(7), 0.99
    states = env.all_states()
    inner = [s for s in states if 0 < s[0] < env.length - 1]
    start = env.reset().data
    master = RngStream(123)
    single = averaged = 0
    margins = []
    for _ in range(100):
        trial = master.split()
        table = dict(zip(states, trial.generator.dirichlet([1.0, 1.0], size=len(states))))
        prior = lambda b, t=table: np.array([t[tuple(r)] for r in b.data.tolist()])
        v_prior = exact_state_values(env, gamma, policy=prior)
        base = v_prior[start]
        first, mean = {}, {}
        for s in inner:
            runs = [plan(env.parse_state(str(s[0])), prior, v_prior, env, SmcConfig(), trial.split()).policy.probs
                    for _ in range(32)]
            first[s], mean[s] = runs[0], np.mean(runs, axis=0)
        for improved, name in ((first, "single"), (mean, "mean")):
            pol = lambda b, t=improved: np.array([t.get(tuple(r), np.full(2, 0.5)) for r in b.data.tolist()])
            gain = exact_state_values(env, gamma, policy=pol)[start] - base
            if name == "single":
                single += gain >= -1e-12
            else:
                averaged += gain >= -1e-12
                margins.append(gain)
    cpu = time.process_time() - t0
    ok = single >= 95 and cpu < 120
    verdict(2, ok, f"improved >= prior in {single}/100 trials with one N=16 draw per state "
                   f"({averaged}/100 for the 32-draw mean, min gain {min(margins):.4f}); {cpu:.1f}s")
    assert ok


# -- 3: desk-scale ExIt learning ---------------------------------------------------------

def train_and_score(name: str, episodes: int = 256):
    cfg = load_config(f"{name}_smx")
    env = make_env(cfg.env)
    t0 = time.process_time()
    res = exit_loop(env, cfg.smc, cfg.train, cfg.iterations, RngStream(cfg.seed))
    planner = make_planner("smx", cfg.smc, env)
    search = evaluate(env, res.net, "search", episodes, RngStream(cfg.seed, 0xACC3), planner)["solve_rate"]
    prior = evaluate(env, res.net, "prior", episodes, RngStream(cfg.seed, 0xACC3))["solve_rate"]
    return search, prior, time.process_time() - t0, res.metrics[-1]["env_steps"]


def test_c3_desk_scale_exit():
    parts, ok = [], True
    for name, thr in (("gridpush", 0.90), ("permpuzzle", 0.95)):
        search, prior, cpu, steps = train_and_score(name)
        good = search >= thr and prior >= 0.8 * search and cpu < 600
        ok &= good
        parts.append(f"{name}: search {search:.3f} (need {thr}), prior {prior:.3f} (need {0.8 * search:.3f}), "
                     f"{steps} env steps, {cpu:.0f}s cpu")
    verdict(3, ok, "; ".join(parts))
    assert ok


# -- 4: SMX vs MCTS sample efficiency -----------------------------------------------------

# env, threshold, SMX iteration cap, eval interval, eval episodes
C4_ENVS = [("chain", 0.95, 20, 1, 64), ("permpuzzle", 0.95, 100, 2, 128), ("gridpush", 0.90, 200, 5, 64)]


def steps_to_threshold(name, planner, seed, cap, thr, interval, episodes):
    """Env steps until a periodic search evaluation first reaches ``thr``; None if never within ``cap``."""
    cfg = load_config(f"{name}_smx")
    env = make_env(cfg.env)
    config = cfg.smc if planner == "smx" else cfg.puct

    def reached(ms):
        rate = ms[-1].get("eval_search_solve_rate")
        return rate is not None and rate >= thr

    res = exit_loop(env, config, cfg.train, cap, RngStream(seed), eval_interval=interval,
                    eval_episodes=episodes, stop_when=reached)
    last = res.metrics[-1]
    return (last["env_steps"] if reached(res.metrics) else None), last["iteration"]


def compare_on(name, thr, cap, interval, episodes):
    smx_steps, mcts_steps = [], []
    for seed in range(3):
        steps, iters = steps_to_threshold(name, "smx", seed, cap, thr, interval, episodes)
        if steps is None:
            return False, f"{name}: SMX missed {thr} within {cap} iterations (seed {seed})"
        smx_steps.append(steps)
        # MCTS only needs to run as long as SMX did; missing counts as tying SMX
        m_steps, _ = steps_to_threshold(name, "mcts", seed, iters, thr, interval, episodes)
        mcts_steps.append(m_steps)
    capped = [m if m is not None else s for m, s in zip(mcts_steps, smx_steps)]
    ok = np.mean(smx_steps) <= np.mean(capped)
    shown = [str(m) if m is not None else f">{s}" for m, s in zip(mcts_steps, smx_steps)]
    return ok, f"{name}: SMX {smx_steps} vs MCTS [{', '.join(shown)}]"


def test_c4_smx_vs_mcts():
    wins, parts = 0, []
    for i, (name, thr, cap, interval, episodes) in enumerate(C4_ENVS):
        if i == 2 and wins >= 2 and not FULL:
            parts.append(f"{name}: not run (decided by the first two envs; SMX_ACCEPTANCE_FULL=1 runs it)")
            break
        ok, text = compare_on(name, thr, cap, interval, episodes)
        wins += ok
        parts.append(text)
    ok = wins >= 2
    verdict(4, ok, f"{wins} env(s) with SMX no slower; " + "; ".join(parts))
    assert ok


# -- 5: scaling with particles and depth ----------------------------------------------------

C5_ITERATIONS = 20
C5_EPISODES = 256


def scaled_run(num_particles, horizon, seed):
    cfg = load_config("permpuzzle_smx")
    env = make_env(cfg.env)
    smc = replace(cfg.smc, num_particles=num_particles, horizon=horizon,
                  resample_period=min(cfg.smc.resample_period, horizon))
    res = exit_loop(env, smc, cfg.train, C5_ITERATIONS, RngStream(seed))
    rng = RngStream(seed, 0xACC5)
    search = evaluate(env, res.net, "search", C5_EPISODES, rng, make_planner("smx", smc, env))["solve_rate"]
    prior = evaluate(env, res.net, "prior", C5_EPISODES, rng)["solve_rate"]
    return search, prior


def test_c5_scaling():
    runs = {(n, 4, s): scaled_run(n, 4, s) for n in (4, 16, 64) for s in range(3)}
    means = [np.mean([runs[(n, 4, s)][0] for s in range(3)]) for n in (4, 16, 64)]
    ok = means[0] <= means[1] <= means[2]
    header = "depth\\N " + " ".join(f"{n:>11}" for n in (4, 8, 16, 32, 64))
    rows = [header]
    for h in (4, 8, 16):
        cells = []
        for n in (4, 8, 16, 32, 64):
            search, prior = runs.get((n, h, 0)) or scaled_run(n, h, 0)
            cells.append(f"{search:.2f}/{prior:.2f}")
        rows.append(f"{h:>7} " + " ".join(f"{c:>11}" for c in cells))
    emit(f"\npermpuzzle search/prior solve rate after {C5_ITERATIONS} iterations (seed 0)\n" + "\n".join(rows))
    verdict(5, ok, f"h=4 mean search solve rate over 3 seeds for N=4/16/64: "
                   f"{means[0]:.3f}/{means[1]:.3f}/{means[2]:.3f} (need non-decreasing)")
    assert ok


# -- 6: wall-clock trends -------------------------------------------------------------------

def latency_table(env, net, points, roots, passes=5):
    """Fastest per-decision median (ms) for each point over interleaved passes.

    Interleaving spreads transient machine slowdowns over different points in
    different passes, so the minimum keeps a clean reading of each.
    """
    best = {key: np.inf for key in points}
    for _ in range(passes):
        for key, (kind, config) in points.items():
            ms = 1e3 * float(np.median(time_decisions(env, net, kind, config, roots, seed=0)))
            best[key] = min(best[key], ms)
    return best


def test_c6_wallclock():
    cfg = load_config("permpuzzle_smx")
    env = make_env(cfg.env)
    net = build_net(env, cfg.train, seed=0)
    gen = RngStream(6)
    roots = [env.reset(gen.split()) for _ in range(16)]
    smx = lambda n, h, p=2: ("smx", SmcConfig(num_particles=n, horizon=h, resample_period=min(p, h)))
    depths, counts, sims = [2, 4, 8, 16], [1, 2, 4, 8], [8, 16, 32, 64, 128, 256, 512]
    points = {"smx64": smx(16, 4, 4), "mcts64": ("mcts", PuctConfig(simulations=64))}
    points.update({("h", h): smx(16, h) for h in depths})
    points.update({("n", n): smx(n, 4) for n in counts})
    points.update({("s", s): ("mcts", PuctConfig(simulations=s)) for s in sims})
    latency_table(env, net, {"smx64": points["smx64"]}, roots[:2], passes=1)  # warm-up
    t = latency_table(env, net, points, roots)
    ratio = t["smx64"] / t["mcts64"]
    by_depth, by_count = [t[("h", h)] for h in depths], [t[("n", n)] for n in counts]
    by_sims = [t[("s", s)] for s in sims]
    r2_depth, r2_sims = r_squared(depths, by_depth), r_squared(sims, by_sims)
    sublinear = all(b < 2 * a for a, b in zip(by_count, by_count[1:]))
    ok = ratio <= 0.5 and r2_depth > 0.95 and sublinear and r2_sims > 0.95
    fmt = lambda xs: "/".join(f"{x:.1f}" for x in xs)
    verdict(6, ok, f"64-call budget SMX {t['smx64']:.1f}ms vs PUCT {t['mcts64']:.1f}ms (ratio {ratio:.2f}, "
                   f"need <=0.5); SMX h=2..16 {fmt(by_depth)}ms R2 {r2_depth:.3f}; N=1..8 {fmt(by_count)}ms; "
                   f"PUCT sims 8..512 {fmt(by_sims)}ms R2 {r2_sims:.3f}")
    assert ok


# -- 7: normalisation invariants ------------------------------------------------------------

class _RandomValue:
    def __init__(self, env, scale=1.0):
        self.net = Net(env.obs_dim, (16,), num_actions=env.num_actions, seed=7)
        gen = np.random.default_rng(7)
        for k, v in self.net.params.items():
            self.net.params[k] = gen.standard_normal(v.shape) * 0.5
        self.env, self.scale = env, scale

    def __call__(self, batch):
        return self.scale * self.net.value_batch(self.env.observe_batch(batch))


def resample_traces(mode, reward_scale, roots_seed=0, n_roots=8):
    env = GridPush(reward_scale=reward_scale)
    value = _RandomValue(env, reward_scale)
    cfg = SmcConfig(resampling_mode=mode, resample_period=2)
    gen = RngStream(roots_seed)
    traces = []
    for i in range(n_roots):
        root = env.reset(gen.split())
        trace = []
        plan(root, uniform(env), value, env, cfg, RngStream(70, i), trace)
        traces.append(trace)
    return traces


def test_c7_normalisation_invariance():
    gen = np.random.default_rng(7)
    cfg = SmcConfig()
    worst = 0.0
    for _ in range(2000):
        ell = gen.uniform(-1e3, 1e3, gen.integers(2, 33))
        a, b = np.exp(gen.uniform(np.log(1e-3), np.log(1e3))), gen.uniform(-1e3, 1e3)
        worst = max(worst, float(np.abs(resampling_probs(a * ell + b, cfg) - resampling_probs(ell, cfg)).max()))
    unit_ok = worst <= 1e-9

    def same(x, y):
        return all(np.allclose(p["probs"], q["probs"], atol=1e-9) and np.array_equal(p["indices"], q["indices"])
                   for tx, ty in zip(x, y) for p, q in zip(tx, ty))

    minmax_same = same(resample_traces("minmax_softmax", 1.0), resample_traces("minmax_softmax", 100.0))
    exact_same = same(resample_traces("exact", 1.0), resample_traces("exact", 100.0))
    ok = unit_ok and minmax_same and not exact_same
    verdict(7, ok, f"(a) max affine deviation {worst:.2e} over 2000 draws (need <=1e-9); (b) gridpush x100: "
                   f"minmax decisions {'identical' if minmax_same else 'CHANGED'}, "
                   f"exact decisions {'identical' if exact_same else 'changed'}")
    assert ok


# -- 8: numerical verification ---------------------------------------------------------------

FD_STEP, REL_TOL = 1e-5, 1e-4


def worst_gradient_error(net, loss_fn, names=None, coords=6, seed=0) -> float:
    _, grads = loss_fn()
    gen = np.random.default_rng(seed)
    worst = 0.0
    for name in names or grads:
        flat = net.params[name].reshape(-1)
        for i in gen.choice(flat.size, size=min(coords, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + FD_STEP
            up, _ = loss_fn()
            flat[i] = old - FD_STEP
            down, _ = loss_fn()
            flat[i] = old
            numeric = (up - down) / (2 * FD_STEP)
            analytic = np.asarray(grads[name]).reshape(-1)[i]
            worst = max(worst, abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-6))
    return worst


def randomised(net, seed, scale=0.5):
    gen = np.random.default_rng(seed)
    for k, v in net.params.items():
        net.params[k] = gen.standard_normal(v.shape) * scale
    return net


def gradient_suite() -> float:
    worst = 0.0
    for s in range(10):
        gen = np.random.default_rng(1000 + s)
        net = randomised(Net(5, (8, 6), num_actions=4, policy_temp=0.7, obs_norm=s % 2 == 1, seed=s), s)
        if net.obs_norm:
            net.update_obs_stats(gen.normal(1.0, 2.0, (40, 5)))
        obs = gen.standard_normal((7, 5))
        targets = gen.dirichlet(np.ones(4), size=7)
        worst = max(worst, worst_gradient_error(net, lambda: policy_loss_discrete(targets, net, obs), seed=s))
        atoms, masses = gen.integers(4, size=(7, 3)), gen.dirichlet(np.ones(3), size=7)
        worst = max(worst, worst_gradient_error(net, lambda: policy_loss_continuous(atoms, masses, net, obs), seed=s))
        values = gen.uniform(-40, 40, 7)
        heads = [k for k in net.params if k.startswith("v/")]
        worst = max(worst, worst_gradient_error(net, lambda: value_loss(values, net, obs), names=heads, seed=s))
        gnet = randomised(Net(4, (8,), action_dim=2, seed=s), s, scale=0.3)
        gobs = gen.standard_normal((6, 4))
        gatoms, gmasses = gen.uniform(-1, 1, (6, 3, 2)), gen.dirichlet(np.ones(3), size=6)
        worst = max(worst, worst_gradient_error(gnet, lambda: policy_loss_continuous(gatoms, gmasses, gnet, gobs),
                                                seed=s))
    return worst


def two_hot_worst_ratio() -> float:
    bins = ValueBins(64)
    v = np.concatenate([np.linspace(-500, 500, 4001), symexp(np.linspace(-bins.bound, bins.bound, 4001))])
    decoded = two_hot_decode(two_hot_encode(v, bins), bins)
    y = symlog(v)
    width = (symexp(y + bins.width) - symexp(y - bins.width)) / 2
    return float(np.max(np.abs(decoded - v) / width))


def gae_worst() -> float:
    gen = np.random.default_rng(8)
    worst = 0.0
    for _ in range(50):
        T = int(gen.integers(1, 30))
        r, v = gen.standard_normal(T), gen.standard_normal(T + 1)
        d = gen.random(T) < 0.2
        g = float(gen.uniform(0.5, 1.0))
        td = r + g * np.where(d, 0.0, v[1:])
        worst = max(worst, float(np.abs(gae_targets(r, v, d, gamma=g, lam=0.0) - td).max()))
        mc = np.zeros(T)
        acc = v[T]
        for t in reversed(range(T)):
            acc = r[t] + g * (0.0 if d[t] else acc)
            mc[t] = acc
        worst = max(worst, float(np.abs(gae_targets(r, v, d, gamma=g, lam=1.0) - mc).max()))
    return worst


def discretised_equivalence() -> float:
    gen = np.random.default_rng(9)
    worst = 0.0
    for s in range(5):
        net = randomised(Net(4, (8,), num_actions=5, seed=s), s)
        obs = gen.standard_normal((6, 4))
        atoms = gen.integers(5, size=(6, 16))
        masses = np.full((6, 16), 1 / 16)
        dense = np.stack([np.bincount(a, weights=m, minlength=5) for a, m in zip(atoms, masses)])
        _, g_disc = policy_loss_discrete(dense, net, obs)
        _, g_cont = policy_loss_continuous(atoms, masses, net, obs)
        worst = max(worst, max(float(np.abs(g_cont[k] - g_disc[k]).max()) for k in g_disc))
    return worst


def test_c8_numerical_suite():
    grad, hot, gae, equiv = gradient_suite(), two_hot_worst_ratio(), gae_worst(), discretised_equivalence()
    ok = grad < REL_TOL and hot <= 1.0 and gae <= 1e-9 and equiv <= 1e-6
    verdict(8, ok, f"worst gradient rel error {grad:.1e} (need <1e-4); two-hot error {hot:.2e} bin widths; "
                   f"GAE lambda 0/1 error {gae:.1e}; continuous vs discrete gradient gap {equiv:.1e}")
    assert ok


# -- 9: determinism --------------------------------------------------------------------------

DET_TRAIN = {"hidden": [16], "num_envs": 4, "rollout_steps": 8, "buffer_size": 64, "batch_size": 32,
             "minibatch": 16, "lr": 0.003}
DET_RUNS = [
    {"env": {"id": "chain", "length": 7}, "planner": "smx"},
    {"env": {"id": "permpuzzle"}, "planner": "mcts", "puct": {"simulations": 8}},
    {"env": {"id": "gridpush"}, "planner": "smx"},
    {"env": {"id": "pointmass", "horizon": 10}, "planner": "smx"},
]


def test_c9_determinism(tmp_path):
    same = []
    for i, run in enumerate(DET_RUNS):
        path = tmp_path / f"run{i}.yaml"
        path.write_text(yaml.safe_dump({**run, "train": DET_TRAIN, "iterations": 3, "eval_interval": 1,
                                        "eval_episodes": 4, "seed": 11}))
        outs = [tmp_path / f"out{i}_{k}" for k in range(2)]
        for out in outs:
            assert main(["train", "--config", str(path), "--out", str(out)]) == 0
            assert main(["eval", "--checkpoint", str(out / "ckpt_final.smx"), "--episodes", "4",
                         "--out", str(out / "eval")]) == 0
        a, b = outs
        same.append((a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
                    and (a / "eval/eval.json").read_bytes() == (b / "eval/eval.json").read_bytes()
                    and (a / "ckpt_final.smx").read_bytes() == (b / "ckpt_final.smx").read_bytes())
        assert json.loads((a / "metrics.jsonl").read_text().splitlines()[0])["iteration"] == 1
    ok = all(same)
    names = [f"{r['env']['id']}/{r['planner']}" for r in DET_RUNS]
    verdict(9, ok, "byte-identical metrics, eval and checkpoint on rerun: "
                   + ", ".join(f"{n} {'yes' if s else 'NO'}" for n, s in zip(names, same)))
    assert ok
