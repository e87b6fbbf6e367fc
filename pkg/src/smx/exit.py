"""Expert Iteration: search-guided data collection and distillation into the network."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .core import InvalidArgument, PolicyDistribution, RngStream, sample_categorical
from .envs import Env, EnvState
from .mcts import PuctConfig, root_policy, search_batch
from .nets import STD_FLOOR, AdamState, Net, TrainingError, adam_update, two_hot_encode
from .smc import PlannerError, SearchResult, SmcConfig, net_closures, plan_batch

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 3e-4
    gamma: float = 0.99
    lam: float = 0.95
    buffer_size: int = 2048
    batch_size: int = 2048
    minibatch: int = 1024
    epochs: int = 1
    num_envs: int = 64
    rollout_steps: int = 32
    hidden: tuple = (256, 256)
    value_bins: int = 64
    value_max: float = 500.0
    obs_norm: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 1 <= self.minibatch <= self.batch_size <= self.buffer_size:
            raise InvalidArgument("need 1 <= minibatch <= batch_size <= buffer_size")
        if self.num_envs < 1 or self.rollout_steps < 1 or self.epochs < 1:
            raise InvalidArgument("num_envs, rollout_steps and epochs must be >= 1")
        if not 0 <= self.gamma <= 1 or not 0 <= self.lam <= 1:
            raise InvalidArgument("gamma and lam must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class ReplayEntry:
    observation: np.ndarray
    target: PolicyDistribution
    value_target: float


class ReplayBuffer:
    """FIFO buffer; the oldest entries are evicted first."""

    def __init__(self, capacity: int):
        self.capacity = int(capacity)
        self._items: deque[ReplayEntry] = deque(maxlen=self.capacity)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i) -> ReplayEntry:
        return self._items[i]

    def extend(self, entries) -> None:
        self._items.extend(entries)

    def sample(self, n: int, gen: np.random.Generator) -> list[ReplayEntry]:
        n = min(n, len(self._items))
        idx = gen.choice(len(self._items), size=n, replace=False)
        return [self._items[i] for i in idx]


# -- value targets -------------------------------------------------------------

def gae_targets(rewards, values, dones, truncated=None, gamma: float = 0.99, lam: float = 0.95,
                next_values=None) -> np.ndarray:
    """Generalised advantage estimates plus values, i.e. the value targets.

    ``values`` has ``m + 1`` entries (bootstrap last).  ``dones`` marks true
    terminations (no bootstrap).  ``truncated`` marks time-limit cuts: the
    step still bootstraps from ``next_values[t]`` (the value of the cut-off
    state) but advantages stop propagating across the boundary.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=bool)
    m = len(r)
    if len(v) != m + 1 or len(d) != m:
        raise InvalidArgument(f"length mismatch: rewards {m}, values {len(v)}, dones {len(d)}")
    tr = np.zeros(m, dtype=bool) if truncated is None else np.asarray(truncated, dtype=bool)
    if len(tr) != m:
        raise InvalidArgument("truncated flags must match rewards")
    nv = v[1:].copy()
    if next_values is not None:
        nv = np.where(tr, np.asarray(next_values, dtype=np.float64), nv)
    adv = np.zeros(m)
    running = 0.0
    for t in range(m - 1, -1, -1):
        delta = r[t] + gamma * (0.0 if d[t] else nv[t]) - v[t]
        carry = 0.0 if (d[t] or tr[t]) else gamma * lam * running
        running = delta + carry
        adv[t] = running
    return adv + v[:-1]


# -- losses ------------------------------------------------------------------------

def policy_loss_discrete(targets, net: Net, obs) -> tuple[float, dict]:
    """Mean forward KL(target || policy) over the batch and its parameter gradient."""
    t = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    logits, acts = net.policy_out(obs)
    logp = net.policy_log_probs(logits)
    B = len(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(t > 0, t * np.log(t), 0.0)
    loss = float((ent - t * logp).sum() / B)
    dz = (np.exp(logp) - t) / (net.policy_temp * B)
    return loss, net.policy_backward(acts, dz)


def policy_loss_continuous(atoms, masses, net: Net, obs) -> tuple[float, dict]:
    """Mass-weighted negative log-likelihood of sampled action atoms.

    ``atoms`` is ``[B, K, d]`` for a Gaussian head or ``[B, K]`` action
    indices for a categorical head; ``masses`` is ``[B, K]`` (zero-padded).
    """
    w = np.atleast_2d(np.asarray(masses, dtype=np.float64))
    B = len(w)
    out, acts = net.policy_out(obs)
    if net.kind == "categorical":
        a = np.asarray(atoms, dtype=np.int64).reshape(B, -1)
        logp = net.policy_log_probs(out)
        picked = np.take_along_axis(logp, a, axis=1)
        loss = float(-(w * picked).sum() / B)
        probs = np.exp(logp)
        dz = np.zeros_like(out)
        for k in range(a.shape[1]):
            onehot = np.zeros_like(out)
            np.put_along_axis(onehot, a[:, k:k + 1], 1.0, axis=1)
            dz += w[:, k:k + 1] * (probs - onehot)
        return loss, net.policy_backward(acts, dz / (net.policy_temp * B))

    a = np.asarray(atoms, dtype=np.float64).reshape(B, w.shape[1], -1)
    log_std = net.params["pi/log_std"]
    std = net.policy_std()
    z = (a - out[:, None, :]) / std
    logpdf = -0.5 * (z ** 2).sum(-1) - np.log(std).sum() - 0.5 * a.shape[-1] * np.log(2 * np.pi)
    loss = float(-(w * logpdf).sum() / B)
    dmean = -(w[..., None] * z / std).sum(axis=1) / B
    active = np.exp(log_std) >= STD_FLOOR  # the floor blocks the gradient
    dlog_std = -(w[..., None] * (z ** 2 - 1.0)).sum(axis=(0, 1)) / B * active
    grads = net.policy_backward(acts, dmean)
    grads["pi/log_std"] = dlog_std
    return loss, grads


def value_loss(value_targets, net: Net, obs) -> tuple[float, dict]:
    """Cross-entropy between two-hot encoded symlog targets and the value head."""
    target = two_hot_encode(np.atleast_1d(np.asarray(value_targets, dtype=np.float64)), net.bins)
    logits, acts = net.value_out(obs)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    B = len(target)
    loss = float(-(target * logp).sum() / B)
    return loss, net.value_backward(acts, (np.exp(logp) - target) / B)


# -- planners ----------------------------------------------------------------------

Planner = Callable[[list, Net, list], list]


def make_planner(kind: str, config, env: Env, workers: int = 1) -> Planner:
    """Uniform planner interface: ``planner(roots, net, rngs) -> [SearchResult]``."""
    if kind == "smx":
        def run(roots, net, rngs):
            prior_fn, value_fn = net_closures(net, env)
            return plan_batch(roots, prior_fn, value_fn, env, config, rngs, workers=workers)
    elif kind == "mcts":
        def run(roots, net, rngs):
            prior_fn, value_fn = net_closures(net, env)
            out = []
            for tree, rng in zip(search_batch(roots, prior_fn, value_fn, env, config, rngs), rngs):
                pol = root_policy(tree, config)
                out.append(SearchResult(pol, sample_categorical(pol.probs, rng), [], 0,
                                        PolicyDistribution.categorical(tree.prior[0])))
            return out
    elif kind == "none":
        def run(roots, net, rngs):
            obs = env.observe_batch(env.batch(roots))
            out = []
            if net.kind == "categorical":
                probs = net.policy_probs(obs)
                for p, rng in zip(probs, rngs):
                    pol = PolicyDistribution.categorical(p / p.sum())
                    out.append(SearchResult(pol, pol.sample(rng), [], 0, pol))
            else:
                mean, std = net.policy_gaussian(obs)
                for mu, sd, rng in zip(mean, std, rngs):
                    a = np.clip(mu + sd * rng.generator.standard_normal(mu.shape), -1, 1)
                    pol = PolicyDistribution.empirical(a[None], [1.0])
                    out.append(SearchResult(pol, a, [], 0, PolicyDistribution.gaussian(mu, sd)))
            return out
    else:
        raise InvalidArgument(f"unknown planner {kind!r}")
    run.kind = kind
    run.config = config
    return run


def planner_from_config(config, env: Env, workers: int = 1) -> Planner:
    if isinstance(config, SmcConfig):
        return make_planner("smx", config, env, workers)
    if isinstance(config, PuctConfig):
        return make_planner("mcts", config, env, workers)
    if config is None:
        return make_planner("none", None, env, workers)
    raise InvalidArgument(f"unsupported planner config {type(config).__name__}")


# -- collection ------------------------------------------------------------------

@dataclass
class EnvSlot:
    """One outer-process environment with its own RNG streams."""

    state: EnvState
    rng: RngStream
    episode_return: float = 0.0


@dataclass
class Rollout:
    entries: list
    episode_returns: list
    episode_solved: list
    env_steps: int


def _target_of(result: SearchResult, env: Env) -> PolicyDistribution:
    if env.discrete:
        return PolicyDistribution.categorical(result.policy.as_categorical(env.num_actions))
    return result.policy


def collect_rollout(env: Env, slots: list[EnvSlot], planner: Planner, net: Net, steps: int,
                    config: TrainConfig) -> Rollout:
    """Run ``steps`` outer steps in every slot, then attach GAE value targets."""
    E = len(slots)
    obs = np.zeros((steps, E, env.obs_dim))
    targets: list[list] = [[None] * E for _ in range(steps)]
    rewards = np.zeros((steps, E))
    dones = np.zeros((steps, E), dtype=bool)
    truncs = np.zeros((steps, E), dtype=bool)
    cut_obs: dict[tuple[int, int], np.ndarray] = {}
    ep_returns, ep_solved = [], []
    for t in range(steps):
        roots = [s.state for s in slots]
        obs[t] = env.observe_batch(env.batch(roots))
        rngs = [s.rng.split() for s in slots]
        try:
            results = planner(roots, net, rngs)
        except Exception as exc:
            raise type(exc)(f"{exc} (during collection at outer step {t})") from exc
        for e, (slot, res) in enumerate(zip(slots, results)):
            targets[t][e] = _target_of(res, env)
            step = env.step(slot.state, res.action)
            rewards[t, e] = step.reward
            slot.episode_return += step.reward
            nxt = step.next_state
            if nxt.done:
                dones[t, e] = nxt.terminal
                truncs[t, e] = nxt.truncated
                if nxt.truncated:
                    cut_obs[(t, e)] = env.observe(nxt)
                ep_returns.append(slot.episode_return)
                ep_solved.append(env.solved(nxt))
                slot.episode_return = 0.0
                nxt = env.reset(slot.rng.split())
            slot.state = nxt

    last_obs = env.observe_batch(env.batch([s.state for s in slots]))
    values = net.value_batch(np.concatenate([obs.reshape(-1, env.obs_dim), last_obs])).reshape(steps + 1, E)
    next_values = np.zeros((steps, E))
    if cut_obs:
        keys = sorted(cut_obs)
        vals = net.value_batch(np.stack([cut_obs[k] for k in keys]))
        for k, v in zip(keys, vals):
            next_values[k] = v
    entries = []
    vt = np.zeros((steps, E))
    for e in range(E):
        vt[:, e] = gae_targets(rewards[:, e], values[:, e], dones[:, e], truncs[:, e],
                               config.gamma, config.lam, next_values[:, e])
    for t in range(steps):
        for e in range(E):
            entries.append(ReplayEntry(obs[t, e], targets[t][e], float(vt[t, e])))
    return Rollout(entries, ep_returns, ep_solved, steps * E)


# -- learning ---------------------------------------------------------------------

def _stack_targets(batch: list[ReplayEntry], net: Net):
    if net.kind == "categorical":
        return np.stack([b.target.probs for b in batch]), None
    K = max(len(b.target.masses) for b in batch)
    d = net.out_dim
    atoms = np.zeros((len(batch), K, d))
    masses = np.zeros((len(batch), K))
    for i, b in enumerate(batch):
        k = len(b.target.masses)
        atoms[i, :k] = np.asarray(b.target.atoms, dtype=np.float64).reshape(k, d)
        masses[i, :k] = b.target.masses
    return atoms, masses


def train_on_batch(net: Net, adam: AdamState, batch: list[ReplayEntry], lr: float) -> tuple[float, float]:
    obs = np.stack([b.observation for b in batch])
    vt = np.array([b.value_target for b in batch])
    first, second = _stack_targets(batch, net)
    if net.kind == "categorical":
        p_loss, grads = policy_loss_discrete(first, net, obs)
    else:
        p_loss, grads = policy_loss_continuous(first, second, net, obs)
    v_loss, v_grads = value_loss(vt, net, obs)
    if not (np.isfinite(p_loss) and np.isfinite(v_loss)):
        raise TrainingError(f"non-finite loss: policy {p_loss}, value {v_loss}")
    grads.update(v_grads)
    net.params = adam_update(net.params, grads, adam, lr)
    return p_loss, v_loss


# -- evaluation ---------------------------------------------------------------------

def _iqm(x) -> float:
    x = np.sort(np.asarray(x, dtype=np.float64))
    if len(x) == 0:
        return float("nan")
    lo, hi = int(np.floor(0.25 * len(x))), int(np.ceil(0.75 * len(x)))
    core = x[lo:hi] if hi > lo else x
    return float(core.mean())


def evaluate(env: Env, net: Net, mode: str, episodes: int, rng: RngStream, planner: Planner | None = None,
             greedy_prior: bool = True) -> dict:
    """Run ``episodes`` episodes in lockstep with the prior or the search policy."""
    if episodes <= 0:
        return {"episodes": 0, "returns": [], "solved": [], "mean_return": None,
                "iqm_return": None, "solve_rate": None}
    if mode not in ("prior", "search"):
        raise InvalidArgument("mode must be 'prior' or 'search'")
    if mode == "search" and planner is None:
        raise InvalidArgument("search evaluation needs a planner")
    slots = [EnvSlot(None, s) for s in rng.split(episodes)]
    for s in slots:
        s.state = env.reset(s.rng.split())
    returns = np.zeros(episodes)
    solved = np.zeros(episodes, dtype=bool)
    live = list(range(episodes))
    while live:
        roots = [slots[i].state for i in live]
        if mode == "prior":
            obs = env.observe_batch(env.batch(roots))
            if net.kind == "categorical":
                probs = net.policy_probs(obs)
                if greedy_prior:
                    actions = list(np.argmax(probs, axis=1))
                else:
                    actions = [sample_categorical(p / p.sum(), slots[i].rng.split()) for p, i in zip(probs, live)]
            else:
                mean, std = net.policy_gaussian(obs)
                actions = list(np.clip(mean, -1, 1)) if greedy_prior else [
                    np.clip(m + s * slots[i].rng.split().generator.standard_normal(m.shape), -1, 1)
                    for m, s, i in zip(mean, std, live)]
        else:
            results = planner(roots, net, [slots[i].rng.split() for i in live])
            actions = [r.action for r in results]
        still = []
        for i, a in zip(live, actions):
            step = env.step(slots[i].state, a)
            returns[i] += step.reward
            slots[i].state = step.next_state
            if step.done:
                solved[i] = env.solved(step.next_state)
            else:
                still.append(i)
        live = still
    return {
        "episodes": episodes,
        "returns": returns.tolist(),
        "solved": solved.tolist(),
        "mean_return": float(returns.mean()),
        "iqm_return": _iqm(returns),
        "solve_rate": float(solved.mean()),
    }


def bootstrap_ci(x, rng: RngStream, reps: int = 1000, level: float = 0.95, stat=_iqm) -> tuple[float, float]:
    """Percentile bootstrap interval of ``stat`` over per-episode values."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        return float("nan"), float("nan")
    gen = rng.generator
    stats = [stat(x[gen.integers(len(x), size=len(x))]) for _ in range(reps)]
    a = (1 - level) / 2
    return float(np.quantile(stats, a)), float(np.quantile(stats, 1 - a))


# -- outer loop ---------------------------------------------------------------------

@dataclass
class ExitResult:
    net: Net
    checkpoints: list = field(default_factory=list)
    metrics: list = field(default_factory=list)


def build_net(env: Env, config: TrainConfig, seed: int) -> Net:
    kw = {"num_actions": env.num_actions} if env.discrete else {"action_dim": env.action_dim}
    return Net(env.obs_dim, config.hidden, value_bins=config.value_bins, value_max=config.value_max,
               obs_norm=config.obs_norm, seed=seed, **kw)


def exit_loop(env: Env, planner_config, config: TrainConfig, iterations: int, rng: RngStream,
              eval_interval: int = 0, eval_episodes: int = 0, checkpoint_interval: int = 0,
              workers: int = 1, on_metrics: Callable | None = None, meta: dict | None = None,
              net: Net | None = None, stop_when: Callable | None = None) -> ExitResult:
    """Alternate search-guided collection with distillation for ``iterations`` rounds.

    Metrics records are plain dicts free of wall-clock values, so a rerun with
    the same seed reproduces them exactly.  ``stop_when(metrics_so_far)``
    ends the loop early once it returns true.
    """
    planner = planner_from_config(planner_config, env, workers)
    streams = rng.split(4)
    init_rng, collect_rng, learn_rng, eval_rng = streams
    if net is None:
        net = build_net(env, config, int(init_rng.generator.integers(2**31)))
    adam = AdamState(net.params)
    buffer = ReplayBuffer(config.buffer_size)
    slots = [EnvSlot(None, s) for s in collect_rng.split(config.num_envs)]
    for s in slots:
        s.state = env.reset(s.rng.split())
    result = ExitResult(net)
    result.checkpoints.append((0, net.to_bytes(meta)))
    env_steps = 0
    for it in range(1, iterations + 1):
        try:
            roll = collect_rollout(env, slots, planner, net, config.rollout_steps, config)
            buffer.extend(roll.entries)
            if net.obs_norm:
                net.update_obs_stats(np.stack([e.observation for e in roll.entries]))
            env_steps += roll.env_steps
            gen = learn_rng.split().generator
            p_losses, v_losses = [], []
            for _ in range(config.epochs):
                data = buffer.sample(config.batch_size, gen)
                order = gen.permutation(len(data))
                for start in range(0, len(data), config.minibatch):
                    mb = [data[i] for i in order[start:start + config.minibatch]]
                    p, v = train_on_batch(net, adam, mb, config.lr)
                    p_losses.append(p)
                    v_losses.append(v)
        except (TrainingError, PlannerError) as exc:
            err = exc if isinstance(exc, TrainingError) else TrainingError(f"diverged: {exc}")
            err.checkpoint = result.checkpoints[-1]
            err.iteration = it
            if err is exc:
                raise
            raise err from exc
        rec = {
            "iteration": it,
            "env_steps": env_steps,
            "episodes": len(roll.episode_returns),
            "search_return": float(np.mean(roll.episode_returns)) if roll.episode_returns else None,
            "search_solve_rate": float(np.mean(roll.episode_solved)) if roll.episode_solved else None,
            "policy_loss": float(np.mean(p_losses)),
            "value_loss": float(np.mean(v_losses)),
        }
        if eval_interval and eval_episodes and (it % eval_interval == 0 or it == iterations):
            er = eval_rng.split()
            prior = evaluate(env, net, "prior", eval_episodes, er.split())
            srch = evaluate(env, net, "search", eval_episodes, er.split(), planner)
            rec.update({
                "eval_prior_return": prior["mean_return"], "eval_prior_solve_rate": prior["solve_rate"],
                "eval_search_return": srch["mean_return"], "eval_search_solve_rate": srch["solve_rate"],
            })
        result.metrics.append(rec)
        log.info("iteration %d: %s", it, rec)
        if on_metrics is not None:
            on_metrics(rec)
        if checkpoint_interval and it % checkpoint_interval == 0:
            result.checkpoints.append((it, net.to_bytes(meta)))
        if stop_when is not None and stop_when(result.metrics):
            break
    done = result.metrics[-1]["iteration"] if result.metrics else 0
    if done > 0 and result.checkpoints[-1][0] != done:
        result.checkpoints.append((done, net.to_bytes(meta)))
    return result
