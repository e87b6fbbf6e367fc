"""Sequential Monte Carlo planning as a policy-improvement operator.

``plan_batch`` advances ``len(roots) * num_particles`` particles in
lockstep.  Each root owns an RNG stream, so a root's result does not depend
on which other roots share the batch or how the batch is split across
workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import truncnorm

from .core import (
    InvalidArgument,
    PolicyDistribution,
    as_generator,
    dirichlet,
    effective_sample_size,
    minmax_normalise,
    sample_categorical,
    sample_categorical_rows,
    sample_indices,
    softmax_temp,
)
from .envs import Env, EnvState, StateBatch

RESAMPLING_MODES = ("minmax_softmax", "exact")
FINAL_POLICY_MODES = ("uniform_diracs", "weight_tilted")


class PlannerError(RuntimeError):
    """The planner met a non-finite prior or value output."""


@dataclass
class SmcConfig:
    num_particles: int = 16
    horizon: int = 4
    resample_period: int = 4
    resample_temp: float = 0.1
    resampling_mode: str = "minmax_softmax"
    dirichlet_alpha: float = 0.03
    dirichlet_weight: float = 0.25
    root_noise_scale: float = 0.1
    policy_temp: float = 1.0
    final_policy_mode: str = "uniform_diracs"
    include_log_prior: bool = False
    search_gamma: float = 1.0

    def __post_init__(self):
        if self.num_particles < 1 or self.horizon < 1:
            raise InvalidArgument("num_particles and horizon must be >= 1")
        if not 1 <= self.resample_period <= self.horizon:
            raise InvalidArgument("resample_period must lie in [1, horizon]")
        if not self.resample_temp > 0 or not self.policy_temp > 0:
            raise InvalidArgument("temperatures must be positive")
        if self.resampling_mode not in RESAMPLING_MODES:
            raise InvalidArgument(f"resampling_mode must be one of {RESAMPLING_MODES}")
        if self.final_policy_mode not in FINAL_POLICY_MODES:
            raise InvalidArgument(f"final_policy_mode must be one of {FINAL_POLICY_MODES}")
        if not self.dirichlet_alpha > 0 or not 0 <= self.dirichlet_weight <= 1:
            raise InvalidArgument("dirichlet_alpha must be > 0 and dirichlet_weight in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ParticleSet:
    """The planner's working set for one root: O(N) memory, no tree."""

    states: StateBatch
    log_weights: np.ndarray
    initial_actions: np.ndarray
    frozen: np.ndarray

    def __len__(self) -> int:
        return len(self.log_weights)

    def take(self, idx) -> "ParticleSet":
        return ParticleSet(self.states.take(idx), np.zeros(len(idx)), self.initial_actions[idx],
                           self.frozen[idx])


@dataclass
class SearchResult:
    policy: PolicyDistribution
    action: object
    ess: list = field(default_factory=list)
    resample_count: int = 0
    prior: PolicyDistribution | None = None


def advantage_update(log_weight, reward, v_next, v_cur, frozen, gamma: float = 1.0):
    """``log_weight + reward + gamma*v_next - v_cur``; frozen entries pass through."""
    step = np.asarray(reward) + gamma * np.asarray(v_next) - np.asarray(v_cur)
    out = np.where(frozen, log_weight, np.asarray(log_weight) + step)
    return float(out) if np.ndim(out) == 0 else out


def resampling_probs(log_weights, config: SmcConfig) -> np.ndarray:
    if config.resampling_mode == "exact":
        return softmax_temp(log_weights, 1.0)
    return softmax_temp(minmax_normalise(log_weights), config.resample_temp)


def resample_step(particles: ParticleSet, config: SmcConfig, rng, trace: list | None = None) -> ParticleSet:
    """Multinomial resampling of one root's particles; weights reset to zero."""
    probs = resampling_probs(particles.log_weights, config)
    gen = as_generator(rng)
    idx = sample_indices(probs, len(particles), gen)
    if trace is not None:
        trace.append({"probs": probs, "indices": idx})
    return particles.take(idx)


def extract_improved_policy(particles: ParticleSet, mode: str = "uniform_diracs",
                            config: SmcConfig | None = None, num_actions: int | None = None) -> PolicyDistribution:
    """Distribution of the particles' pinned first actions.

    With ``num_actions`` (discrete) the result is a dense categorical built by
    binning; otherwise an empirical dirac mixture over distinct actions.
    """
    n = len(particles)
    if mode == "uniform_diracs":
        mass = np.full(n, 1.0 / n)
    elif mode == "weight_tilted":
        mass = resampling_probs(particles.log_weights, config or SmcConfig())
    else:
        raise InvalidArgument(f"unknown final policy mode {mode!r}")
    acts = particles.initial_actions
    if num_actions is not None:
        probs = np.bincount(acts.astype(np.int64), weights=mass, minlength=num_actions)
        return PolicyDistribution.categorical(probs / probs.sum())
    atoms, inverse = np.unique(acts, axis=0, return_inverse=True)
    masses = np.bincount(inverse.reshape(-1), weights=mass, minlength=len(atoms))
    return PolicyDistribution.empirical(atoms, masses / masses.sum())


def net_closures(net, env: Env):
    """Prior and value closures over a network, taking ``StateBatch`` inputs."""
    if net.kind == "categorical":
        def prior_fn(batch):
            return net.policy_probs(env.observe_batch(batch))
    else:
        def prior_fn(batch):
            return net.policy_gaussian(env.observe_batch(batch))

    def value_fn(batch):
        return net.value_batch(env.observe_batch(batch))

    return prior_fn, value_fn


def _temper(probs: np.ndarray, temp: float) -> np.ndarray:
    if temp == 1.0:
        return probs
    with np.errstate(divide="ignore"):
        logits = np.log(probs) / temp
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def _check_finite(name: str, arr, step: int):
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        bad = int((~np.isfinite(arr)).sum())
        raise PlannerError(f"{name} produced {bad} non-finite entries at search step {step}")


def plan_batch(roots: list[EnvState], prior_fn: Callable, value_fn: Callable, env: Env,
               config: SmcConfig, rngs: list, trace: list | None = None,
               workers: int = 1) -> list[SearchResult]:
    """Run the planner from every root; ``rngs[i]`` drives root ``i``."""
    if len(rngs) != len(roots):
        raise InvalidArgument("need one RNG stream per root")
    if workers > 1 and len(roots) > 1:
        chunks = np.array_split(np.arange(len(roots)), min(workers, len(roots)))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(
                lambda c: _plan_chunk([roots[i] for i in c], prior_fn, value_fn, env, config,
                                      [rngs[i] for i in c], None), chunks))
        return [r for part in parts for r in part]
    return _plan_chunk(roots, prior_fn, value_fn, env, config, rngs, trace)


def plan(root: EnvState, prior_fn: Callable, value_fn: Callable, env: Env, config: SmcConfig,
         rng, trace: list | None = None) -> SearchResult:
    return plan_batch([root], prior_fn, value_fn, env, config, [rng], trace)[0]


def _plan_chunk(roots, prior_fn, value_fn, env, config, rngs, trace):
    for r in roots:
        if r.done:
            raise InvalidArgument("cannot plan from a done state")
    R, N, h = len(roots), config.num_particles, config.horizon
    gens = [as_generator(g) for g in rngs]
    root_batch = env.batch(roots)
    states = root_batch.repeat(N)
    logw = np.zeros(R * N)
    frozen = np.zeros(R * N, dtype=bool)
    root_v = np.asarray(value_fn(root_batch), dtype=np.float64)
    _check_finite("value", root_v, 0)
    v_cur = np.repeat(root_v, N)
    initial = None
    ess = [[] for _ in range(R)]
    resamples = 0
    root_prior = None

    for step in range(h):
        actions, logp = _sample_actions(env, prior_fn, states, config, gens, N, root_step=step == 0)
        if step == 0:
            initial = actions.copy()
            root_prior = logp[1]
        logp = logp[0]
        nxt, reward = env.step_batch(states, actions)
        v_next = np.asarray(value_fn(nxt), dtype=np.float64)
        _check_finite("value", v_next, step)
        v_next = np.where(nxt.terminal, 0.0, v_next)
        inc_base = reward
        if config.include_log_prior:
            inc_base = reward - logp
        logw = advantage_update(logw, inc_base, v_next, v_cur, frozen, config.search_gamma)
        # done states absorb inside step_batch, so frozen particles are unchanged
        states = nxt
        v_cur = np.where(frozen, v_cur, v_next)
        frozen = states.done.copy()

        if (step + 1) % config.resample_period == 0:
            resamples += 1
            new_idx = np.empty(R * N, dtype=np.int64)
            for r in range(R):
                sl = slice(r * N, (r + 1) * N)
                probs = resampling_probs(logw[sl], config)
                ess[r].append(effective_sample_size(probs))
                idx = sample_indices(probs, N, gens[r])
                if trace is not None:
                    trace.append({"root": r, "step": step, "probs": probs, "indices": idx})
                new_idx[sl] = r * N + idx
            states = states.take(new_idx)
            initial = initial[new_idx]
            frozen = frozen[new_idx]
            v_cur = v_cur[new_idx]
            logw = np.zeros(R * N)

    results = []
    for r in range(R):
        sl = slice(r * N, (r + 1) * N)
        ps = ParticleSet(states.take(np.arange(r * N, (r + 1) * N)), logw[sl], initial[sl], frozen[sl])
        policy = extract_improved_policy(ps, config.final_policy_mode, config,
                                         env.num_actions if env.discrete else None)
        if env.discrete:
            action = sample_categorical(policy.probs, gens[r])
        else:
            action = policy.atoms[sample_categorical(policy.masses, gens[r])]
        results.append(SearchResult(policy, action, ess[r], resamples, root_prior[r]))
    return results


def _sample_actions(env, prior_fn, states, config, gens, N, root_step):
    """Sample one action per particle; returns actions and (log-prob, root prior)."""
    R = len(gens)
    if env.discrete:
        probs = np.asarray(prior_fn(states), dtype=np.float64)
        _check_finite("prior", probs, 0)
        probs = _temper(probs, config.policy_temp)
        root_prior = None
        if root_step:
            root_prior = [PolicyDistribution.categorical(probs[r * N] / probs[r * N].sum()) for r in range(R)]
        actions = np.empty(R * N, dtype=np.int64)
        for r in range(R):
            sl = slice(r * N, (r + 1) * N)
            p = probs[sl]
            if root_step and config.dirichlet_weight > 0:
                noise = dirichlet(config.dirichlet_alpha, p.shape[1], gens[r], (N,))
                p = (1 - config.dirichlet_weight) * p + config.dirichlet_weight * noise
            actions[sl] = sample_categorical_rows(p, gens[r])
        with np.errstate(divide="ignore"):
            logp = np.log(probs[np.arange(R * N), actions])
        return actions, (logp, root_prior)

    mean, std = prior_fn(states)
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64) * config.policy_temp
    _check_finite("prior", mean, 0)
    root_prior = None
    if root_step:
        root_prior = [PolicyDistribution.gaussian(mean[r * N], std[r * N]) for r in range(R)]
    actions = np.empty_like(mean)
    for r in range(R):
        sl = slice(r * N, (r + 1) * N)
        a = mean[sl] + std[sl] * gens[r].standard_normal(mean[sl].shape)
        if root_step and config.root_noise_scale > 0:
            a = a + config.root_noise_scale * truncnorm.rvs(-1.0, 1.0, size=a.shape, random_state=gens[r])
        actions[sl] = np.clip(a, -1.0, 1.0)
    logp = -0.5 * (((actions - mean) / std) ** 2 + 2 * np.log(std) + np.log(2 * np.pi)).sum(axis=1)
    return actions, (logp, root_prior)
