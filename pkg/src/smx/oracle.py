"""Brute-force ground truth for small discrete instances.

These routines enumerate instead of sampling, so they are slow but exact.
They share nothing with the planners beyond the environment model itself.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve
from scipy.special import logsumexp

from .core import InvalidArgument
from .envs import Env, EnvState, StateBatch


class OracleRefused(InvalidArgument):
    """The requested enumeration exceeds the configured budget."""


@dataclass(frozen=True)
class TrajectoryRecord:
    actions: tuple
    states: tuple
    rewards: tuple
    total_reward: float
    bootstrap: float
    log_prior: float

    @property
    def terminal(self) -> bool:
        return self.states[-1].terminal


def _require_discrete(env: Env):
    if not env.discrete:
        raise OracleRefused(f"{env.id} has a continuous action space; enumerate a discretisation instead")


def enumerate_trajectories(env: Env, root: EnvState, h: int, prior_fn: Callable | None = None,
                           value_fn: Callable | None = None, budget: int = 10**6) -> list[TrajectoryRecord]:
    """All depth-``h`` action sequences from ``root``; done states end a branch early.

    ``prior_fn(batch) -> probs[B, A]`` supplies log-prior terms and
    ``value_fn(batch) -> values[B]`` the bootstrap at non-terminal leaves.
    """
    _require_discrete(env)
    if h < 0:
        raise InvalidArgument("h must be nonnegative")
    estimate = env.num_actions ** h
    if estimate > budget:
        raise OracleRefused(f"enumeration needs up to {estimate} trajectories (budget {budget})")

    # frontier entries: (actions, states, rewards, log_prior)
    frontier = [((), (root,), (), 0.0)]
    finished = []
    for _ in range(h):
        live = [f for f in frontier if not f[1][-1].done]
        finished.extend(f for f in frontier if f[1][-1].done)
        if not live:
            frontier = []
            break
        batch = env.batch([f[1][-1] for f in live])
        logp = np.zeros((len(live), env.num_actions))
        if prior_fn is not None:
            with np.errstate(divide="ignore"):
                logp = np.log(np.asarray(prior_fn(batch), dtype=np.float64))
        a_count = env.num_actions
        rep = batch.repeat(a_count)
        acts = np.tile(np.arange(a_count), len(live))
        nxt, rewards = env.step_batch(rep, acts)
        frontier = []
        for j in range(len(rep)):
            i, a = divmod(j, a_count)
            acts_i, states_i, rew_i, lp_i = live[i]
            frontier.append((acts_i + (a,), states_i + (nxt.state(j),), rew_i + (float(rewards[j]),),
                             lp_i + float(logp[i, a])))
    finished.extend(frontier)

    records = []
    leaves = [f[1][-1] for f in finished]
    boot = np.zeros(len(finished))
    if value_fn is not None and leaves:
        vals = np.asarray(value_fn(env.batch(leaves)), dtype=np.float64)
        boot = np.where([s.terminal for s in leaves], 0.0, vals)
    for f, b in zip(finished, boot):
        records.append(TrajectoryRecord(f[0], f[1], f[2], float(sum(f[2])), float(b), f[3]))
    return records


def exact_posterior_marginal(env: Env, root: EnvState, h: int, prior_fn: Callable,
                             value_fn: Callable | None = None, budget: int = 10**6) -> np.ndarray:
    """First-action marginal of ``p(tau) ~ prior(tau) exp(sum r + V(leaf))``."""
    if root.done:
        raise InvalidArgument("root state is done; no first action to marginalise")
    records = enumerate_trajectories(env, root, h, prior_fn, value_fn, budget)
    logw = np.array([r.log_prior + r.total_reward + r.bootstrap for r in records])
    first = np.array([r.actions[0] for r in records])
    out = np.zeros(env.num_actions)
    total = logsumexp(logw)
    for a in range(env.num_actions):
        mask = first == a
        if mask.any():
            out[a] = np.exp(logsumexp(logw[mask]) - total)
    return out / out.sum()


@dataclass
class ValueTable:
    """Tabular state values keyed by the env's time-free packed state."""

    keys: list
    values: np.ndarray
    q_values: np.ndarray
    terminal: np.ndarray
    residuals: list = field(default_factory=list)

    def __post_init__(self):
        self.index = {k: i for i, k in enumerate(self.keys)}

    def __getitem__(self, key) -> float:
        if isinstance(key, EnvState):
            key = key.data
        return float(self.values[self.index[tuple(key)]])

    def __call__(self, batch: StateBatch) -> np.ndarray:
        idx = [self.index[tuple(row)] for row in batch.data.tolist()]
        return np.where(batch.terminal, 0.0, self.values[idx])


@dataclass
class _Graph:
    keys: list
    nxt: np.ndarray
    reward: np.ndarray
    term_next: np.ndarray
    terminal: np.ndarray


def _state_graph(env: Env, roots, max_states: int) -> _Graph:
    _require_discrete(env)
    keys: list = []
    index: dict = {}
    queue = deque()
    for r in roots:
        k = tuple(r.data if isinstance(r, EnvState) else r)
        if k not in index:
            index[k] = len(keys)
            keys.append(k)
            queue.append(k)
    A = env.num_actions
    edges = []
    while queue:
        chunk = [queue.popleft() for _ in range(min(len(queue), 4096))]
        data = np.array(chunk, dtype=env.dtype)
        rep = np.repeat(data, A, axis=0)
        acts = np.tile(np.arange(A), len(chunk))
        nd, rew, term = env._transition(rep, acts)
        for j, row in enumerate(nd.tolist()):
            k = tuple(row)
            if k not in index:
                if len(keys) >= max_states:
                    raise OracleRefused(f"state space exceeds {max_states} states")
                index[k] = len(keys)
                keys.append(k)
                queue.append(k)
            edges.append((index[chunk[j // A]], j % A, index[k], float(rew[j]), bool(term[j])))
    S = len(keys)
    nxt = np.zeros((S, A), dtype=np.int64)
    reward = np.zeros((S, A))
    term_next = np.zeros((S, A), dtype=bool)
    for s, a, n, r, t in edges:
        nxt[s, a], reward[s, a], term_next[s, a] = n, r, t
    terminal = env.is_terminal(np.array(keys, dtype=env.dtype))
    return _Graph(keys, nxt, reward, term_next, terminal)


def exact_state_values(env: Env, gamma: float = 1.0, policy: Callable | None = None, roots=None,
                       tol: float = 1e-10, max_states: int = 10**6, max_iter: int = 100_000) -> ValueTable:
    """Optimal values by value iteration, or a policy's values by a linear solve.

    The episode time limit is ignored: values describe the untruncated MDP.
    ``policy(batch) -> probs[B, A]`` switches to policy evaluation.
    """
    if roots is None:
        roots = env.all_states() if hasattr(env, "all_states") else [env.reset().data]
    g = _state_graph(env, roots, max_states)
    S, A = g.nxt.shape
    live = ~g.terminal
    cont = gamma * (~g.term_next)
    if policy is None:
        v = np.zeros(S)
        residuals = []
        for _ in range(max_iter):
            q = g.reward + cont * v[g.nxt]
            new = np.where(live, q.max(axis=1), 0.0)
            res = float(np.max(np.abs(new - v)))
            residuals.append(res)
            v = new
            if res < tol:
                break
        q = g.reward + cont * v[g.nxt]
        return ValueTable(g.keys, v, q, g.terminal, residuals)

    batch = StateBatch(np.array(g.keys, dtype=env.dtype), np.zeros(S, dtype=np.int64),
                       np.zeros(S, dtype=bool), np.zeros(S, dtype=bool))
    pi = np.asarray(policy(batch), dtype=np.float64)
    pi = np.where(live[:, None], pi, 0.0)
    rows = np.repeat(np.arange(S), A)
    coef = (pi * cont).ravel()
    P = sparse.csr_matrix((coef, (rows, g.nxt.ravel())), shape=(S, S))
    rhs = (pi * g.reward).sum(axis=1)
    v = spsolve((sparse.identity(S, format="csr") - P).tocsc(), rhs)
    v = np.where(live, v, 0.0)
    q = g.reward + cont * v[g.nxt]
    return ValueTable(g.keys, v, q, g.terminal, [])


def tv_distance(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise InvalidArgument(f"support sizes differ: {p.shape} vs {q.shape}")
    return float(0.5 * np.abs(p - q).sum())


def solve_bfs(env: Env, root: EnvState, max_depth: int = 64, max_states: int = 10**6):
    """Shortest action sequence from ``root`` to a success state, or ``None``."""
    _require_discrete(env)
    start = tuple(root.data)
    if env.is_success(np.array([start], dtype=env.dtype))[0]:
        return []
    parent = {start: None}
    frontier = [start]
    A = env.num_actions
    for _ in range(max_depth):
        if not frontier:
            return None
        data = np.repeat(np.array(frontier, dtype=env.dtype), A, axis=0)
        acts = np.tile(np.arange(A), len(frontier))
        nd, _, term = env._transition(data, acts)
        success = env.is_success(nd)
        nxt_frontier = []
        for j, row in enumerate(nd.tolist()):
            k = tuple(row)
            if k in parent:
                continue
            parent[k] = (frontier[j // A], j % A)
            if success[j]:
                path = []
                while parent[k] is not None:
                    k, a = parent[k]
                    path.append(a)
                return path[::-1]
            if not term[j]:
                nxt_frontier.append(k)
            if len(parent) > max_states:
                raise OracleRefused(f"search exceeded {max_states} states")
        frontier = nxt_frontier
    return None
