"""AlphaZero-style PUCT tree search over a deterministic environment model.

Simulations run strictly one after another; that sequential dependency is
what the wall-clock comparison against the particle planner measures.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .core import InvalidArgument, PolicyDistribution, as_generator, dirichlet, minmax_normalise
from .envs import Env, EnvState


@dataclass
class PuctConfig:
    simulations: int = 50
    dirichlet_fraction: float = 0.25
    dirichlet_alpha: float = 0.3
    pb_c_init: float = 1.25
    pb_c_base: float = 19652.0
    temperature: float = 1.0
    gamma: float = 0.99
    q_normalization: str = "parent_and_siblings"

    def __post_init__(self):
        if self.simulations < 1:
            raise InvalidArgument("simulations must be >= 1")
        if self.q_normalization not in ("parent_and_siblings", "none"):
            raise InvalidArgument("q_normalization must be 'parent_and_siblings' or 'none'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SearchTree:
    """Flat node arrays; node 0 is the root, ``-1`` marks a missing child."""

    visits: np.ndarray
    value_sum: np.ndarray
    reward: np.ndarray
    terminal: np.ndarray
    prior: np.ndarray
    children: np.ndarray
    parent: np.ndarray
    action: np.ndarray
    states: list
    node_count: int = 0
    evaluations: np.ndarray | None = None
    gamma: float = 0.99

    @classmethod
    def empty(cls, capacity: int, num_actions: int, gamma: float) -> "SearchTree":
        return cls(
            visits=np.zeros(capacity, dtype=np.int64),
            value_sum=np.zeros(capacity),
            reward=np.zeros(capacity),
            terminal=np.zeros(capacity, dtype=bool),
            prior=np.zeros((capacity, num_actions)),
            children=np.full((capacity, num_actions), -1, dtype=np.int64),
            parent=np.full(capacity, -1, dtype=np.int64),
            action=np.full(capacity, -1, dtype=np.int64),
            states=[None] * capacity,
            evaluations=np.zeros(capacity),
            gamma=gamma,
        )

    def node_value(self, node: int) -> float:
        return self.value_sum[node] / max(self.visits[node], 1)

    def child_q(self, node: int) -> np.ndarray:
        """``reward + gamma * mean value`` per action; NaN where unvisited."""
        kids = self.children[node]
        q = np.full(len(kids), np.nan)
        seen = kids >= 0
        idx = kids[seen]
        visited = self.visits[idx] > 0
        vals = self.reward[idx] + self.gamma * self.value_sum[idx] / np.maximum(self.visits[idx], 1)
        q[np.flatnonzero(seen)[visited]] = vals[visited]
        return q

    def child_visits(self, node: int) -> np.ndarray:
        kids = self.children[node]
        return np.where(kids >= 0, self.visits[np.maximum(kids, 0)], 0)


def puct_score(q_normalized, prior, parent_visits, child_visits, config: PuctConfig):
    """Normalised value plus the prior-weighted exploration bonus."""
    c = config.pb_c_init + np.log((parent_visits + config.pb_c_base + 1.0) / config.pb_c_base)
    return np.asarray(q_normalized) + np.asarray(prior) * np.sqrt(parent_visits) / (1.0 + np.asarray(child_visits)) * c


def normalized_q(tree: SearchTree, node: int, config: PuctConfig) -> np.ndarray:
    q = tree.child_q(node)
    visited = ~np.isnan(q)
    if config.q_normalization == "none":
        return np.where(visited, q, 0.0)
    if not visited.any():
        return np.zeros(len(q))
    # min-max over the parent's value and its visited children's q
    pool = np.concatenate([[tree.node_value(node)], q[visited]])
    norm = minmax_normalise(pool)[1:]
    out = np.zeros(len(q))
    out[visited] = norm
    return out


def _select(tree: SearchTree, node: int, config: PuctConfig) -> int:
    scores = puct_score(normalized_q(tree, node, config), tree.prior[node], tree.visits[node],
                        tree.child_visits(node), config)
    return int(np.argmax(scores))  # first maximum: lowest index wins ties


def _evaluate(env, prior_fn, value_fn, batch):
    probs = np.asarray(prior_fn(batch), dtype=np.float64)
    values = np.where(batch.terminal, 0.0, np.asarray(value_fn(batch), dtype=np.float64))
    return probs, values


def search(root: EnvState, prior_fn: Callable, value_fn: Callable, env: Env, config: PuctConfig,
           rng) -> SearchTree:
    """Run ``config.simulations`` simulations; the first one expands the root."""
    return search_batch([root], prior_fn, value_fn, env, config, [rng])[0]


def search_batch(roots: list[EnvState], prior_fn: Callable, value_fn: Callable, env: Env,
                 config: PuctConfig, rngs: list) -> list[SearchTree]:
    """Independent searches advanced in lockstep.

    Within each tree the simulations stay strictly sequential; only the leaf
    expansions of different trees share one batched model and network call.
    Every tree equals what ``search`` would build from the same RNG.
    """
    if len(rngs) != len(roots):
        raise InvalidArgument("need one RNG stream per root")
    for root in roots:
        if root.done:
            raise InvalidArgument("cannot search from a done state")
    if not env.discrete:
        raise InvalidArgument("PUCT search supports discrete action spaces only")
    A = env.num_actions
    trees = [SearchTree.empty(config.simulations + 1, A, config.gamma) for _ in roots]

    probs, values = _evaluate(env, prior_fn, value_fn, env.batch(roots))
    for tree, root, p, v, rng in zip(trees, roots, probs, values, rngs):
        if config.dirichlet_fraction > 0:
            noise = dirichlet(config.dirichlet_alpha, A, as_generator(rng))
            p = (1 - config.dirichlet_fraction) * p + config.dirichlet_fraction * noise
        tree.prior[0] = p
        tree.states[0] = root
        tree.visits[0] = 1
        tree.value_sum[0] = v
        tree.evaluations[0] = v
        tree.node_count = 1

    for _ in range(config.simulations - 1):
        paths, expand = [], []
        for k, tree in enumerate(trees):
            node, path = 0, [0]
            while not tree.terminal[node]:
                a = _select(tree, node, config)
                child = tree.children[node, a]
                if child < 0:
                    expand.append((k, node, a))
                    break
                node = child
                path.append(node)
            paths.append(path)
        leaf_values = [0.0] * len(trees)
        if expand:
            parents = env.batch([trees[k].states[node] for k, node, _ in expand])
            nxt, rewards = env.step_batch(parents, np.array([a for _, _, a in expand]))
            probs, values = _evaluate(env, prior_fn, value_fn, nxt)
            for j, (k, node, a) in enumerate(expand):
                tree = trees[k]
                child = tree.node_count
                tree.node_count += 1
                tree.children[node, a] = child
                tree.parent[child], tree.action[child] = node, a
                tree.states[child] = nxt.state(j)
                tree.reward[child] = rewards[j]
                tree.terminal[child] = nxt.terminal[j]
                tree.prior[child] = probs[j]
                tree.evaluations[child] = values[j]
                paths[k].append(child)
                leaf_values[k] = values[j]
        for tree, path, v in zip(trees, paths, leaf_values):
            _backup(tree, path, v)
    return trees


def _backup(tree: SearchTree, path: list[int], leaf_value: float):
    g = leaf_value
    for node in reversed(path):
        tree.value_sum[node] += g
        tree.visits[node] += 1
        g = tree.reward[node] + tree.gamma * g


def extract_visit_policy(tree: SearchTree, temperature: float = 1.0) -> PolicyDistribution:
    """Root policy proportional to ``visits ** (1 / temperature)``."""
    counts = tree.child_visits(0).astype(np.float64)
    if counts.sum() <= 0:
        raise InvalidArgument("root has no visited children")
    if temperature <= 0:
        raise InvalidArgument("temperature must be positive")
    with np.errstate(divide="ignore"):
        logits = np.log(counts) / temperature
    logits -= logits.max()
    w = np.exp(logits)
    return PolicyDistribution.categorical(w / w.sum())


def root_policy(tree: SearchTree, config: PuctConfig) -> PolicyDistribution:
    """Visit policy, or the root prior when a one-simulation budget left no child visits."""
    if tree.child_visits(0).sum() == 0:
        return PolicyDistribution.categorical(tree.prior[0] / tree.prior[0].sum())
    return extract_visit_policy(tree, config.temperature)
