"""Deterministic perfect-model toy environments.

Every environment keeps a time-free core transition ``_transition`` that
operates on a batch of packed integer/float state rows.  ``step_batch`` wraps
it with the episode clock, terminal absorption and truncation, and the
single-state ``step`` is a batch of one, so both paths always agree.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .core import InvalidArgument, RngStream, as_generator


class ConfigError(ValueError):
    """Invalid environment specification."""


@dataclass(frozen=True)
class EnvState:
    data: tuple
    t: int = 0
    done: bool = False
    truncated: bool = False

    @property
    def terminal(self) -> bool:
        return self.done and not self.truncated


@dataclass(frozen=True)
class StepResult:
    next_state: EnvState
    reward: float
    done: bool


@dataclass
class StateBatch:
    """Structure-of-arrays view over many ``EnvState`` values."""

    data: np.ndarray
    t: np.ndarray
    done: np.ndarray
    truncated: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    @property
    def terminal(self) -> np.ndarray:
        return self.done & ~self.truncated

    @classmethod
    def from_states(cls, states, dtype) -> "StateBatch":
        states = list(states)
        return cls(
            data=np.array([s.data for s in states], dtype=dtype).reshape(len(states), -1),
            t=np.array([s.t for s in states], dtype=np.int64),
            done=np.array([s.done for s in states], dtype=bool),
            truncated=np.array([s.truncated for s in states], dtype=bool),
        )

    def take(self, idx) -> "StateBatch":
        return StateBatch(self.data[idx], self.t[idx], self.done[idx], self.truncated[idx])

    def repeat(self, n: int) -> "StateBatch":
        return StateBatch(
            np.repeat(self.data, n, axis=0),
            np.repeat(self.t, n),
            np.repeat(self.done, n),
            np.repeat(self.truncated, n),
        )

    def state(self, i: int) -> EnvState:
        return EnvState(
            tuple(self.data[i].tolist()), int(self.t[i]), bool(self.done[i]), bool(self.truncated[i])
        )

    def states(self) -> list[EnvState]:
        return [self.state(i) for i in range(len(self))]


class Env:
    """Common machinery.  Subclasses define the core dynamics and encodings."""

    id: str = "env"
    discrete: bool = True
    num_actions: int = 0
    action_dim: int = 0
    obs_dim: int = 0
    horizon: int = 1
    dtype: Any = np.int64

    def __init__(self, seed: int = 0):
        self._reset_rng = RngStream(seed, stream_id=0x5EED)
        self.params: dict[str, Any] = {}

    # -- subclass hooks ---------------------------------------------------
    def _transition(self, data: np.ndarray, actions: np.ndarray):
        """Return ``(next_data, reward, terminal)`` for a batch, ignoring time."""
        raise NotImplementedError

    def _observe(self, data: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _initial(self, gen: np.random.Generator) -> tuple:
        raise NotImplementedError

    def is_success(self, data: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def is_terminal(self, data: np.ndarray) -> np.ndarray:
        """Whether packed rows are absorbing terminal states (time-free)."""
        return self.is_success(data)

    # -- public API -------------------------------------------------------
    @property
    def spec(self) -> dict:
        return {"id": self.id, **self.params}

    def reset(self, rng=None) -> EnvState:
        """Sample an initial state from the env's seeded start distribution."""
        gen = self._reset_rng.generator if rng is None else as_generator(rng)
        return EnvState(tuple(self._initial(gen)), 0, False, False)

    def batch(self, states) -> StateBatch:
        return StateBatch.from_states(states, self.dtype)

    def check_actions(self, actions) -> np.ndarray:
        if self.discrete:
            a = np.asarray(actions)
            if not np.issubdtype(a.dtype, np.integer):
                if np.any(a != np.round(a)):
                    raise InvalidArgument(f"discrete action must be an integer, got {actions!r}")
                a = a.astype(np.int64)
            if np.any((a < 0) | (a >= self.num_actions)):
                raise InvalidArgument(f"action out of range [0, {self.num_actions}): {actions!r}")
            return a.astype(np.int64)
        a = np.asarray(actions, dtype=np.float64)
        return np.clip(a, -1.0, 1.0)

    def step_batch(self, batch: StateBatch, actions):
        """Advance every state in ``batch``; done states absorb with reward 0."""
        actions = self.check_actions(actions)
        nxt, reward, terminal = self._transition(batch.data, actions)
        live = ~batch.done
        data = np.where(live[:, None], nxt, batch.data).astype(self.dtype)
        reward = np.where(live, reward, 0.0)
        terminal = live & terminal
        t = np.where(live, batch.t + 1, batch.t)
        truncated = live & ~terminal & (t >= self.horizon)
        out = StateBatch(
            data=data,
            t=t,
            done=batch.done | terminal | truncated,
            truncated=np.where(live, truncated, batch.truncated),
        )
        return out, reward.astype(np.float64)

    def step(self, state: EnvState, action) -> StepResult:
        a = np.asarray(action)
        acts = a.reshape(1, -1) if not self.discrete else a.reshape(1)
        out, reward = self.step_batch(self.batch([state]), acts)
        nxt = out.state(0)
        return StepResult(nxt, float(reward[0]), nxt.done)

    def observe_batch(self, batch: StateBatch) -> np.ndarray:
        return self._observe(batch.data)

    def observe(self, state: EnvState) -> np.ndarray:
        return self._observe(np.asarray([state.data], dtype=self.dtype))[0]

    def solved(self, state: EnvState) -> bool:
        return bool(self.is_success(np.asarray([state.data], dtype=self.dtype))[0])

    def key(self, state: EnvState) -> tuple:
        """Time-free identity of a state, used by the oracles."""
        return state.data

    def parse_state(self, text: str) -> EnvState:
        """Parse a comma/space separated literal of the packed state row."""
        parts = [p for p in text.replace(",", " ").split() if p]
        if not parts:
            raise InvalidArgument("empty state literal")
        try:
            values = [int(p) for p in parts] if self.discrete else [float(p) for p in parts]
        except ValueError as exc:
            raise InvalidArgument(f"cannot parse state literal {text!r}") from exc
        width = len(self.reset(RngStream(0)).data)
        if len(values) != width:
            raise InvalidArgument(f"state literal needs {width} fields, got {len(values)}")
        return EnvState(tuple(values), 0, False, False)


def _one_hot(idx: np.ndarray, size: int) -> np.ndarray:
    out = np.zeros(idx.shape + (size,))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


class Chain(Env):
    """``length`` cells in a row; left/right moves; +1 for reaching the right end."""

    id = "chain"
    LEFT, RIGHT = 0, 1

    def __init__(self, length: int = 5, horizon: int | None = None, start: int | None = None,
                 step_cost: float = 0.01, random_start: bool = False, seed: int = 0):
        super().__init__(seed)
        if length < 3:
            raise ConfigError("chain length must be at least 3")
        self.length = int(length)
        self.horizon = int(horizon if horizon is not None else 2 * length)
        if self.horizon < 1:
            raise ConfigError("horizon must be positive")
        self.start = int(start if start is not None else length // 2)
        if not 0 < self.start < length - 1:
            raise ConfigError("chain start must be an interior cell")
        self.step_cost = float(step_cost)
        self.random_start = bool(random_start)
        self.num_actions = 2
        self.obs_dim = self.length
        self.params = dict(length=self.length, horizon=self.horizon, start=self.start,
                           step_cost=self.step_cost, random_start=self.random_start)

    def _initial(self, gen):
        if self.random_start:
            return (int(gen.integers(1, self.length - 1)),)
        return (self.start,)

    def _transition(self, data, actions):
        pos = data[:, 0] + np.where(actions == self.RIGHT, 1, -1)
        pos = np.clip(pos, 0, self.length - 1)
        terminal = (pos == 0) | (pos == self.length - 1)
        reward = np.where(pos == self.length - 1, 1.0, 0.0) - self.step_cost
        return pos[:, None], reward, terminal

    def _observe(self, data):
        return _one_hot(data[:, 0], self.length)

    def is_success(self, data):
        return data[:, 0] == self.length - 1

    def is_terminal(self, data):
        return (data[:, 0] == 0) | (data[:, 0] == self.length - 1)

    def all_states(self) -> list[tuple]:
        return [(i,) for i in range(self.length)]


class Bandit(Env):
    """Single-decision env: pick an arm, collect its reward, episode ends."""

    id = "bandit"

    def __init__(self, rewards=(0.0, 1.0), seed: int = 0):
        super().__init__(seed)
        self.rewards = np.asarray(rewards, dtype=np.float64)
        if self.rewards.ndim != 1 or self.rewards.size < 1:
            raise ConfigError("bandit needs at least one arm")
        self.num_actions = int(self.rewards.size)
        self.obs_dim = 2
        self.horizon = 1
        self.params = dict(rewards=[float(r) for r in self.rewards])

    def _initial(self, gen):
        return (0,)

    def _transition(self, data, actions):
        return np.ones_like(data), self.rewards[actions], np.ones(len(data), dtype=bool)

    def _observe(self, data):
        return _one_hot(data[:, 0], 2)

    def is_success(self, data):
        return data[:, 0] == 1

    def all_states(self):
        return [(0,), (1,)]


class GridPush(Env):
    """Box pushing on an open ``size`` x ``size`` grid.

    Packed row: agent (r, c), then each box (r, c), then each target (r, c).
    Actions: 0 up, 1 down, 2 left, 3 right.
    """

    id = "gridpush"
    MOVES = np.array([[-1, 0], [1, 0], [0, -1], [0, 1]])

    def __init__(self, size: int = 5, boxes: int = 1, bonus: float = 10.0, horizon: int = 30,
                 pulls: tuple[int, int] = (4, 12), reward_scale: float = 1.0,
                 step_cost: float = 0.01, seed: int = 0):
        super().__init__(seed)
        if size < 3:
            raise ConfigError("gridpush size must be at least 3")
        if boxes not in (1, 2):
            raise ConfigError("gridpush supports 1 or 2 boxes")
        if horizon < 1:
            raise ConfigError("horizon must be positive")
        lo, hi = int(pulls[0]), int(pulls[1])
        if not 1 <= lo <= hi:
            raise ConfigError("pulls must satisfy 1 <= lo <= hi")
        self.size, self.boxes, self.bonus = int(size), int(boxes), float(bonus)
        self.horizon, self.pulls = int(horizon), (lo, hi)
        self.reward_scale, self.step_cost = float(reward_scale), float(step_cost)
        self.num_actions = 4
        self.obs_dim = 3 * self.size * self.size
        self.params = dict(size=self.size, boxes=self.boxes, bonus=self.bonus, horizon=self.horizon,
                           pulls=list(self.pulls), reward_scale=self.reward_scale,
                           step_cost=self.step_cost)

    def _split(self, data):
        k = self.boxes
        agent = data[:, 0:2]
        boxes = data[:, 2:2 + 2 * k].reshape(-1, k, 2)
        targets = data[:, 2 + 2 * k:].reshape(-1, k, 2)
        return agent, boxes, targets

    def _on_target(self, boxes, targets):
        # boxes [B, k, 2], targets [B, k, 2] -> [B, k] box sits on some target
        eq = np.all(boxes[:, :, None, :] == targets[:, None, :, :], axis=-1)
        return eq.any(axis=-1)

    def _inside(self, pos):
        return np.all((pos >= 0) & (pos < self.size), axis=-1)

    def _transition(self, data, actions):
        agent, boxes, targets = self._split(data)
        move = self.MOVES[actions]
        dest = agent + move
        hit = np.all(boxes == dest[:, None, :], axis=-1)  # [B, k]
        pushing = hit.any(axis=-1)
        beyond = dest + move
        blocked_box = np.any(np.all(boxes == beyond[:, None, :], axis=-1), axis=-1)
        can_push = pushing & self._inside(beyond) & ~blocked_box
        can_move = self._inside(dest) & (~pushing | can_push)
        new_agent = np.where(can_move[:, None], dest, agent)
        shift = (hit & can_push[:, None])[:, :, None] * move[:, None, :]
        new_boxes = boxes + shift
        before = self._on_target(boxes, targets)
        after = self._on_target(new_boxes, targets)
        on_events = (after & ~before).sum(axis=-1)
        off_events = (before & ~after).sum(axis=-1)
        complete = after.all(axis=-1)
        reward = on_events * 1.0 - off_events * 0.1 - self.step_cost + np.where(complete, self.bonus, 0.0)
        out = np.concatenate([new_agent, new_boxes.reshape(len(data), -1), targets.reshape(len(data), -1)], axis=1)
        return out, reward * self.reward_scale, complete

    def _observe(self, data):
        agent, boxes, targets = self._split(data)
        n = len(data)
        g = self.size
        planes = np.zeros((n, 3, g * g))
        rows = np.arange(n)
        planes[rows, 0, agent[:, 0] * g + agent[:, 1]] = 1.0
        for j in range(self.boxes):
            planes[rows, 1, boxes[:, j, 0] * g + boxes[:, j, 1]] = 1.0
            planes[rows, 2, targets[:, j, 0] * g + targets[:, j, 1]] = 1.0
        return planes.reshape(n, -1)

    def is_success(self, data):
        _, boxes, targets = self._split(data)
        return self._on_target(boxes, targets).all(axis=-1)

    def _initial(self, gen):
        """Generate a level by pulling boxes backwards off their targets.

        Every forward solution is the reverse of the pull sequence, so the
        emitted level is solvable by construction.
        """
        g, k = self.size, self.boxes
        while True:
            cells = gen.choice(g * g, size=k + 1, replace=False)
            targets = [divmod(int(c), g) for c in cells[:k]]
            boxes = [list(t) for t in targets]
            agent = list(divmod(int(cells[k]), g))
            n_pulls = int(gen.integers(self.pulls[0], self.pulls[1] + 1))
            for _ in range(n_pulls * 4):
                if n_pulls == 0:
                    break
                d = self.MOVES[int(gen.integers(4))]
                dest = [agent[0] + d[0], agent[1] + d[1]]
                if not (0 <= dest[0] < g and 0 <= dest[1] < g) or dest in boxes:
                    continue
                behind = [agent[0] - d[0], agent[1] - d[1]]
                if behind in boxes:
                    boxes[boxes.index(behind)] = list(agent)
                    n_pulls -= 1
                agent = dest
            if any(tuple(b) not in targets for b in boxes):
                flat = agent + [v for b in boxes for v in b] + [v for t in targets for v in t]
                return tuple(int(v) for v in flat)


class PermPuzzle(Env):
    """Permutation puzzle: restore the identity using cyclic generator moves.

    Generators are 4-cycles on overlapping blocks of positions; each has an
    inverse action, mirroring clockwise/counter-clockwise face turns.
    """

    id = "permpuzzle"

    def __init__(self, n: int = 8, scrambles: tuple[int, int] = (1, 4), horizon: int = 10,
                 seed: int = 0):
        super().__init__(seed)
        if n < 4:
            raise ConfigError("permpuzzle needs n >= 4")
        lo, hi = int(scrambles[0]), int(scrambles[1])
        if not 1 <= lo <= hi:
            raise ConfigError("scrambles must satisfy 1 <= lo <= hi")
        if horizon < 1:
            raise ConfigError("horizon must be positive")
        self.n, self.scrambles, self.horizon = int(n), (lo, hi), int(horizon)
        cycles = []
        for start in range(0, n - 3, 2):
            cycles.append(list(range(start, start + 4)))
        cycles.append([0, n // 2 - 1, n // 2, n - 1] if n >= 6 else [0, 1, 2, 3])
        gens = []
        for cyc in cycles:
            fwd = np.arange(n)
            fwd[cyc] = np.roll(cyc, 1)
            gens.append(fwd)
            gens.append(np.argsort(fwd))
        self.generators = np.array(gens)
        self.num_actions = len(gens)
        self.obs_dim = n * n
        self.params = dict(n=self.n, scrambles=list(self.scrambles), horizon=self.horizon)

    def inverse_action(self, a: int) -> int:
        return a ^ 1

    def _transition(self, data, actions):
        new = np.take_along_axis(data, self.generators[actions], axis=1)
        solved = np.all(new == np.arange(self.n), axis=1)
        return new, solved.astype(np.float64), solved

    def _observe(self, data):
        return _one_hot(data, self.n).reshape(len(data), -1)

    def is_success(self, data):
        return np.all(data == np.arange(self.n), axis=1)

    def _initial(self, gen):
        while True:
            k = int(gen.integers(self.scrambles[0], self.scrambles[1] + 1))
            perm = np.arange(self.n)
            prev = -1
            for _ in range(k):
                a = int(gen.integers(self.num_actions))
                while prev >= 0 and a == self.inverse_action(prev):
                    a = int(gen.integers(self.num_actions))
                perm = perm[self.generators[a]]
                prev = a
            if not np.array_equal(perm, np.arange(self.n)):
                return tuple(int(v) for v in perm)

    def identity(self) -> EnvState:
        return EnvState(tuple(range(self.n)), 0, False, False)


class PointMass(Env):
    """2-D double integrator driven towards a goal; leapfrog integration.

    Packed row: position (2), velocity (2), goal (2).  Positions are clipped
    to the arena and the velocity component pushing outwards is zeroed.
    """

    id = "pointmass"
    discrete = False
    dtype = np.float64

    def __init__(self, horizon: int = 50, dt: float = 0.1, arena: float = 2.0,
                 success_radius: float = 0.1, seed: int = 0):
        super().__init__(seed)
        if horizon < 1 or dt <= 0 or arena <= 0:
            raise ConfigError("pointmass horizon, dt and arena must be positive")
        self.horizon, self.dt, self.arena = int(horizon), float(dt), float(arena)
        self.success_radius = float(success_radius)
        self.action_dim = 2
        self.obs_dim = 6
        self.params = dict(horizon=self.horizon, dt=self.dt, arena=self.arena,
                           success_radius=self.success_radius)

    def _transition(self, data, actions):
        pos, vel, goal = data[:, 0:2], data[:, 2:4], data[:, 4:6]
        half = vel + 0.5 * self.dt * actions
        new_pos = pos + self.dt * half
        new_vel = half + 0.5 * self.dt * actions
        clipped = np.clip(new_pos, -self.arena, self.arena)
        new_vel = np.where(clipped != new_pos, 0.0, new_vel)
        reward = -np.linalg.norm(clipped - goal, axis=1)
        out = np.concatenate([clipped, new_vel, goal], axis=1)
        return out, reward, np.zeros(len(data), dtype=bool)

    def _observe(self, data):
        return np.asarray(data, dtype=np.float64).copy()

    def is_success(self, data):
        return np.linalg.norm(data[:, 0:2] - data[:, 4:6], axis=1) < self.success_radius

    def is_terminal(self, data):
        return np.zeros(len(data), dtype=bool)

    def _initial(self, gen):
        pos = gen.uniform(-1.0, 1.0, 2)
        goal = gen.uniform(-1.0, 1.0, 2)
        return tuple(float(v) for v in np.concatenate([pos, np.zeros(2), goal]))


ENV_TYPES = {cls.id: cls for cls in (Chain, GridPush, PermPuzzle, PointMass, Bandit)}


def make_env(spec: dict | str, seed: int = 0) -> Env:
    """Build an environment from ``{"id": ..., **params}`` (or a bare id)."""
    if isinstance(spec, str):
        spec = {"id": spec}
    spec = dict(spec)
    env_id = spec.pop("id", None)
    if env_id not in ENV_TYPES:
        raise ConfigError(f"unknown env id {env_id!r}; choose from {sorted(ENV_TYPES)}")
    for key in ("pulls", "scrambles", "rewards"):
        if key in spec:
            spec[key] = tuple(spec[key])
    try:
        return ENV_TYPES[env_id](**spec, seed=seed)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {env_id}: {exc}") from exc
