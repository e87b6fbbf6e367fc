"""Small MLP policy/value networks with explicit backward passes.

The policy and value functions are separate tanh MLPs stored in one flat
parameter dict (keys prefixed ``pi/`` and ``v/``).  The value head is a
distributional readout over bins uniformly spaced in symlog space.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .core import InvalidArgument, PolicyDistribution, RngStream

STD_FLOOR = 1e-3
OBS_CLIP = 5.0
OBS_EPS = 1e-8
CHECKPOINT_MAGIC = b"SMXCKPT1"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Numerical failure during learning (non-finite loss, gradient or parameter)."""


def symlog(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.log1p(np.abs(x))


def symexp(y):
    y = np.asarray(y, dtype=np.float64)
    return np.sign(y) * np.expm1(np.abs(y))


@dataclass(frozen=True)
class ValueBins:
    """Bin centres uniformly spaced on [-bound, bound] in symlog space."""

    count: int = 64
    bound: float = float(symlog(500.0))

    def __post_init__(self):
        if self.count < 2:
            raise InvalidArgument("need at least two value bins")
        if not self.bound > 0:
            raise InvalidArgument("bin bound must be positive")

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(-self.bound, self.bound, self.count)

    @property
    def width(self) -> float:
        return 2.0 * self.bound / (self.count - 1)


def two_hot_encode(v, bins: ValueBins) -> np.ndarray:
    """Spread symlog(v) over its two bracketing bins; values past the edges clip.

    Accepts a scalar (returns ``[K]``) or an array (returns ``[..., K]``).
    """
    y = np.clip(symlog(v), -bins.bound, bins.bound)
    pos = (y + bins.bound) / bins.width
    lo = np.clip(np.floor(pos).astype(np.int64), 0, bins.count - 2)
    frac = np.clip(pos - lo, 0.0, 1.0)
    out = np.zeros(np.shape(y) + (bins.count,))
    np.put_along_axis(out, lo[..., None], (1.0 - frac)[..., None], axis=-1)
    np.put_along_axis(out, (lo + 1)[..., None], frac[..., None], axis=-1)
    return out


def two_hot_decode(probs, bins: ValueBins):
    p = np.asarray(probs, dtype=np.float64)
    if p.shape[-1] != bins.count:
        raise InvalidArgument(f"expected {bins.count} bin probabilities, got {p.shape[-1]}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise InvalidArgument("bin probabilities must be a normalised distribution")
    return symexp(p @ bins.centers)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class Net:
    """Policy head (categorical or diagonal Gaussian) plus symlog two-hot value head."""

    def __init__(self, obs_dim: int, hidden=(256, 256), *, num_actions: int | None = None,
                 action_dim: int | None = None, value_bins: int = 64, value_max: float = 500.0,
                 policy_temp: float = 1.0, init_log_std: float = float(np.log(0.5)), obs_norm: bool = False,
                 seed: int = 0):
        if (num_actions is None) == (action_dim is None):
            raise InvalidArgument("give exactly one of num_actions / action_dim")
        self.obs_dim = int(obs_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.kind = "categorical" if num_actions is not None else "gaussian"
        self.out_dim = int(num_actions if num_actions is not None else action_dim)
        self.bins = ValueBins(int(value_bins), float(symlog(value_max)))
        self.value_max = float(value_max)
        self.policy_temp = float(policy_temp)
        self.init_log_std = float(init_log_std)
        self.obs_norm = bool(obs_norm)
        # running observation moments; not trained, updated between rollouts only
        self.obs_stats = {"obs/mean": np.zeros(self.obs_dim), "obs/var": np.ones(self.obs_dim),
                          "obs/count": np.zeros(1)}
        self.params: dict[str, np.ndarray] = {}
        gen = RngStream(seed, stream_id=0x4E37).generator
        for prefix, out in (("pi", self.out_dim), ("v", self.bins.count)):
            sizes = (self.obs_dim, *self.hidden, out)
            for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
                last = i == len(sizes) - 2
                scale = 0.0 if last else 1.0 / np.sqrt(fan_in)
                self.params[f"{prefix}/W{i}"] = gen.standard_normal((fan_in, fan_out)) * scale
                self.params[f"{prefix}/b{i}"] = np.zeros(fan_out)
        if self.kind == "gaussian":
            self.params["pi/log_std"] = np.full(self.out_dim, self.init_log_std)

    # -- architecture ------------------------------------------------------
    @property
    def arch(self) -> dict:
        return {
            "obs_dim": self.obs_dim,
            "hidden": list(self.hidden),
            "kind": self.kind,
            "out_dim": self.out_dim,
            "value_bins": self.bins.count,
            "value_max": self.value_max,
            "policy_temp": self.policy_temp,
            "init_log_std": self.init_log_std,
            "obs_norm": self.obs_norm,
        }

    @classmethod
    def from_arch(cls, arch: dict) -> "Net":
        key = "num_actions" if arch["kind"] == "categorical" else "action_dim"
        return cls(arch["obs_dim"], arch["hidden"], **{key: arch["out_dim"]},
                   value_bins=arch["value_bins"], value_max=arch["value_max"],
                   policy_temp=arch["policy_temp"], init_log_std=arch["init_log_std"],
                   obs_norm=arch.get("obs_norm", False))

    def copy(self) -> "Net":
        other = Net.from_arch(self.arch)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.obs_stats = {k: v.copy() for k, v in self.obs_stats.items()}
        return other

    def update_obs_stats(self, obs) -> None:
        """Fold a batch into the running mean/variance (parallel-moments merge)."""
        x = np.asarray(obs, dtype=np.float64).reshape(-1, self.obs_dim)
        n = float(len(x))
        if n == 0:
            return
        st = self.obs_stats
        count = float(st["obs/count"][0])
        mean_b, var_b = x.mean(axis=0), x.var(axis=0)
        total = count + n
        delta = mean_b - st["obs/mean"]
        m2 = st["obs/var"] * count + var_b * n + delta ** 2 * count * n / total
        st["obs/mean"] = st["obs/mean"] + delta * n / total
        st["obs/var"] = m2 / total
        st["obs/count"] = np.array([total])

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # -- generic MLP ---------------------------------------------------------
    def _check_obs(self, obs) -> np.ndarray:
        x = np.asarray(obs, dtype=np.float64)
        if x.ndim == 1:
            x = x[None]
        if x.shape[-1] != self.obs_dim:
            raise InvalidArgument(f"observation has dim {x.shape[-1]}, network expects {self.obs_dim}")
        if self.obs_norm:
            st = self.obs_stats
            x = np.clip((x - st["obs/mean"]) / np.sqrt(st["obs/var"] + OBS_EPS), -OBS_CLIP, OBS_CLIP)
        return x

    def _mlp(self, prefix: str, x: np.ndarray):
        acts = [x]
        depth = len(self.hidden)
        for i in range(depth + 1):
            z = acts[-1] @ self.params[f"{prefix}/W{i}"] + self.params[f"{prefix}/b{i}"]
            acts.append(np.tanh(z) if i < depth else z)
        return acts[-1], acts

    def _mlp_backward(self, prefix: str, acts, dout: np.ndarray, grads: dict):
        depth = len(self.hidden)
        delta = dout
        for i in range(depth, -1, -1):
            grads[f"{prefix}/W{i}"] = grads.get(f"{prefix}/W{i}", 0) + acts[i].T @ delta
            grads[f"{prefix}/b{i}"] = grads.get(f"{prefix}/b{i}", 0) + delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.params[f"{prefix}/W{i}"].T) * (1.0 - acts[i] ** 2)
        return grads

    # -- policy ----------------------------------------------------------------
    def policy_out(self, obs):
        """Raw policy output: logits (categorical) or mean (Gaussian), with cache."""
        x = self._check_obs(obs)
        return self._mlp("pi", x)

    def policy_probs(self, obs) -> np.ndarray:
        if self.kind != "categorical":
            raise InvalidArgument("policy_probs needs a categorical head")
        logits, _ = self.policy_out(obs)
        return _softmax_rows(logits / self.policy_temp)

    def policy_log_probs(self, logits: np.ndarray) -> np.ndarray:
        return _log_softmax_rows(logits / self.policy_temp)

    def policy_std(self) -> np.ndarray:
        return np.maximum(np.exp(self.params["pi/log_std"]), STD_FLOOR)

    def policy_gaussian(self, obs):
        mean, _ = self.policy_out(obs)
        return mean, np.broadcast_to(self.policy_std(), mean.shape)

    def policy_backward(self, acts, dout: np.ndarray, grads: dict | None = None) -> dict:
        """Back-propagate ``dL/d(raw policy output)`` into ``pi/`` parameters."""
        return self._mlp_backward("pi", acts, dout, {} if grads is None else grads)

    # -- value -------------------------------------------------------------------
    def value_out(self, obs):
        x = self._check_obs(obs)
        return self._mlp("v", x)

    def value_batch(self, obs) -> np.ndarray:
        logits, _ = self.value_out(obs)
        return symexp(_softmax_rows(logits) @ self.bins.centers)

    def value_backward(self, acts, dlogits: np.ndarray, grads: dict | None = None) -> dict:
        return self._mlp_backward("v", acts, dlogits, {} if grads is None else grads)

    # -- checkpoints ---------------------------------------------------------------
    def to_bytes(self, meta: dict | None = None) -> bytes:
        arrays = {**self.params, **self.obs_stats}
        names = list(arrays)
        header = {
            "version": CHECKPOINT_VERSION,
            "arch": self.arch,
            "arrays": [[n, list(arrays[n].shape)] for n in names],
            "meta": meta or {},
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
        for n in names:
            buf.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> tuple["Net", dict]:
        if data[:8] != CHECKPOINT_MAGIC:
            raise InvalidArgument("not an SMX checkpoint")
        (hlen,) = struct.unpack("<I", data[8:12])
        header = json.loads(data[12:12 + hlen])
        if header.get("version") != CHECKPOINT_VERSION:
            raise InvalidArgument(f"unsupported checkpoint version {header.get('version')}")
        net = cls.from_arch(header["arch"])
        offset = 12 + hlen
        params = {}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
            params[name] = arr.astype(np.float64)
            offset += 8 * count
        stats = {k: params.pop(k) for k in list(params) if k.startswith("obs/")}
        if offset != len(data) or set(params) != set(net.params) or set(stats) != set(net.obs_stats):
            raise InvalidArgument("checkpoint arrays do not match its architecture header")
        net.params = params
        net.obs_stats = stats
        return net, header["meta"]


def policy_forward(net: Net, obs) -> PolicyDistribution:
    """Action distribution for a single observation."""
    if net.kind == "categorical":
        return PolicyDistribution.categorical(net.policy_probs(obs)[0])
    mean, std = net.policy_gaussian(obs)
    return PolicyDistribution.gaussian(mean[0], std[0])


def value_forward(net: Net, obs) -> tuple[np.ndarray, float]:
    """Bin probabilities and decoded scalar value for a single observation."""
    logits, _ = net.value_out(obs)
    probs = _softmax_rows(logits)[0]
    return probs, float(two_hot_decode(probs, net.bins))


def save_checkpoint(path, net: Net, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(net.to_bytes(meta))


def load_checkpoint(path) -> tuple[Net, dict]:
    with open(path, "rb") as fh:
        return Net.from_bytes(fh.read())


class AdamState:
    """First/second moment buffers and the step counter."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step = 0


def adam_update(params: dict, grads: dict, state: AdamState, lr: float = 3e-4,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """One bias-corrected Adam step; parameters absent from ``grads`` are left alone."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    out = dict(params)
    for name, g in grads.items():
        # overflow is reported below as a TrainingError, not as a numpy warning
        with np.errstate(over="ignore", invalid="ignore"):
            m = state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
            v = state.v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
            out[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if not np.all(np.isfinite(out[name])):
            raise TrainingError(f"non-finite parameter {name} after update")
    return out
