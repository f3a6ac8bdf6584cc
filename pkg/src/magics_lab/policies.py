"""Actor and critic networks.

Networks are plain pytrees (lists of ``(W, b)`` pairs) evaluated by pure
functions, so any of them can be differentiated, vmapped or flattened into a
:class:`~magics_lab.diffcore.ParameterVector`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

from magics_lab.diffcore import ParameterVector

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
_HALF_LOG_2PI = 0.5 * float(np.log(2 * np.pi))


def init_mlp(key, sizes: Sequence[int], dtype=jnp.float32, last_scale: float = 1.0):
    params = []
    keys = jax.random.split(key, len(sizes) - 1)
    for i, (k, n_in, n_out) in enumerate(zip(keys, sizes[:-1], sizes[1:])):
        kw, kb = jax.random.split(k)
        bound = 1.0 / np.sqrt(n_in)
        if i == len(sizes) - 2:
            bound *= last_scale
        W = jax.random.uniform(kw, (n_in, n_out), dtype, -bound, bound)
        b = jax.random.uniform(kb, (n_out,), dtype, -bound, bound)
        params.append((W, b))
    return params


def mlp(params, x):
    for W, b in params[:-1]:
        x = jnp.tanh(x @ W + b)
    W, b = params[-1]
    return x @ W + b


def to_parameter_vector(params) -> ParameterVector:
    arrays = []
    for i, (W, b) in enumerate(params):
        arrays += [(f"layer{i}.W", np.asarray(W, dtype=np.float64)), (f"layer{i}.b", np.asarray(b, dtype=np.float64))]
    return ParameterVector.from_arrays(arrays)


def from_parameter_vector(pv: ParameterVector, dtype=jnp.float32):
    seg = pv.unflatten()
    n = len(pv.layout) // 2
    return [(jnp.asarray(seg[f"layer{i}.W"], dtype), jnp.asarray(seg[f"layer{i}.b"], dtype)) for i in range(n)]


def flatten(params):
    """Flat array plus the function that rebuilds the pytree."""
    return ravel_pytree(params)


@dataclass(frozen=True)
class GaussianPolicy:
    """State -> (mean, log-std) network with optional tanh squashing into ``[low, high]``."""

    obs_dim: int
    act_dim: int
    low: float = -1.0
    high: float = 1.0
    hidden: tuple = (64, 64)
    squash: bool = True

    @property
    def sizes(self):
        return (self.obs_dim, *self.hidden, 2 * self.act_dim)

    def init(self, key, dtype=jnp.float32):
        return init_mlp(key, self.sizes, dtype, last_scale=0.1)

    def forward(self, params, obs):
        out = mlp(params, obs)
        mu, log_std = out[..., :self.act_dim], out[..., self.act_dim:]
        return mu, jnp.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)

    @property
    def _half(self):
        return 0.5 * (self.high - self.low)

    @property
    def _center(self):
        return 0.5 * (self.high + self.low)

    def _squash_log_det(self, z):
        # log |d action / dz| = log(half) + log(1 - tanh(z)^2), written stably
        return jnp.log(self._half) + 2.0 * (jnp.log(2.0) - z - jax.nn.softplus(-2.0 * z))

    def log_prob_pre(self, params, obs, z):
        """Log density of the action produced by pre-squash value ``z``."""
        mu, log_std = self.forward(params, obs)
        eps = (z - mu) / jnp.exp(log_std)
        lp = jnp.sum(-0.5 * eps ** 2 - log_std - _HALF_LOG_2PI, axis=-1)
        if self.squash:
            lp = lp - jnp.sum(self._squash_log_det(z), axis=-1)
        return lp

    def squash_action(self, z):
        return self._center + self._half * jnp.tanh(z) if self.squash else z

    def sample(self, params, obs, key):
        """Reparameterized draw; returns ``(action, log_prob, pre_squash)``."""
        mu, log_std = self.forward(params, obs)
        eps = jax.random.normal(key, mu.shape, mu.dtype)
        z = mu + jnp.exp(log_std) * eps
        lp = jnp.sum(-0.5 * eps ** 2 - log_std - _HALF_LOG_2PI, axis=-1)
        if self.squash:
            lp = lp - jnp.sum(self._squash_log_det(z), axis=-1)
        return self.squash_action(z), lp, z

    def mean_action(self, params, obs):
        mu, _ = self.forward(params, obs)
        return self.squash_action(mu)

    def describe(self) -> dict:
        return {"kind": "gaussian_policy", **asdict(self)}


def sample_action(policy: GaussianPolicy, params, x, rng):
    """``(action, log_prob)`` for one state or a batch, differentiable in ``params``."""
    action, lp, _ = policy.sample(params, x, rng)
    return action, lp


def entropy_estimate(policy: GaussianPolicy, params, states, rng):
    """Monte-Carlo entropy: minus the mean log-probability of fresh samples."""
    states = jnp.atleast_2d(states)
    _, lp, _ = policy.sample(params, states, rng)
    return -jnp.mean(lp)


@dataclass(frozen=True)
class TwinQCritic:
    """Two Q(x, u, d) networks of the same shape: an online one and a slowly tracking copy."""

    obs_dim: int
    u_dim: int
    d_dim: int
    hidden: tuple = (64, 64)

    @property
    def sizes(self):
        return (self.obs_dim + self.u_dim + self.d_dim, *self.hidden, 1)

    def init(self, key, dtype=jnp.float32):
        q1 = init_mlp(key, self.sizes, dtype)
        q2 = jax.tree.map(lambda a: a.copy(), q1)
        return {"q1": q1, "q2": q2}

    def q(self, params, obs, u, d):
        return mlp(params, jnp.concatenate([obs, u, d], axis=-1))[..., 0]

    def describe(self) -> dict:
        return {"kind": "twin_q", **asdict(self)}


@dataclass(frozen=True)
class ValueCritic:
    obs_dim: int
    hidden: tuple = (64, 64)

    @property
    def sizes(self):
        return (self.obs_dim, *self.hidden, 1)

    def init(self, key, dtype=jnp.float32):
        return init_mlp(key, self.sizes, dtype)

    def v(self, params, obs):
        return mlp(params, obs)[..., 0]

    def describe(self) -> dict:
        return {"kind": "value", **asdict(self)}


def polyak(target, online, rate: float):
    return jax.tree.map(lambda t, o: (1.0 - rate) * t + rate * o, target, online)


# -- checkpoints -----------------------------------------------------------------

CHECKPOINT_MAGIC = b"MAGICSCK"
CHECKPOINT_VERSION = 1
SEGMENT_ORDER = ("theta", "psi", "omega1", "omega2")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, segments: dict, architecture: dict, rng_state=None, extra: dict | None = None) -> None:
    """Write a versioned header followed by little-endian float64 parameter payloads.

    Layout: 8-byte magic, uint32 header length, UTF-8 JSON header, then the
    payload of each present segment in the order theta, psi, omega1, omega2.
    """
    names = [n for n in SEGMENT_ORDER if n in segments]
    unknown = set(segments) - set(SEGMENT_ORDER)
    if unknown:
        raise CheckpointError(f"unknown checkpoint segments: {sorted(unknown)}")
    pvs = {n: to_parameter_vector(segments[n]) for n in names}
    header = {
        "format": "magics-checkpoint",
        "version": CHECKPOINT_VERSION,
        "architecture": architecture,
        "rng_state": None if rng_state is None else np.asarray(rng_state).astype(np.uint32).tolist(),
        "segments": [{"name": n, "length": len(pvs[n]), "layout": [[k, list(s)] for k, s in pvs[n].layout]}
                     for n in names],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(pvs[n].values.astype("<f8").tobytes())


def load_checkpoint(path, dtype=jnp.float32) -> tuple[dict, dict]:
    """Returns ``(header, segments)`` with segments rebuilt as network pytrees."""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n].decode())
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    offset = 12 + n
    segments = {}
    for seg in header["segments"]:
        length = seg["length"]
        values = np.frombuffer(data, dtype="<f8", count=length, offset=offset).astype(np.float64)
        offset += 8 * length
        layout = tuple((k, tuple(s)) for k, s in seg["layout"])
        segments[seg["name"]] = from_parameter_vector(ParameterVector(values, layout), dtype)
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return header, segments
