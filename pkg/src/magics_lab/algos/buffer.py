"""Fixed-capacity ring buffer of transitions with uniform sampling.

The functional half (``buffer_init`` / ``buffer_add`` / ``buffer_sample``)
lives inside jitted training loops; :class:`ReplayBuffer` wraps it for
host-side use.
"""

from __future__ import annotations

from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np


class BufferState(NamedTuple):
    data: dict
    ptr: jax.Array
    size: jax.Array


def transition_spec(obs_dim: int, u_dim: int, d_dim: int, dtype=jnp.float32) -> dict:
    """Fields of one transition (x, u, d, r or g', x', failure flag)."""
    return {
        "obs": ((obs_dim,), dtype),
        "u": ((u_dim,), dtype),
        "d": ((d_dim,), dtype),
        "signal": ((), dtype),
        "next_obs": ((obs_dim,), dtype),
        "failed": ((), jnp.bool_),
    }


def buffer_init(capacity: int, spec: dict) -> BufferState:
    data = {k: jnp.zeros((capacity, *shape), dtype) for k, (shape, dtype) in spec.items()}
    return BufferState(data, jnp.zeros((), jnp.int32), jnp.zeros((), jnp.int32))


def buffer_capacity(state: BufferState) -> int:
    return next(iter(state.data.values())).shape[0]


def buffer_add(state: BufferState, item: dict) -> BufferState:
    cap = buffer_capacity(state)
    data = {k: v.at[state.ptr].set(jnp.asarray(item[k], v.dtype)) for k, v in state.data.items()}
    return BufferState(data, (state.ptr + 1) % cap, jnp.minimum(state.size + 1, cap))


def buffer_sample(state: BufferState, key, batch_size: int) -> dict:
    """Uniform draw with replacement from the filled part of the buffer."""
    idx = jax.random.randint(key, (batch_size,), 0, jnp.maximum(state.size, 1))
    return {k: v[idx] for k, v in state.data.items()}


_add = jax.jit(buffer_add)
_sample = jax.jit(buffer_sample, static_argnums=2)


class ReplayBuffer:
    def __init__(self, capacity: int, obs_dim: int, u_dim: int = 1, d_dim: int = 1, dtype=jnp.float32):
        self.capacity = int(capacity)
        self.state = buffer_init(self.capacity, transition_spec(obs_dim, u_dim, d_dim, dtype))

    def __len__(self):
        return int(self.state.size)

    def add(self, obs, u, d, signal, next_obs, failed=False):
        item = {"obs": obs, "u": np.atleast_1d(u), "d": np.atleast_1d(d), "signal": signal,
                "next_obs": next_obs, "failed": failed}
        self.state = _add(self.state, item)

    def sample(self, key, batch_size: int) -> dict:
        if len(self) == 0:
            raise ValueError("cannot sample from an empty buffer")
        return _sample(self.state, key, batch_size)

    def sample_indices(self, key, batch_size: int) -> np.ndarray:
        return np.asarray(jax.random.randint(key, (batch_size,), 0, max(len(self), 1)))
