import os
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np
import pytest

import magics_lab  # noqa: F401  (enables double precision)

ROOT = Path(__file__).resolve().parents[1]
CACHE_ROOT = Path(os.environ.get("MAGICS_LAB_CACHE", ROOT / ".experiment_cache"))


def tanh_net(n_in: int = 2, n_hidden: int = 9):
    """Scalar 2-layer tanh network ``f(p, x)`` and its parameter count (37 with the defaults)."""
    sizes = [(n_in, n_hidden), (n_hidden,), (n_hidden,), ()]
    n = n_in * n_hidden + 2 * n_hidden + 1

    def f(p, x):
        i = 0
        W1 = p[i:i + n_in * n_hidden].reshape(n_in, n_hidden); i += n_in * n_hidden  # noqa: E702
        b1 = p[i:i + n_hidden]; i += n_hidden  # noqa: E702
        w2 = p[i:i + n_hidden]; i += n_hidden  # noqa: E702
        h = jnp.tanh(x @ W1 + b1)
        return jnp.sum(jnp.tanh(h @ w2 + p[i]) ** 2) + 0.1 * jnp.sum(p ** 2) * jnp.sum(x ** 2)

    del sizes
    return f, n


def central_difference(f, step=1e-5):
    """Jitted central-difference gradient ``(p, *args) -> df/dp`` of a scalar ``f(p, *args)``."""
    def fd(p, *args):
        eye = jnp.eye(p.size, dtype=p.dtype)
        fp = jax.vmap(lambda e: f(p + step * e, *args))(eye)
        fm = jax.vmap(lambda e: f(p - step * e, *args))(eye)
        return (fp - fm) / (2 * step)
    return jax.jit(fd)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
