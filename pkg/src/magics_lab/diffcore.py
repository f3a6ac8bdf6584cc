"""First- and second-order derivative queries over flat parameter vectors.

Every query takes a scalar function written with ``jax.numpy`` and a flat
parameter array (or a :class:`ParameterVector`).  Second derivatives use
forward-over-reverse composition, so Hessian blocks are exact up to
floating-point rounding.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from math import prod
from typing import Callable, Mapping, Sequence

import jax
import jax.numpy as jnp
import numpy as np
import scipy.linalg

DEFAULT_HESSIAN_CAP = 20_000

ScalarFunction = Callable[..., jax.Array]


class HessianTooLargeError(ValueError):
    pass


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class ParameterVector:
    """Flat real vector plus the ordered ``(name, shape)`` segments it packs."""

    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...] = field(default=())

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 1:
            raise ValueError("ParameterVector values must be one-dimensional")
        layout = tuple((str(n), tuple(int(d) for d in s)) for n, s in self.layout)
        if not layout:
            layout = (("p", (values.size,)),)
        names = [n for n, _ in layout]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate segment names in layout: {names}")
        total = sum(prod(s) for _, s in layout)
        if total != values.size:
            raise ValueError(f"layout describes {total} entries but values has {values.size}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", layout)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray] | Sequence[tuple[str, np.ndarray]]):
        items = list(arrays.items()) if isinstance(arrays, Mapping) else list(arrays)
        layout = tuple((name, tuple(np.shape(a))) for name, a in items)
        if not items:
            return cls(np.zeros(0), (("p", (0,)),))
        values = np.concatenate([np.ravel(np.asarray(a)) for _, a in items])
        return cls(values, layout)

    def unflatten(self) -> dict[str, np.ndarray]:
        out, start = {}, 0
        for name, shape in self.layout:
            size = prod(shape)
            out[name] = self.values[start:start + size].reshape(shape)
            start += size
        return out

    def segment(self, name: str) -> np.ndarray:
        return self.unflatten()[name]

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(np.asarray(values), self.layout)

    def __len__(self):
        return self.values.size

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def _as_array(p) -> jax.Array:
    if isinstance(p, ParameterVector):
        p = p.values
    return jnp.asarray(p)


def _check_finite(out, what: str):
    out = np.asarray(out)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{what} produced non-finite values (overflow in the objective?)")
    return out


def gradient(f: ScalarFunction, p, *args) -> np.ndarray:
    """Gradient of ``f(p, *args)`` with respect to ``p``."""
    return _check_finite(jax.grad(f)(_as_array(p), *args), "gradient")


def hessian_vector_product(f: ScalarFunction, p, v, *args) -> np.ndarray:
    """``(d^2 f / dp^2) v`` via a forward-mode derivative of the gradient."""
    p, v = _as_array(p), jnp.asarray(v, dtype=_as_array(p).dtype)
    if v.shape != p.shape:
        raise ValueError(f"vector has shape {v.shape}, parameters have {p.shape}")
    _, hv = jax.jvp(lambda q: jax.grad(f)(q, *args), (p,), (v,))
    return _check_finite(hv, "hessian_vector_product")


def mixed_partial_block(f: Callable[..., jax.Array], p, q, *args) -> np.ndarray:
    """Cross block ``d^2 f / dp dq`` of a two-argument function, shape ``(|p|, |q|)``."""
    p, q = _as_array(p), _as_array(q)
    if p.ndim != 1 or q.ndim != 1:
        raise ValueError("mixed_partial_block expects flat parameter vectors")
    block = jax.jacfwd(jax.grad(f, argnums=0), argnums=1)(p, q, *args)
    return _check_finite(block, "mixed_partial_block")


def dense_hessian(f: ScalarFunction, p, *args, cap: int = DEFAULT_HESSIAN_CAP,
                  symmetrize: bool = True) -> np.ndarray:
    """Materialized Hessian of ``f`` at ``p``; refuses beyond ``cap`` parameters."""
    p = _as_array(p)
    if p.size > cap:
        raise HessianTooLargeError(
            f"refusing to materialize a {p.size}x{p.size} Hessian (cap is {cap} parameters)")
    h = _check_finite(jax.jacfwd(jax.grad(f))(p, *args), "dense_hessian")
    return 0.5 * (h + h.T) if symmetrize else h


def solve_linear(A, b, damping: float = 0.0) -> np.ndarray:
    """Direct dense solve of ``(A + damping * I) x = b``."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if b.shape[0] != A.shape[0]:
        raise ValueError(f"right-hand side has {b.shape[0]} rows, matrix has {A.shape[0]}")
    if damping < 0:
        raise ValueError("damping must be non-negative")
    M = A + damping * np.eye(A.shape[0]) if damping else A
    try:
        # scipy only warns on ill-conditioning; a numerically rank-deficient system counts as singular
        with warnings.catch_warnings():
            warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
            x = scipy.linalg.solve(M, b, check_finite=True)
    except (scipy.linalg.LinAlgError, scipy.linalg.LinAlgWarning, ValueError) as exc:
        raise SingularSystemError(f"singular linear system (damping={damping})") from exc
    if not np.all(np.isfinite(x)):
        raise SingularSystemError(f"singular linear system (damping={damping})")
    return x
