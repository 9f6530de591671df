"""Dense float64 matrices, a named parameter registry and a gradient checker.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. The helpers here
add the shape and finiteness checks the rest of the package relies on.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Dict, Iterator, Mapping

import numpy as np

from .errors import DimensionError, NumericError

DTYPE = np.float64


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=DTYPE)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"{name}: expected 2-D array, got shape {m.shape}")
    return m


def check_finite(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name}: non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return check_finite(a @ b, "matmul result")


class ParamSet:
    """Ordered mapping of tensor name -> (value, gradient accumulator)."""

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None):
        self._values: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._grads: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, value in (tensors or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self._values:
            raise KeyError(f"duplicate tensor name {name!r}")
        v = np.array(value, dtype=DTYPE)
        self._values[name] = v
        self._grads[name] = np.zeros_like(v)

    def names(self) -> list[str]:
        return list(self._values)

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name: str, value) -> None:
        v = np.asarray(value, dtype=DTYPE)
        if v.shape != self._values[name].shape:
            raise DimensionError(f"{name}: shape {v.shape} != {self._values[name].shape}")
        self._values[name] = v.copy()

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def grads(self) -> Dict[str, np.ndarray]:
        return {k: g.copy() for k, g in self._grads.items()}

    def accumulate(self, name: str, g) -> None:
        g = np.asarray(g, dtype=DTYPE)
        if g.shape != self._grads[name].shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} != {self._grads[name].shape}")
        self._grads[name] += g

    def accumulate_all(self, grads: Mapping[str, np.ndarray]) -> None:
        for name, g in grads.items():
            self.accumulate(name, g)

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, v in self._values.items():
            out.add(name, v)
            out._grads[name] = self._grads[name].copy()
        return out

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self._values.values()))

    def equals(self, other: "ParamSet") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self[n], other[n]) for n in self.names()
        )


def finite_diff_check(
    f: Callable[[ParamSet], float],
    params: ParamSet,
    analytic_grads: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    names: list[str] | None = None,
) -> float:
    """Max relative error between central differences of ``f`` and ``analytic_grads``.

    The per-coordinate error is ``|g_fd - g_an| / max(1e-8, |g_fd| + |g_an|)``.
    ``params`` is perturbed in place and restored before returning.
    """
    worst = 0.0
    for name in names if names is not None else list(analytic_grads):
        value = params[name]
        g_an = np.asarray(analytic_grads[name], dtype=DTYPE)
        if g_an.shape != value.shape:
            raise DimensionError(f"{name}: analytic gradient shape {g_an.shape} != {value.shape}")
        flat = value.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            f_plus = f(params)
            flat[idx] = orig - eps
            f_minus = f(params)
            flat[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"{name}[{idx}]: objective is not finite")
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            a = g_an.reshape(-1)[idx]
            err = abs(g_fd - a) / max(1e-8, abs(g_fd) + abs(a))
            worst = max(worst, err)
    return worst


def neumaier_sum(arrays) -> np.ndarray:
    """Elementwise compensated sum, insensitive to summation order up to ~1 ulp."""
    it = iter(arrays)
    total = np.array(next(it), dtype=DTYPE)
    comp = np.zeros_like(total)
    for a in it:
        a = np.asarray(a, dtype=DTYPE)
        t = total + a
        big = np.abs(total) >= np.abs(a)
        comp += np.where(big, (total - t) + a, (a - t) + total)
        total = t
    return total + comp
