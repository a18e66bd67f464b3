"""Binomial Brownian filtration.

Level ``n`` holds ``2**n`` nodes stored contiguously; node ``(n, k)`` has
children ``(n+1, 2k)`` (increment ``+sqrt(dt)``) and ``(n+1, 2k+1)``
(increment ``-sqrt(dt)``), each with probability 1/2.  An adapted process is
one array per level whose first axis is the node offset, so path-dependent
storage is impossible by construction.

Expectations are computed by repeated pairwise averaging up to the root.  This
fixes the summation order, which makes the tower property hold bitwise.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

MAX_STEPS = 20


class TreeError(ValueError):
    pass


class TreeTooLargeError(TreeError):
    pass


class LevelMismatchError(TreeError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseTree:
    M: int
    T: float
    W: tuple  # W[n] has shape (2**n,)

    @property
    def dt(self) -> float:
        return self.T / self.M

    @property
    def sqrt_dt(self) -> float:
        return math.sqrt(self.dt)

    @property
    def n_nodes(self) -> int:
        return 2 ** (self.M + 1) - 1

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.M + 1)

    def time(self, n: int) -> float:
        return n * self.dt

    def width(self, n: int) -> int:
        return 2**n

    def increments(self, n: int) -> np.ndarray:
        """``Delta W`` from level ``n`` to level ``n+1``, indexed by child."""
        return np.tile([self.sqrt_dt, -self.sqrt_dt], 2**n)


def build_tree(M: int, T: float) -> NoiseTree:
    if int(M) != M or M < 1:
        raise TreeError(f"need at least one time step, got M={M}")
    if M > MAX_STEPS:
        raise TreeTooLargeError(f"M={M} exceeds the memory guard M <= {MAX_STEPS}")
    if not T > 0:
        raise TreeError(f"horizon must be positive, got T={T}")
    M = int(M)
    s = math.sqrt(T / M)
    W = [np.zeros(1)]
    for n in range(M):
        W.append(np.repeat(W[-1], 2) + np.tile([s, -s], 2**n))
    return NoiseTree(M=M, T=float(T), W=tuple(W))


class AdaptedField:
    """One array per tree level; the first axis indexes nodes of the level.

    A level array whose first axis has length 1 is broadcast over the level
    (a deterministic value).  Trailing axes hold the spatial values.
    """

    def __init__(self, levels: Sequence[np.ndarray]):
        self._levels = [np.asarray(v, dtype=float) for v in levels]
        for n, v in enumerate(self._levels):
            if v.ndim == 0 or v.shape[0] not in (1, 2**n):
                raise LevelMismatchError(
                    f"level {n} must have leading size 1 or {2**n}, got shape {v.shape}"
                )

    def __len__(self) -> int:
        return len(self._levels)

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self._levels)

    @property
    def value_shape(self) -> tuple:
        return self._levels[0].shape[1:]

    def raw(self, n: int) -> np.ndarray:
        """Level array as stored (possibly leading size 1)."""
        return self._levels[n]

    def level(self, n: int) -> np.ndarray:
        """Level array materialized to ``(2**n, ...)`` (read-only view if broadcast)."""
        v = self._levels[n]
        if v.shape[0] == 2**n:
            return v
        return np.broadcast_to(v, (2**n,) + v.shape[1:])

    def value(self, n: int, offset: int) -> np.ndarray | float:
        v = self._levels[n]
        out = v[0] if v.shape[0] == 1 else v[offset]
        return out

    def is_deterministic(self) -> bool:
        return all(v.shape[0] == 1 for v in self._levels)

    def map(self, fn: Callable[[int, np.ndarray], np.ndarray]) -> "AdaptedField":
        return AdaptedField([fn(n, v) for n, v in enumerate(self._levels)])

    def __mul__(self, c: float) -> "AdaptedField":
        return AdaptedField([c * v for v in self._levels])

    __rmul__ = __mul__

    def __add__(self, other: "AdaptedField") -> "AdaptedField":
        if len(other) != len(self):
            raise LevelMismatchError("adding adapted fields with different level counts")
        return AdaptedField([a + b for a, b in zip(self._levels, other._levels)])

    def __neg__(self) -> "AdaptedField":
        return self * -1.0

    @classmethod
    def zeros(cls, n_levels: int, value_shape: tuple = ()) -> "AdaptedField":
        return cls([np.zeros((1,) + tuple(value_shape)) for _ in range(n_levels)])

    @classmethod
    def deterministic(cls, values: Sequence[np.ndarray]) -> "AdaptedField":
        return cls([np.asarray(v, dtype=float)[None, ...] for v in values])

    @classmethod
    def from_function(
        cls, tree: NoiseTree, fn: Callable[[int, float, np.ndarray], np.ndarray], n_levels: int
    ) -> "AdaptedField":
        """``fn(n, t_n, W_n)`` returns an array with leading size ``2**n`` or 1."""
        return cls([np.asarray(fn(n, tree.time(n), tree.W[n]), dtype=float) for n in range(n_levels)])


def brownian_motion(tree: NoiseTree) -> AdaptedField:
    return AdaptedField(list(tree.W))


def halve(values: np.ndarray) -> np.ndarray:
    """Conditional expectation of a full level array onto the parent level."""
    return 0.5 * (values[0::2] + values[1::2])


def martingale_part(values: np.ndarray, sqrt_dt: float) -> np.ndarray:
    """``(v_+ - v_-) / (2 sqrt(dt))`` onto the parent level."""
    return (values[0::2] - values[1::2]) / (2.0 * sqrt_dt)


def conditional_expectation(tree: NoiseTree, process: AdaptedField, node: tuple[int, int]):
    """``E[X_{n+1} | F_n]`` at node ``(n, offset)``."""
    n, k = node
    if not (0 <= n < tree.M and n + 1 < len(process)):
        raise LevelMismatchError(f"process is not defined at level {n + 1}")
    if not 0 <= k < 2**n:
        raise LevelMismatchError(f"node offset {k} out of range for level {n}")
    nxt = process.level(n + 1)
    return 0.5 * (nxt[2 * k] + nxt[2 * k + 1])


def expectation(tree: NoiseTree, process: AdaptedField | np.ndarray, level: int):
    """Uniform average over the nodes of ``level``."""
    if level < 0 or level > tree.M:
        raise LevelMismatchError(f"level {level} outside 0..{tree.M}")
    if isinstance(process, AdaptedField):
        if level >= len(process):
            raise LevelMismatchError(f"process is not defined at level {level}")
        v = process.level(level)
    else:
        v = np.asarray(process, dtype=float)
        if v.shape[0] not in (1, 2**level):
            raise LevelMismatchError(f"array with leading size {v.shape[0]} is not level {level}")
    return mean_over_level(v)


def mean_over_level(v: np.ndarray):
    """Pairwise-halving mean over the leading axis (length 1 or a power of 2)."""
    v = np.asarray(v, dtype=float)
    while v.shape[0] > 1:
        v = halve(v)
    return v[0]


def ito_integral(tree: NoiseTree, integrand: AdaptedField) -> np.ndarray:
    """Per-leaf ``sum_n Z(node_n) Delta W_n`` along each root-to-leaf path."""
    if len(integrand) < tree.M:
        raise LevelMismatchError(
            f"integrand defined on {len(integrand)} levels, need {tree.M} (0..M-1)"
        )
    acc = np.zeros((1,) + integrand.value_shape)
    for n in range(tree.M):
        z = integrand.level(n)
        dW = tree.increments(n).reshape((-1,) + (1,) * len(integrand.value_shape))
        acc = np.repeat(acc, 2, axis=0) + np.repeat(z, 2, axis=0) * dW
    return acc


def to_csv(process: AdaptedField) -> str:
    """Scalar adapted process as ``level,offset,value`` rows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["level", "offset", "value"])
    for n in range(len(process)):
        v = process.level(n)
        for k in range(v.shape[0]):
            w.writerow([n, k, f"{float(v[k]):.17g}"])
    return buf.getvalue()
