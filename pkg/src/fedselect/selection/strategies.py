"""Client key-selection strategies.

All strategies emit distinct, in-range keys and are pure functions of their
inputs and the ``numpy.random.Generator`` they are handed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..exceptions import BadAlpha, TooManyKeys


def _as_counts(counts) -> np.ndarray:
    if isinstance(counts, dict):
        size = max(counts) + 1 if counts else 0
        arr = np.zeros(size)
        for k, v in counts.items():
            arr[k] = v
        return arr
    return np.asarray(counts, dtype=np.float64)


def keys_top_m(counts, m: int) -> list:
    """The ``m`` most frequent keys, by count descending then key ascending.

    Keys with zero count are never returned, so fewer than ``m`` keys come
    back when fewer have positive count.

    >>> keys_top_m({0: 5, 3: 2, 7: 2, 9: 1}, 2)
    [0, 3]
    """
    counts = _as_counts(counts)
    positive = np.flatnonzero(counts > 0)
    # lexsort: last key is primary
    order = np.lexsort((positive, -counts[positive]))
    return [int(k) for k in positive[order[:max(int(m), 0)]]]


def keys_random_from_local(counts, m: int, rng: np.random.Generator) -> list:
    """Uniform sample of ``m`` keys without replacement from the local support."""
    counts = _as_counts(counts)
    positive = np.flatnonzero(counts > 0)
    take = min(int(m), positive.size)
    return [int(k) for k in rng.choice(positive, size=take, replace=False)]


def keys_random_top(counts, m: int, rng: np.random.Generator) -> list:
    """Sample ``m`` keys from the ``2m`` most frequent local keys."""
    pool = np.asarray(keys_top_m(counts, 2 * int(m)), dtype=np.int64)
    take = min(int(m), pool.size)
    return [int(k) for k in rng.choice(pool, size=take, replace=False)]


def keys_uniform_random(
    K: int,
    m: int,
    rng: np.random.Generator | None = None,
    shared_per_round: bool = False,
    round_seed=None,
) -> list:
    """Uniform sample of ``m`` distinct keys from ``[0, K)``.

    With ``shared_per_round`` the draw depends only on ``round_seed``, so
    every client of a round gets the same keys.
    """
    if m > K:
        raise TooManyKeys(f"cannot draw {m} distinct keys from a keyspace of {K}")
    if shared_per_round:
        if round_seed is None:
            raise ValueError("shared_per_round needs a round_seed")
        rng = np.random.default_rng(round_seed)
    elif rng is None:
        raise ValueError("an rng is required for independent keys")
    return [int(k) for k in rng.choice(K, size=int(m), replace=False)]


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def mixed_counts(alpha: float, n: int, h: int) -> tuple:
    """Structured and random key counts ``(round(alpha*n), round(alpha*h))``, each at least 1."""
    if not 0 < alpha <= 1:
        raise BadAlpha(f"alpha must lie in (0, 1], got {alpha}")
    return max(1, round_half_away(alpha * n)), max(1, round_half_away(alpha * h))


def keys_mixed_alpha(alpha: float, structured_counts, n: int, h: int, rng, shared_per_round=False, round_seed=None):
    """Structured top keys over ``n`` features plus random keys over ``h`` units."""
    m, d = mixed_counts(alpha, n, h)
    structured = keys_top_m(structured_counts, m)
    random_keys = keys_uniform_random(h, d, rng, shared_per_round, round_seed)
    return structured, random_keys


@dataclass(frozen=True)
class KeyStrategy:
    """Configured strategy: ``kind`` is one of ``top``, ``random``,
    ``random_top``, ``uniform`` or ``all``.

    ``all`` returns every key of the plan in ascending order (the trivial
    selection).
    """

    kind: str
    m: int | None = None
    shared_per_round: bool = False

    KINDS = ("top", "random", "random_top", "uniform", "all")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown key strategy {self.kind!r}")

    @property
    def structured(self) -> bool:
        return self.kind in ("top", "random", "random_top")

    def choose(self, K: int, counts=None, rng=None, round_seed=None) -> list:
        m = K if self.m is None else self.m
        if self.kind == "all":
            return list(range(K))
        if self.kind == "top":
            return keys_top_m(counts, m)
        if self.kind == "random":
            return keys_random_from_local(counts, m, rng)
        if self.kind == "random_top":
            return keys_random_top(counts, m, rng)
        return keys_uniform_random(K, m, rng, self.shared_per_round, round_seed)
