"""Training-pair sampling from separate user and item sets.

Strategies:

* ``rand``: user and item both uniform.
* ``rand_neg``: with probability ``p`` a uniform draw from the user's
  top-``n_pos`` items under ``f``, otherwise a uniform draw from the rest.
* ``rank_neg``: as ``rand_neg`` but the negative is drawn with probability
  proportional to 1/rank in the user's descending ``f`` ordering of the
  negatives.
* ``score_neg``: negative drawn with probability proportional to its
  ``f`` score (alternative reading of the negative distribution).

Targets come from the score table cached when the cache is built; ``f`` is
frozen so they are exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ._binary import atomic_write
from .errors import ConfigError, InputError
from .measures import Measure, score_matrix

VARIANTS = ("rand", "rand_neg", "rank_neg", "score_neg")


@dataclass(frozen=True)
class SamplingStrategy:
    variant: str = "rank_neg"
    p: float = 0.5
    n_pos: int = 10

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InputError(f"unknown sampling variant {self.variant!r}; expected one of {VARIANTS}")
        if not 0.0 <= self.p <= 1.0:
            raise InputError("p must lie in [0, 1]")
        if self.n_pos < 1:
            raise InputError("n_pos must be >= 1")


@dataclass(frozen=True, eq=False)
class PositiveCache:
    """Per-user score table plus, optionally, the positive/negative partition.

    ``positives[u]`` holds the top ``n_pos`` item ids by ``f`` (descending,
    ties by ascending id); ``negatives[u]`` holds the rest in the same order,
    capped at ``negative_cap`` entries when a cap was requested.
    """

    scores: np.ndarray
    n_pos: int | None = None
    positives: np.ndarray | None = None
    negatives: np.ndarray | None = None
    negative_cap: int | None = None

    @property
    def n_users(self) -> int:
        return self.scores.shape[0]

    @property
    def n_items(self) -> int:
        return self.scores.shape[1]

    @property
    def n_neg(self) -> int:
        return self.n_items - (self.n_pos or 0)

    @property
    def partitioned(self) -> bool:
        return self.positives is not None

    def ranking(self, u: int) -> np.ndarray:
        """Full descending order for user ``u`` (only when uncapped)."""
        if not self.partitioned or self.negative_cap is not None:
            raise ConfigError("full ranking needs an uncapped partitioned cache")
        return np.concatenate([self.positives[u], self.negatives[u]])


def descending_order(scores: np.ndarray) -> np.ndarray:
    """Row-wise item order by score desc, ties by ascending id."""
    return np.argsort(-scores, axis=-1, kind="stable")


def build_positive_cache(
    users: np.ndarray,
    items: np.ndarray,
    measure: Measure,
    n_pos: int | None,
    negative_cap: int | None = None,
    scores: np.ndarray | None = None,
) -> PositiveCache:
    """Score every (user, item) pair once and split off the top ``n_pos`` items.

    ``n_pos=None`` keeps only the score table, which is all ``rand`` needs.
    A precomputed ``scores`` table can be passed to skip scoring.
    """
    items = np.asarray(items, dtype=np.float64)
    if items.ndim != 2 or len(items) == 0:
        raise InputError("item set must be a non-empty matrix")
    if scores is None:
        scores = score_matrix(measure, users, items)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(users), len(items)):
        raise InputError(f"score table shape {scores.shape} does not match users x items")
    scores.flags.writeable = False
    if n_pos is None:
        return PositiveCache(scores)
    if not 1 <= n_pos < len(items):
        raise InputError(f"n_pos must be in 1..{len(items) - 1}, got {n_pos}")
    if negative_cap is not None and negative_cap < 1:
        raise InputError("negative_cap must be >= 1")
    order = descending_order(scores)
    positives = order[:, :n_pos].copy()
    neg_end = None if negative_cap is None else n_pos + negative_cap
    negatives = order[:, n_pos:neg_end].copy()
    if negative_cap is not None and negatives.shape[1] >= len(items) - n_pos:
        negative_cap = None
    return PositiveCache(scores, n_pos, positives, negatives, negative_cap)


@lru_cache(maxsize=32)
def _rank_inverse_cdf(n: int) -> np.ndarray:
    cdf = np.cumsum(rank_inverse_weights(n))
    cdf[-1] = 1.0
    return cdf


def rank_inverse_weights(n: int) -> np.ndarray:
    """Probabilities proportional to 1/rank for ranks 1..n."""
    if n < 1:
        raise InputError("n must be >= 1")
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64)
    return w / w.sum()


@dataclass
class PairBatch:
    user_ids: np.ndarray
    item_ids: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.user_ids)


def _remainder_item(cache: PositiveCache, u: int, rng: np.random.Generator) -> int:
    # uniform over the negatives that did not make it into the capped list
    excluded = np.sort(np.concatenate([cache.positives[u], cache.negatives[u]]))
    while True:
        v = int(rng.integers(cache.n_items))
        pos = np.searchsorted(excluded, v)
        if pos == len(excluded) or excluded[pos] != v:
            return v


def _negative_items(strategy, cache, users, rng) -> np.ndarray:
    n_neg = cache.n_neg
    size = len(users)
    if strategy.variant == "score_neg":
        if cache.negative_cap is not None:
            raise ConfigError("score_neg needs an uncapped cache")
        out = np.empty(size, dtype=np.int64)
        for j, u in enumerate(users):
            neg = cache.negatives[u]
            cdf = np.cumsum(cache.scores[u, neg])
            out[j] = neg[min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), n_neg - 1)]
        return out
    if strategy.variant == "rank_neg":
        ranks = np.searchsorted(_rank_inverse_cdf(n_neg), rng.random(size), side="right")
        ranks = np.minimum(ranks, n_neg - 1)
    else:
        ranks = rng.integers(n_neg, size=size)
    stored = cache.negatives.shape[1]
    out = cache.negatives[users, np.minimum(ranks, stored - 1)]
    for j in np.flatnonzero(ranks >= stored):
        out[j] = _remainder_item(cache, int(users[j]), rng)
    return out


def sample_minibatch(
    strategy: SamplingStrategy,
    cache: PositiveCache,
    batch_size: int,
    rng: np.random.Generator,
    user_pool: np.ndarray | None = None,
) -> PairBatch:
    """Draw ``batch_size`` i.i.d. pairs; users are uniform over ``user_pool`` (default: all)."""
    if batch_size < 1:
        raise InputError("batch_size must be >= 1")
    if cache is None:
        raise ConfigError("sampling needs a cache (build_positive_cache)")
    if strategy.variant != "rand":
        if not cache.partitioned:
            raise ConfigError(f"{strategy.variant} needs a cache built with n_pos")
        if cache.n_pos != strategy.n_pos:
            raise ConfigError(f"cache has n_pos={cache.n_pos}, strategy wants {strategy.n_pos}")
    if user_pool is None:
        users = rng.integers(cache.n_users, size=batch_size)
    else:
        user_pool = np.asarray(user_pool, dtype=np.int64)
        if len(user_pool) == 0:
            raise InputError("user_pool is empty")
        users = user_pool[rng.integers(len(user_pool), size=batch_size)]
    if strategy.variant == "rand":
        items = rng.integers(cache.n_items, size=batch_size)
    else:
        take_pos = rng.random(batch_size) < strategy.p
        pos_items = cache.positives[users, rng.integers(strategy.n_pos, size=batch_size)]
        items = pos_items.copy()
        neg_rows = np.flatnonzero(~take_pos)
        if len(neg_rows):
            items[neg_rows] = _negative_items(strategy, cache, users[neg_rows], rng)
    return PairBatch(users.astype(np.int64), items.astype(np.int64), cache.scores[users, items])


def sample_pair(strategy: SamplingStrategy, cache: PositiveCache, rng: np.random.Generator, user_pool=None):
    """One ``(user_id, item_id, target)`` draw."""
    b = sample_minibatch(strategy, cache, 1, rng, user_pool)
    return int(b.user_ids[0]), int(b.item_ids[0]), float(b.targets[0])


def pair_probabilities(strategy: SamplingStrategy, cache: PositiveCache, u: int) -> np.ndarray:
    """Exact probability of drawing each item for user ``u`` (uncapped caches)."""
    probs = np.zeros(cache.n_items)
    if strategy.variant == "rand":
        probs[:] = 1.0 / cache.n_items
        return probs
    if cache.negative_cap is not None:
        raise ConfigError("exact probabilities need an uncapped cache")
    neg = cache.negatives[u]
    probs[cache.positives[u]] = strategy.p / strategy.n_pos
    if strategy.variant == "rand_neg":
        w = np.full(len(neg), 1.0 / len(neg))
    elif strategy.variant == "rank_neg":
        w = rank_inverse_weights(len(neg))
    else:
        s = cache.scores[u, neg]
        w = s / s.sum()
    probs[neg] = (1.0 - strategy.p) * w
    return probs


def dump_cache(cache: PositiveCache, path, top_negatives: int = 10) -> None:
    """Tab-separated debug dump: user id, positive ids, leading negative ids."""
    if not cache.partitioned:
        raise ConfigError("nothing to dump: cache has no partition")
    lines = ["user\tpositives\ttop_negatives"]
    for u in range(cache.n_users):
        pos = ",".join(map(str, cache.positives[u]))
        neg = ",".join(map(str, cache.negatives[u, :top_negatives]))
        lines.append(f"{u}\t{pos}\t{neg}")
    atomic_write(path, "\n".join(lines) + "\n")
