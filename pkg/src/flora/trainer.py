"""Minibatch training of the hash model against a frozen measure."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ._binary import atomic_write
from .errors import InputError, NumericError
from .evaluation import ground_truth_from_scores, hamming_rankings, hit_counts
from .hashmodel import Batch, FloraModel, HashConfig, build_model, loss_total
from .measures import Measure
from .nn import Adam
from .sampler import PositiveCache, SamplingStrategy, build_positive_cache, sample_minibatch

log = logging.getLogger(__name__)

LOG_HEADER = "iter,loss_total,loss_c,loss_u,loss_i,val_recall"


@dataclass
class TrainConfig:
    iterations: int = 20_000
    batch_size: int = 256
    seed: int = 0
    strategy: SamplingStrategy = field(default_factory=SamplingStrategy)
    hash: HashConfig = field(default_factory=HashConfig)
    eval_every: int = 1000
    validation_fraction: float = 0.1
    lr: float = 1e-3
    # validation metric: Top-val_k recall at val_t retrieved items
    val_k: int = 10
    val_t: int = 100
    # the split stays fixed across training seeds so caches can be shared
    split_seed: int = 0

    def __post_init__(self):
        if self.iterations <= 0:
            raise InputError("iterations must be positive")
        if self.batch_size <= 0 or self.eval_every <= 0:
            raise InputError("batch_size and eval_every must be positive")
        if not 0.0 < self.validation_fraction < 1.0:
            raise InputError("validation_fraction must lie in (0, 1)")


@dataclass
class LogRow:
    iteration: int
    loss_total: float
    loss_c: float
    loss_u: float
    loss_i: float
    val_recall: float

    def csv(self) -> str:
        return (
            f"{self.iteration},{self.loss_total:.10g},{self.loss_c:.10g},"
            f"{self.loss_u:.10g},{self.loss_i:.10g},{self.val_recall:.10g}"
        )


@dataclass
class TrainResult:
    model: FloraModel
    log: list[LogRow]
    best_iteration: int
    best_recall: float
    train_users: np.ndarray
    val_users: np.ndarray

    def log_csv(self) -> str:
        return "\n".join([LOG_HEADER] + [row.csv() for row in self.log]) + "\n"


def write_log_csv(result: TrainResult, path) -> None:
    atomic_write(path, result.log_csv())


def split_users(n_users: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic ``(train_idx, val_idx)`` split, both sorted."""
    n_val = int(round(fraction * n_users))
    if n_val < 1 or n_val >= n_users:
        raise InputError(f"cannot hold out {fraction:.0%} of {n_users} users")
    perm = np.random.default_rng(seed).permutation(n_users)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def prepare_cache(config: TrainConfig, users, items, measure: Measure) -> PositiveCache:
    """Score table over all given users (training and validation alike)."""
    return build_positive_cache(users, items, measure, config.strategy.n_pos)


def validation_recall(model: FloraModel, users, items, gt_ids, k: int, t: int) -> float:
    ids, _ = hamming_rankings(model, users, items, t)
    hits = hit_counts(ids, gt_ids, t)
    return float(hits[:, -1].mean() / k)


def train(
    config: TrainConfig,
    users: np.ndarray,
    items: np.ndarray,
    measure: Measure,
    cache: PositiveCache | None = None,
) -> TrainResult:
    """Train one hash model and return the checkpoint with the best validation recall."""
    users = np.asarray(users, dtype=np.float64)
    items = np.asarray(items, dtype=np.float64)
    if users.shape[1] != measure.user_dim or items.shape[1] != measure.item_dim:
        raise InputError("user/item dims do not match the measure")
    if config.val_t > len(items) or config.val_k > len(items):
        raise InputError("validation cutoffs exceed the item count")
    train_idx, val_idx = split_users(len(users), config.validation_fraction, config.split_seed)
    if cache is None:
        cache = prepare_cache(config, users, items, measure)
    if cache.scores.shape != (len(users), len(items)):
        raise InputError("cache was built for different users/items")
    val_gt = ground_truth_from_scores(cache.scores[val_idx], config.val_k).ids
    val_users = users[val_idx]

    model = build_model(measure.user_dim, measure.item_dim, config.hash, np.random.default_rng([config.seed, 1]))
    rng = np.random.default_rng([config.seed, 2])
    opt = Adam(model.parameters(), lr=config.lr, names=model.parameter_names())

    rows: list[LogRow] = []
    best_model, best_iter, best_recall = None, 0, -1.0
    window = np.zeros(4)
    window_n = 0
    for it in range(1, config.iterations + 1):
        pairs = sample_minibatch(config.strategy, cache, config.batch_size, rng, user_pool=train_idx)
        batch = Batch(users[pairs.user_ids], items[pairs.item_ids], pairs.targets)
        balance_items = items[rng.integers(len(items), size=config.batch_size)]
        lb = loss_total(model, batch, config.hash, balance_items)
        if not np.isfinite(lb.total):
            raise NumericError(f"non-finite loss at iteration {it}")
        opt.step(lb.grads)
        window += (lb.total, lb.consistency, lb.balance, lb.independence)
        window_n += 1
        if it % config.eval_every == 0 or it == config.iterations:
            recall = validation_recall(model, val_users, items, val_gt, config.val_k, config.val_t)
            mean = window / window_n
            rows.append(LogRow(it, *mean, recall))
            log.info("iter %d loss %.5f val recall@%d %.4f", it, mean[0], config.val_t, recall)
            window[:] = 0.0
            window_n = 0
            if recall > best_recall:
                best_model, best_iter, best_recall = model.copy(), it, recall
    return TrainResult(best_model, rows, best_iter, best_recall, train_idx, val_idx)


@dataclass
class GridResult:
    best: tuple[float, float]
    table: list[tuple[float, float, float]]
    results: dict[tuple[float, float], TrainResult] = field(repr=False, default_factory=dict)


def _train_cell(args):
    config, users, items, measure, cache = args
    return train(config, users, items, measure, cache)


def grid_search_lambdas(
    config: TrainConfig,
    users,
    items,
    measure: Measure,
    grid_u=(0.1, 1.0, 10.0),
    grid_i=(0.1, 1.0, 10.0),
    iterations: int | None = None,
    cache: PositiveCache | None = None,
    n_jobs: int = 1,
) -> GridResult:
    """Train one model per (lambda_u, lambda_i) cell and keep the best by validation recall.

    Ties go to the smaller lambda_u, then the smaller lambda_i.
    """
    grid_u, grid_i = sorted(grid_u), sorted(grid_i)
    if not grid_u or not grid_i:
        raise InputError("lambda grids must be non-empty")
    if cache is None:
        cache = prepare_cache(config, users, items, measure)
    cells = [(lu, li) for lu in grid_u for li in grid_i]
    jobs = []
    for lu, li in cells:
        cfg = replace(config, hash=replace(config.hash, lambda_u=lu, lambda_i=li))
        if iterations is not None:
            cfg = replace(cfg, iterations=iterations)
        jobs.append((cfg, users, items, measure, cache))
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as pool:
            outcomes = list(pool.map(_train_cell, jobs))
    else:
        outcomes = [_train_cell(j) for j in jobs]
    results = dict(zip(cells, outcomes))
    table = [(lu, li, results[(lu, li)].best_recall) for lu, li in cells]
    best = cells[0]
    for cell in cells[1:]:
        if results[cell].best_recall > results[best].best_recall:
            best = cell
    return GridResult(best, table, results)
