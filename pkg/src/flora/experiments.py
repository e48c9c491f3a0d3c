"""Composite experiments: sampling and loss ablations, multi-table probing."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .evaluation import (
    GroundTruth,
    RecallCurve,
    candidate_recall,
    collapsed_bits,
    fpr_radius0,
    hamming_recall_curve,
)
from .hashmodel import encode_binary
from .index import MultiTableIndex, probe_radius0
from .measures import Measure
from .sampler import PositiveCache
from .trainer import TrainConfig, TrainResult, train

SAMPLING_VARIANTS = ("rand", "rand_neg", "rank_neg")
LOSS_VARIANTS = ("L_c", "L_c+L_u", "L_c+L_i", "full")


@dataclass
class VariantRun:
    name: str
    seed: int
    curve: RecallCurve
    collapsed: int
    result: TrainResult


def count_collapsed(model, items, users, threshold: float = 0.95) -> int:
    """Collapsed bits over the item codes plus those over the user codes."""
    return collapsed_bits(encode_binary(model, "item", items), threshold) + collapsed_bits(
        encode_binary(model, "user", users), threshold
    )


def run_variant(name, config, users, items, test_users, measure, gt, cache=None, T=200) -> VariantRun:
    result = train(config, users, items, measure, cache)
    curve = hamming_recall_curve(result.model, test_users, items, gt, T, method=name, seed=config.seed)
    return VariantRun(name, config.seed, curve, count_collapsed(result.model, items, test_users), result)


def loss_variant_config(config: TrainConfig, name: str) -> TrainConfig:
    lu, li = config.hash.lambda_u, config.hash.lambda_i
    weights = {"L_c": (0.0, 0.0), "L_c+L_u": (lu, 0.0), "L_c+L_i": (0.0, li), "full": (lu, li)}
    if name not in weights:
        raise KeyError(name)
    lu, li = weights[name]
    return replace(config, hash=replace(config.hash, lambda_u=lu, lambda_i=li))


def sampling_variant_config(config: TrainConfig, name: str) -> TrainConfig:
    return replace(config, strategy=replace(config.strategy, variant=name))


def ablation(
    kind: str,
    config: TrainConfig,
    users,
    items,
    test_users,
    measure: Measure,
    gt: GroundTruth,
    seeds: Sequence[int],
    variants: Sequence[str] | None = None,
    cache: PositiveCache | None = None,
    T: int = 200,
) -> dict[str, list[VariantRun]]:
    """Train every variant under every seed; ``kind`` is ``"sampling"`` or ``"losses"``."""
    if kind == "sampling":
        variants, make = variants or SAMPLING_VARIANTS, sampling_variant_config
    elif kind == "losses":
        variants, make = variants or LOSS_VARIANTS, loss_variant_config
    else:
        raise ValueError(f"unknown ablation {kind!r}")
    out = {}
    for name in variants:
        runs = []
        for seed in seeds:
            cfg = replace(make(config, name), seed=seed)
            runs.append(run_variant(name, cfg, users, items, test_users, measure, gt, cache, T))
        out[name] = runs
    return out


def mean_curve(runs: Sequence[VariantRun]) -> RecallCurve:
    stacked = np.vstack([r.curve.recall for r in runs])
    first = runs[0].curve
    return RecallCurve(stacked.mean(axis=0), first.k, first.method, None, any(r.curve.padded for r in runs),
                       {"seeds": [r.seed for r in runs]})


def multitable_rows(index: MultiTableIndex, test_users, gt: GroundTruth, table_counts: Sequence[int]):
    """Mean radius-0 candidate recall and FPR per table count, using table prefixes.

    Returns ``(rows, candidates)`` where ``candidates[L][u]`` is the sorted
    candidate id array for user ``u`` with the first ``L`` tables.
    """
    test_users = np.asarray(test_users, dtype=np.float64)
    codes = [index.query_codes(u) for u in test_users]
    rows, candidates = [], {}
    for L in table_counts:
        sub = index.prefix(L)
        cands = [probe_radius0(c[:L], sub) for c in codes]
        rec = np.mean([candidate_recall(c, g) for c, g in zip(cands, gt.ids)])
        fpr = np.mean([fpr_radius0(c, g, index.n_items) for c, g in zip(cands, gt.ids)])
        rows.append((L, float(rec), float(fpr)))
        candidates[L] = cands
    return rows, candidates
