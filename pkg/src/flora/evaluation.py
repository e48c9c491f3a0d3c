"""Ground truth, recall curves and radius-0 false-positive rate.

FPR here is ``|candidates outside the Top-K| / (n_items - K)``: retrieved
non-relevant items over all non-relevant items.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._binary import atomic_write
from .errors import InputError
from .hashmodel import FloraModel, encode_binary
from .index import hamming_distances, pack_codes, rank_all, rerank_with_f
from .measures import Measure, embed_items, measure_score_batch
from .sampler import descending_order

DEFAULT_T = 200


@dataclass
class GroundTruth:
    ids: np.ndarray  # (n_users, K), best first
    scores: np.ndarray  # (n_users, K)

    @property
    def k(self) -> int:
        return self.ids.shape[1]

    @property
    def n_users(self) -> int:
        return self.ids.shape[0]

    def sets(self) -> list[set[int]]:
        return [set(row.tolist()) for row in self.ids]


def ground_truth(users, items, measure: Measure, k: int, item_ids=None) -> GroundTruth:
    """Exact Top-K per user by brute-force scoring of every item.

    ``item_ids`` gives each item row its id (default: row index); ties in
    ``f`` are broken by ascending id.
    """
    users = np.asarray(users, dtype=np.float64)
    items = np.asarray(items, dtype=np.float64)
    if not 1 <= k <= len(items):
        raise InputError(f"K must be in 1..{len(items)}, got {k}")
    ids = np.arange(len(items)) if item_ids is None else np.asarray(item_ids, dtype=np.int64)
    if len(ids) != len(items):
        raise InputError("one id per item row")
    emb = embed_items(measure, items)
    out_ids = np.empty((len(users), k), dtype=np.int64)
    out_scores = np.empty((len(users), k))
    for i, user in enumerate(users):
        s = measure_score_batch(measure, items, user, item_embedding=emb)
        order = np.lexsort((ids, -s))[:k]
        out_ids[i] = ids[order]
        out_scores[i] = s[order]
    return GroundTruth(out_ids, out_scores)


def ground_truth_from_scores(scores: np.ndarray, k: int) -> GroundTruth:
    order = descending_order(scores)[:, :k]
    return GroundTruth(order, np.take_along_axis(scores, order, axis=1))


def recall_at(ranking, gt, t: int) -> float:
    """Fraction of ``gt`` found in the first ``t`` entries of ``ranking``."""
    if t < 1:
        raise InputError("t must be >= 1")
    gt = set(int(g) for g in gt)
    if not gt:
        raise InputError("ground truth set is empty")
    hits = len(gt.intersection(int(r) for r in list(ranking)[:t]))
    return hits / len(gt)


@dataclass
class RecallCurve:
    recall: np.ndarray  # recall[t - 1] for t = 1..T
    k: int
    method: str = ""
    seed: int | None = None
    padded: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def thresholds(self) -> np.ndarray:
        return np.arange(1, len(self.recall) + 1)

    def at(self, t: int) -> float:
        return float(self.recall[t - 1])

    def to_csv(self) -> str:
        rows = ["t,recall"] + [f"{t},{r:.10g}" for t, r in zip(self.thresholds, self.recall)]
        return "\n".join(rows) + "\n"

    def write_csv(self, path) -> None:
        atomic_write(path, self.to_csv())


def hit_counts(rankings, gt_ids: np.ndarray, T: int) -> np.ndarray:
    """Cumulative hits ``(n_users, T)``; short rankings repeat their last value."""
    n_users = len(gt_ids)
    out = np.zeros((n_users, T), dtype=np.int64)
    for u in range(n_users):
        row = np.asarray(rankings[u])[:T]
        hits = np.isin(row, gt_ids[u]).cumsum()
        out[u, : len(hits)] = hits
        if len(hits) < T:
            out[u, len(hits):] = hits[-1] if len(hits) else 0
    return out


def recall_curve(rankings, gt: GroundTruth, T: int = DEFAULT_T, method: str = "", seed=None) -> RecallCurve:
    """Mean over users of recall@t, t = 1..T."""
    if len(rankings) != gt.n_users:
        raise InputError(f"{len(rankings)} rankings for {gt.n_users} ground-truth users")
    if T < 1:
        raise InputError("T must be >= 1")
    padded = any(len(r) < T for r in rankings)
    hits = hit_counts(rankings, gt.ids, T)
    return RecallCurve(hits.mean(axis=0) / gt.k, gt.k, method, seed, padded)


def hamming_rankings(model: FloraModel, users, items, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-T item ids and distances per user from a full Hamming scan."""
    q = pack_codes(encode_binary(model, "user", np.asarray(users)))
    c = pack_codes(encode_binary(model, "item", np.asarray(items)))
    return rank_all(q, c, T)


def hamming_recall_curve(model: FloraModel, users, items, gt: GroundTruth, T: int = DEFAULT_T, **kw) -> RecallCurve:
    ids, _ = hamming_rankings(model, users, items, T)
    return recall_curve(ids, gt, T, **kw)


def reranked_recall_curve(
    model: FloraModel, users, items, measure: Measure, gt: GroundTruth, T: int = DEFAULT_T, **kw
) -> RecallCurve:
    """Recall of Hamming ranking followed by re-scoring with ``f``.

    At cutoff ``t`` the candidate set is every item at Hamming distance no
    greater than the t-th item's (ties included); the best ``t`` of those
    by ``f`` are returned.
    """
    users = np.asarray(users, dtype=np.float64)
    items = np.asarray(items, dtype=np.float64)
    q = encode_binary(model, "user", users)
    codes = pack_codes(encode_binary(model, "item", items))
    q_packed = pack_codes(q).words
    hits = np.zeros((len(users), T), dtype=np.int64)
    for u in range(len(users)):
        dist = hamming_distances(q_packed[u], codes)
        order = np.argsort(dist, kind="stable")
        t_max = min(T, len(order))
        cut = dist[order[t_max - 1]]
        pool = order[: int(np.count_nonzero(dist <= cut))]
        # one f call per candidate; per-t re-sorts reuse these scores
        scored = rerank_with_f(pool, users[u], measure, items, len(pool))
        rank_of = {int(i): r for r, i in enumerate(scored.ids)}
        pool_rank = np.array([rank_of[int(i)] for i in pool])
        gt_set = gt.ids[u]
        is_hit = np.isin(pool, gt_set)
        for t in range(1, T + 1):
            tt = min(t, t_max)
            cut_t = dist[order[tt - 1]]
            size = int(np.searchsorted(dist[pool], cut_t, side="right"))
            cand_ranks = pool_rank[:size]
            top = np.argsort(cand_ranks, kind="stable")[:tt]
            hits[u, t - 1] = int(is_hit[:size][top].sum())
    return RecallCurve(hits.mean(axis=0) / gt.k, gt.k, kw.get("method", "flora-r"), kw.get("seed"), T > len(items))


def fpr_radius0(candidates, gt, n_items: int) -> float:
    candidates = set(int(c) for c in candidates)
    gt = set(int(g) for g in gt)
    negatives = n_items - len(gt)
    if negatives <= 0:
        return 0.0
    return len(candidates - gt) / negatives


def candidate_recall(candidates, gt) -> float:
    gt = set(int(g) for g in gt)
    return len(gt.intersection(int(c) for c in candidates)) / len(gt)


def write_multitable_csv(rows, path) -> None:
    """``rows`` of ``(L, recall, fpr)``."""
    lines = ["L,recall,fpr"] + [f"{L},{r:.10g},{f:.10g}" for L, r, f in rows]
    atomic_write(path, "\n".join(lines) + "\n")


def write_gnuplot(curves: dict[str, RecallCurve], path) -> None:
    """Whitespace-separated table, one column per curve, for ``plot ... using 1:n``."""
    names = list(curves)
    T = max(len(c.recall) for c in curves.values())
    lines = ["# t " + " ".join(n.replace(" ", "_") for n in names)]
    for t in range(T):
        vals = [f"{curves[n].recall[min(t, len(curves[n].recall) - 1)]:.10g}" for n in names]
        lines.append(f"{t + 1} " + " ".join(vals))
    atomic_write(path, "\n".join(lines) + "\n")


def collapsed_bits(codes: np.ndarray, threshold: float = 0.95) -> int:
    """Bits whose mean sign over the rows exceeds ``threshold`` in magnitude."""
    return int(np.count_nonzero(np.abs(np.asarray(codes, dtype=np.float64).mean(axis=0)) > threshold))
