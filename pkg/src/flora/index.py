"""Serving side: bit-packed codes, Hamming ranking, hash-table probing, re-ranking.

Codes are packed LSB-first into little-endian uint64 words: entry ``j`` of
a code lives in word ``j // 64`` at bit ``j % 64``, set iff the entry is
+1. Padding bits past ``m`` are always zero, so XOR + popcount over whole
words gives the Hamming distance directly.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from math import comb
from pathlib import Path
from typing import Sequence

import numpy as np

from ._binary import Reader, Writer, atomic_write, read_bytes
from .errors import ConfigError, FormatError, InputError
from .hashmodel import FloraModel, encode_binary, load_model, save_model
from .measures import Measure, measure_score_batch

FLHC_MAGIC = b"FLHC"
FLHC_VERSION = 1
WORD_BITS = 64


def n_words(m: int) -> int:
    return (m + WORD_BITS - 1) // WORD_BITS


@dataclass
class PackedCodes:
    words: np.ndarray  # (n, n_words(m)) uint64
    m: int

    def __post_init__(self):
        self.words = np.ascontiguousarray(self.words, dtype=np.uint64)
        if self.words.ndim != 2 or self.words.shape[1] != n_words(self.m):
            raise InputError(f"words shape {self.words.shape} does not fit m={self.m}")
        tail = self.m % WORD_BITS
        if tail and len(self.words) and np.any(self.words[:, -1] >> np.uint64(tail)):
            raise InputError("padding bits must be zero")

    @property
    def n(self) -> int:
        return self.words.shape[0]

    @property
    def nbytes(self) -> int:
        return self.words.nbytes

    def __len__(self) -> int:
        return self.n

    def __eq__(self, other) -> bool:
        return isinstance(other, PackedCodes) and self.m == other.m and np.array_equal(self.words, other.words)


def pack_codes(signs: np.ndarray) -> PackedCodes:
    signs = np.asarray(signs)
    if signs.ndim != 2:
        raise InputError(f"expected a 2-D sign matrix, got shape {signs.shape}")
    if not np.isin(signs, (-1, 1)).all():
        raise InputError("codes must contain only -1 and +1")
    n, m = signs.shape
    if m == 0:
        raise InputError("codes need at least one bit")
    bits = np.zeros((n, n_words(m) * WORD_BITS), dtype=np.uint8)
    bits[:, :m] = signs > 0
    # packbits little-endian within each byte; bytes laid out little-endian into words
    packed = np.packbits(bits, axis=1, bitorder="little")
    words = packed.view("<u8").astype(np.uint64)
    return PackedCodes(words.reshape(n, n_words(m)), m)


def unpack_codes(codes: PackedCodes) -> np.ndarray:
    as_bytes = codes.words.astype("<u8").view(np.uint8).reshape(codes.n, codes.words.shape[1] * 8)
    bits = np.unpackbits(as_bytes, axis=1, bitorder="little")[:, : codes.m]
    return np.where(bits == 1, 1, -1).astype(np.int8)


def hamming_distance(a: np.ndarray, b: np.ndarray, m: int, m_b: int | None = None) -> int:
    """XOR + popcount distance between two packed rows."""
    if m_b is not None and m_b != m:
        raise InputError(f"code lengths differ: {m} vs {m_b}")
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    if a.shape != (n_words(m),) or b.shape != (n_words(m),):
        raise InputError(f"packed rows must have {n_words(m)} words for m={m}")
    return int(np.bitwise_count(a ^ b).sum())


def hamming_distances(query: np.ndarray, codes: PackedCodes) -> np.ndarray:
    """Distances from one packed query row to every code, as int64."""
    query = np.asarray(query, dtype=np.uint64)
    if query.shape != (codes.words.shape[1],):
        raise InputError(f"query must have {codes.words.shape[1]} words")
    return np.bitwise_count(codes.words ^ query).sum(axis=1, dtype=np.int64)


def hamming_distance_matrix(queries: PackedCodes, codes: PackedCodes, chunk: int = 256) -> np.ndarray:
    if queries.m != codes.m:
        raise InputError(f"code lengths differ: {queries.m} vs {codes.m}")
    out = np.empty((queries.n, codes.n), dtype=np.int64)
    for s in range(0, queries.n, chunk):
        q = queries.words[s:s + chunk, None, :]
        out[s:s + chunk] = np.bitwise_count(q ^ codes.words[None, :, :]).sum(axis=2, dtype=np.int64)
    return out


@dataclass
class RankingResult:
    """Top-t items with their distances (Hamming) or scores (f).

    ``cutoff_value`` is the distance/score of the last returned item,
    ``ties_at_cutoff`` how many items in the whole collection share it, and
    ``size_with_ties`` the list length once every tie at the cutoff is
    included.
    """

    ids: np.ndarray
    values: np.ndarray
    cutoff_value: float | None = None
    ties_at_cutoff: int = 0
    size_with_ties: int = 0
    truncated: bool = False
    empty: bool = False

    def __len__(self) -> int:
        return len(self.ids)


def order_by_distance(distances: np.ndarray) -> np.ndarray:
    """Item ids sorted by (distance asc, id asc)."""
    return np.argsort(distances, kind="stable")


def rank_full_scan(query: np.ndarray, codes: PackedCodes, t: int) -> RankingResult:
    if t < 1:
        raise InputError("t must be >= 1")
    dist = hamming_distances(query, codes)
    truncated = t > codes.n
    t = min(t, codes.n)
    order = order_by_distance(dist)[:t]
    cut = int(dist[order[-1]])
    return RankingResult(
        ids=order,
        values=dist[order],
        cutoff_value=cut,
        ties_at_cutoff=int(np.count_nonzero(dist == cut)),
        size_with_ties=int(np.count_nonzero(dist <= cut)),
        truncated=truncated,
    )


def rank_all(queries: PackedCodes, codes: PackedCodes, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Batched :func:`rank_full_scan`: returns ``(ids, distances)``, each ``(n_queries, t)``."""
    dist = hamming_distance_matrix(queries, codes)
    t = min(t, codes.n)
    order = np.argsort(dist, axis=1, kind="stable")[:, :t]
    return order, np.take_along_axis(dist, order, axis=1)


class HashTable:
    """Exact-code buckets: packed code bytes -> sorted item ids."""

    def __init__(self, codes: PackedCodes):
        self.m = codes.m
        self.n = codes.n
        buckets: dict[bytes, list[int]] = {}
        for i, row in enumerate(codes.words):
            buckets.setdefault(row.tobytes(), []).append(i)
        self.buckets = {k: np.asarray(v, dtype=np.int64) for k, v in buckets.items()}

    def lookup(self, query: np.ndarray) -> np.ndarray:
        return self.buckets.get(np.asarray(query, dtype=np.uint64).tobytes(), np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.buckets)


def hamming_ball(query: np.ndarray, m: int, radius: int) -> list[np.ndarray]:
    """All packed codes within ``radius`` bit flips of ``query`` (radius itself included)."""
    query = np.asarray(query, dtype=np.uint64)
    out = [query.copy()]
    for r in range(1, radius + 1):
        for flips in itertools.combinations(range(m), r):
            probe = query.copy()
            for j in flips:
                probe[j // WORD_BITS] ^= np.uint64(1) << np.uint64(j % WORD_BITS)
            out.append(probe)
    return out


def probe_radius(query: np.ndarray, table: HashTable, radius: int, max_probes: int = 10_000) -> np.ndarray:
    """Union of buckets whose key lies within ``radius`` of ``query``."""
    if radius < 0 or radius > 2:
        raise ConfigError("probing is supported for radius 0, 1 or 2")
    n_probes = sum(comb(table.m, r) for r in range(radius + 1))
    if n_probes > max_probes:
        raise ConfigError(f"radius {radius} at m={table.m} needs {n_probes} probes (cap {max_probes})")
    hits = [table.lookup(p) for p in hamming_ball(query, table.m, radius)]
    return np.unique(np.concatenate(hits)) if hits else np.zeros(0, dtype=np.int64)


@dataclass
class MultiTableIndex:
    """L independently trained hash models over the same item set."""

    models: list[FloraModel]
    codes: list[PackedCodes]
    seeds: list[int | None] = field(default_factory=list)
    tables: list[HashTable] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.models or len(self.models) != len(self.codes):
            raise InputError("need one code set per model and at least one table")
        if len({c.n for c in self.codes}) != 1:
            raise InputError("all tables must index the same item set")
        if not self.seeds:
            self.seeds = [None] * len(self.models)
        if len(self.seeds) != len(self.models):
            raise InputError("one seed per table")
        if not self.tables:
            self.tables = [HashTable(c) for c in self.codes]

    @property
    def n_tables(self) -> int:
        return len(self.models)

    @property
    def n_items(self) -> int:
        return self.codes[0].n

    def prefix(self, n_tables: int) -> "MultiTableIndex":
        return MultiTableIndex(
            self.models[:n_tables], self.codes[:n_tables], self.seeds[:n_tables], self.tables[:n_tables]
        )

    def query_codes(self, user: np.ndarray) -> list[np.ndarray]:
        user = np.asarray(user, dtype=np.float64)[None, :]
        return [pack_codes(encode_binary(model, "user", user)).words[0] for model in self.models]


def build_index(models: Sequence[FloraModel], items: np.ndarray, seeds: Sequence[int | None] | None = None) -> MultiTableIndex:
    codes = [pack_codes(encode_binary(model, "item", items)) for model in models]
    return MultiTableIndex(list(models), codes, list(seeds) if seeds is not None else [])


def probe_radius0(query_codes: Sequence[np.ndarray], index: MultiTableIndex) -> np.ndarray:
    """Sorted union over tables of the items whose code equals the query's."""
    if len(query_codes) != index.n_tables:
        raise InputError(f"got {len(query_codes)} query codes for {index.n_tables} tables")
    hits = [table.lookup(q) for q, table in zip(query_codes, index.tables)]
    return np.unique(np.concatenate(hits))


def rerank_with_f(candidates, user, measure: Measure, items: np.ndarray, k: int) -> RankingResult:
    """Score candidates with ``f`` and keep the best ``k`` (score desc, id asc)."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if len(candidates) == 0:
        return RankingResult(np.zeros(0, dtype=np.int64), np.zeros(0), empty=True)
    if k < 1:
        raise InputError("k must be >= 1")
    scores = measure_score_batch(measure, np.asarray(items)[candidates], user)
    order = np.lexsort((candidates, -scores))
    truncated = k > len(candidates)
    top = order[:k]
    cut = float(scores[top[-1]])
    return RankingResult(
        ids=candidates[top],
        values=scores[top],
        cutoff_value=cut,
        ties_at_cutoff=int(np.count_nonzero(scores == cut)),
        size_with_ties=int(np.count_nonzero(scores >= cut)),
        truncated=truncated,
    )


# -- FLHC code file and index directory --------------------------------------


def codes_to_bytes(codes: PackedCodes) -> bytes:
    w = Writer()
    w.magic(FLHC_MAGIC)
    w.u32(FLHC_VERSION)
    w.u64(codes.n)
    w.u32(codes.m)
    w.array(codes.words, "<u8")
    return w.getvalue()


def read_codes(r: Reader) -> PackedCodes:
    r.magic(FLHC_MAGIC)
    r.version(FLHC_VERSION)
    n = r.u64()
    m_pos = r.offset
    m = r.u32()
    if m == 0:
        r.fail("m must be positive", m_pos)
    start = r.offset
    words = r.array("<u8", n * n_words(m)).reshape(n, n_words(m)).astype(np.uint64)
    try:
        return PackedCodes(words, m)
    except InputError as exc:
        r.fail(str(exc), start)


def codes_from_bytes(buf: bytes) -> PackedCodes:
    r = Reader(buf)
    codes = read_codes(r)
    r.at_end()
    return codes


def save_codes(codes: PackedCodes, path) -> None:
    atomic_write(path, codes_to_bytes(codes))


def load_codes(path) -> PackedCodes:
    r = Reader(read_bytes(path), path=path)
    codes = read_codes(r)
    r.at_end()
    return codes


MANIFEST = "manifest.json"


def save_index(index: MultiTableIndex, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tables = []
    for i, (model, codes) in enumerate(zip(index.models, index.codes)):
        model_file, code_file = f"table{i}.flhm", f"table{i}.flhc"
        save_model(model, directory / model_file)
        save_codes(codes, directory / code_file)
        tables.append({"model": model_file, "codes": code_file, "seed": index.seeds[i]})
    manifest = {"format": "flora-index", "version": 1, "n_tables": index.n_tables,
                "m": index.codes[0].m, "n_items": index.n_items, "tables": tables}
    atomic_write(directory / MANIFEST, json.dumps(manifest, indent=2) + "\n")


def load_index(directory) -> MultiTableIndex:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text())
        entries = manifest["tables"]
        if manifest.get("format") != "flora-index" or len(entries) != manifest["n_tables"]:
            raise ValueError("manifest does not describe a flora index")
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable index manifest: {exc}", path=directory / MANIFEST) from exc
    models = [load_model(directory / e["model"]) for e in entries]
    codes = [load_codes(directory / e["codes"]) for e in entries]
    return MultiTableIndex(models, codes, [e.get("seed") for e in entries])
