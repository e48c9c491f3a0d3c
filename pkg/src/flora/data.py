"""Embedding sets: the FLMX matrix format, CSV ingestion, synthetic generation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._binary import Reader, Writer, atomic_write, read_bytes
from .errors import FormatError, InputError

FLMX_MAGIC = b"FLMX"
FLMX_VERSION = 1
ROLES = ("user", "item")


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    role: str = "item"

    def __post_init__(self):
        if self.role not in ROLES:
            raise InputError(f"role must be one of {ROLES}, got {self.role!r}")
        v = np.asarray(self.vectors)
        if v.ndim != 2:
            raise InputError(f"vectors must be a matrix, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise InputError("vectors contain non-finite values")
        self.vectors = v

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.n


def matrix_to_bytes(es: EmbeddingSet) -> bytes:
    w = Writer()
    w.magic(FLMX_MAGIC)
    w.u32(FLMX_VERSION)
    w.u8(ROLES.index(es.role))
    w.u64(es.n)
    w.u32(es.dim)
    w.array(es.vectors, "<f4")
    return w.getvalue()


def matrix_from_bytes(buf: bytes, path=None) -> EmbeddingSet:
    r = Reader(buf, path=path)
    r.magic(FLMX_MAGIC)
    r.version(FLMX_VERSION)
    role_pos = r.offset
    role = r.u8()
    if role >= len(ROLES):
        r.fail(f"unknown role id {role}", role_pos)
    n = r.u64()
    dim = r.u32()
    start = r.offset
    data = r.array("<f4", n * dim).reshape(n, dim)
    r.at_end()
    if not np.isfinite(data).all():
        r.fail("payload contains non-finite values", start)
    return EmbeddingSet(data.astype(np.float32), ROLES[role])


def write_matrix(es: EmbeddingSet, path) -> None:
    """Store as float32; values already representable in float32 round-trip exactly."""
    atomic_write(path, matrix_to_bytes(es))


def read_matrix(path) -> EmbeddingSet:
    try:
        buf = read_bytes(path)
    except OSError as exc:
        raise FormatError(f"cannot read matrix: {exc.strerror}", path=path) from exc
    return matrix_from_bytes(buf, path=path)


def read_csv_embeddings(path, role: str = "item") -> tuple[np.ndarray, EmbeddingSet]:
    """Read ``id,v1,...,vd`` rows (optional header). Returns ``(ids, set)`` in file order."""
    ids, rows = [], []
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            try:
                vals = [float(c) for c in rec[1:]]
                ident = int(rec[0])
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise FormatError(f"line {lineno}: expected 'id,v1,...,vd'", path=path) from None
            if rows and len(vals) != len(rows[0]):
                raise FormatError(f"line {lineno}: {len(vals)} values, expected {len(rows[0])}", path=path)
            ids.append(ident)
            rows.append(vals)
    if not rows:
        raise FormatError("no embedding rows found", path=path)
    return np.asarray(ids, dtype=np.int64), EmbeddingSet(np.asarray(rows, dtype=np.float32), role)


def gen_synth(
    n_users: int,
    n_items: int,
    dim: int,
    seed: int = 0,
    distribution: str = "gaussian",
    n_test_users: int = 0,
    item_dim: int | None = None,
    n_clusters: int = 16,
    cluster_spread: float = 0.3,
) -> tuple[EmbeddingSet, EmbeddingSet, EmbeddingSet | None]:
    """Random user/item vectors, stored at float32 precision.

    ``distribution="clusters"`` draws cluster centers on the unit sphere and
    adds isotropic noise of scale ``cluster_spread`` per coordinate; users
    and items share the centers when their dims agree.
    Returns ``(train_users, items, test_users)``; test users are ``None``
    when ``n_test_users`` is 0.
    """
    if min(n_users, n_items, dim) <= 0 or n_test_users < 0:
        raise InputError("counts and dim must be positive")
    item_dim = dim if item_dim is None else item_dim
    rng = np.random.default_rng(seed)
    total_users = n_users + n_test_users
    if distribution == "gaussian":
        u = rng.standard_normal((total_users, dim))
        v = rng.standard_normal((n_items, item_dim))
    elif distribution == "clusters":
        def centers(d):
            c = rng.standard_normal((n_clusters, d))
            return c / np.linalg.norm(c, axis=1, keepdims=True)

        cu = centers(dim)
        cv = cu if item_dim == dim else centers(item_dim)
        u = cu[rng.integers(n_clusters, size=total_users)] + cluster_spread / np.sqrt(dim) * rng.standard_normal((total_users, dim))
        v = cv[rng.integers(n_clusters, size=n_items)] + cluster_spread / np.sqrt(item_dim) * rng.standard_normal((n_items, item_dim))
    else:
        raise InputError(f"unknown distribution {distribution!r}")
    u = u.astype(np.float32)
    v = v.astype(np.float32)
    train = EmbeddingSet(u[:n_users], "user")
    test = EmbeddingSet(u[n_users:], "user") if n_test_users else None
    return train, EmbeddingSet(v, "item"), test


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment. Keys use flag spelling (dashes or underscores)."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value", path=path)
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out
