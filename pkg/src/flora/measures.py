"""Frozen similarity measures ``f(item, user) -> [0, 1]``.

A measure is a black box to the rest of the package: the hash model is
trained only from its scores. Neural measures get random frozen weights
from a seed (or come from a checkpoint); any fixed nonlinear network is a
valid target.

All scoring goes through row-stable matrix products so that scoring a
single item and scoring it inside a batch give bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._binary import Reader, Writer, atomic_write, read_bytes
from .errors import InputError
from .nn import MLP, init_mlp, read_mlp, sigmoid, write_mlp

KINDS = ("mlp_concate", "mlp_em_sum", "deepfm_lite", "scaled_cosine")

FLMS_MAGIC = b"FLMS"
FLMS_VERSION = 1

HIDDEN_SIZES = (64, 64)
EMBED_DIM = 64
FM_FACTORS = 8


@dataclass(frozen=True, eq=False)
class Measure:
    """A frozen binary function.

    ``nets`` holds the networks in a kind-specific order:

    * mlp_concate: ``(mlp,)`` over ``[user, item]``
    * mlp_em_sum: ``(user_embed, item_embed, mlp)``
    * deepfm_lite: ``(mlp,)`` over ``[user, item]``, plus ``factors``
    * scaled_cosine: no parameters
    """

    kind: str
    user_dim: int
    item_dim: int
    nets: tuple[MLP, ...] = ()
    factors: np.ndarray | None = None

    @property
    def frozen(self) -> bool:
        return True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown measure kind {self.kind!r}; expected one of {KINDS}")
        if self.user_dim <= 0 or self.item_dim <= 0:
            raise InputError("measure dims must be positive")
        if self.kind == "scaled_cosine" and self.user_dim != self.item_dim:
            raise InputError("scaled_cosine needs user_dim == item_dim")
        expected = {"mlp_concate": 1, "mlp_em_sum": 3, "deepfm_lite": 1, "scaled_cosine": 0}[self.kind]
        if len(self.nets) != expected:
            raise InputError(f"{self.kind} needs {expected} networks, got {len(self.nets)}")
        joint = self.user_dim + self.item_dim
        if self.kind in ("mlp_concate", "deepfm_lite") and self.nets[0].in_dim != joint:
            raise InputError("network input does not match user_dim + item_dim")
        if self.kind == "mlp_em_sum":
            ue, ie, mlp = self.nets
            if ue.in_dim != self.user_dim or ie.in_dim != self.item_dim:
                raise InputError("embedding inputs do not match measure dims")
            if not ue.out_dim == ie.out_dim == mlp.in_dim:
                raise InputError("embedded dims must match before the merge")
        if self.kind == "deepfm_lite":
            if self.factors is None or self.factors.ndim != 2 or self.factors.shape[0] != joint:
                raise InputError("deepfm_lite needs a (user_dim + item_dim, k) factor matrix")
        for net in self.nets:
            net.freeze()
        if self.factors is not None:
            self.factors.flags.writeable = False


def make_measure(
    kind: str,
    user_dim: int,
    item_dim: int,
    seed: int = 0,
    hidden: tuple[int, ...] = HIDDEN_SIZES,
    embed_dim: int = EMBED_DIM,
    n_factors: int = FM_FACTORS,
) -> Measure:
    if kind not in KINDS:
        raise InputError(f"unknown measure kind {kind!r}; expected one of {KINDS}")
    if user_dim <= 0 or item_dim <= 0:
        raise InputError("measure dims must be positive")
    rng = np.random.default_rng(seed)
    joint = user_dim + item_dim
    head_acts = ["relu"] * len(hidden)
    if kind == "scaled_cosine":
        return Measure(kind, user_dim, item_dim)
    if kind == "mlp_concate":
        mlp = init_mlp([joint, *hidden, 1], head_acts + ["sigmoid"], rng)
        return Measure(kind, user_dim, item_dim, (mlp,))
    if kind == "mlp_em_sum":
        ue = init_mlp([user_dim, embed_dim], ["identity"], rng)
        ie = init_mlp([item_dim, embed_dim], ["identity"], rng)
        mlp = init_mlp([embed_dim, *hidden, 1], head_acts + ["sigmoid"], rng)
        return Measure(kind, user_dim, item_dim, (ue, ie, mlp))
    # deepfm_lite: the MLP branch emits a logit; the sigmoid is applied after adding the FM term
    mlp = init_mlp([joint, *hidden, 1], head_acts + ["identity"], rng)
    limit = np.sqrt(6.0 / (joint + n_factors))
    factors = rng.uniform(-limit, limit, size=(joint, n_factors))
    return Measure(kind, user_dim, item_dim, (mlp,), factors)


def _as_user(measure: Measure, user) -> np.ndarray:
    user = np.asarray(user, dtype=np.float64)
    if user.shape != (measure.user_dim,):
        raise InputError(f"user vector must have shape ({measure.user_dim},), got {user.shape}")
    return user


def _as_items(measure: Measure, items) -> np.ndarray:
    items = np.asarray(items, dtype=np.float64)
    if items.ndim != 2 or items.shape[1] != measure.item_dim:
        raise InputError(f"items must have shape (n, {measure.item_dim}), got {items.shape}")
    return items


def _fm_term(z: np.ndarray, factors: np.ndarray) -> np.ndarray:
    zv = np.einsum("ij,jk->ik", z, factors)
    z2v2 = np.einsum("ij,jk->ik", z * z, factors * factors)
    return 0.5 * (zv * zv - z2v2).sum(axis=1)


def measure_score_batch(measure: Measure, items, user, *, item_embedding: np.ndarray | None = None) -> np.ndarray:
    """Score every row of ``items`` against one user.

    ``item_embedding`` lets mlp_em_sum callers reuse the item-side embedding
    across users; it must come from :func:`embed_items`.
    """
    user = _as_user(measure, user)
    items = _as_items(measure, items)
    n = items.shape[0]
    if n == 0:
        return np.zeros(0)
    kind = measure.kind
    if kind == "scaled_cosine":
        dots = np.einsum("ij,j->i", items, user)
        norms = np.sqrt(np.einsum("ij,ij->i", items, items) * np.dot(user, user))
        cos = np.divide(dots, norms, out=np.zeros(n), where=norms > 0)
        return np.clip(0.5 * (cos + 1.0), 0.0, 1.0)
    if kind == "mlp_em_sum":
        ue, ie, mlp = measure.nets
        if item_embedding is None:
            item_embedding = ie.forward_rowwise(items)
        merged = item_embedding + ue.forward_rowwise(user[None, :])
        return mlp.forward_rowwise(merged)[:, 0]
    z = np.hstack([np.broadcast_to(user, (n, measure.user_dim)), items])
    if kind == "mlp_concate":
        return measure.nets[0].forward_rowwise(z)[:, 0]
    logit = measure.nets[0].forward_rowwise(z)[:, 0] + _fm_term(z, measure.factors)
    return sigmoid(logit)


def measure_score(measure: Measure, item, user) -> float:
    item = np.asarray(item, dtype=np.float64)
    if item.shape != (measure.item_dim,):
        raise InputError(f"item vector must have shape ({measure.item_dim},), got {item.shape}")
    return float(measure_score_batch(measure, item[None, :], user)[0])


def embed_items(measure: Measure, items) -> np.ndarray | None:
    """Precompute the item-side embedding for mlp_em_sum; None for other kinds."""
    if measure.kind != "mlp_em_sum":
        return None
    return measure.nets[1].forward_rowwise(_as_items(measure, items))


def score_matrix(measure: Measure, users, items) -> np.ndarray:
    """Full ``(n_users, n_items)`` score table, one user at a time."""
    users = np.asarray(users, dtype=np.float64)
    items = _as_items(measure, items)
    if users.ndim != 2 or users.shape[1] != measure.user_dim:
        raise InputError(f"users must have shape (n, {measure.user_dim}), got {users.shape}")
    emb = embed_items(measure, items)
    out = np.empty((users.shape[0], items.shape[0]))
    for i, user in enumerate(users):
        out[i] = measure_score_batch(measure, items, user, item_embedding=emb)
    return out


# -- FLMS checkpoint ----------------------------------------------------------


def measure_to_bytes(measure: Measure) -> bytes:
    w = Writer()
    w.magic(FLMS_MAGIC)
    w.u32(FLMS_VERSION)
    w.u8(KINDS.index(measure.kind))
    w.u32(measure.user_dim)
    w.u32(measure.item_dim)
    w.u32(len(measure.nets))
    for net in measure.nets:
        write_mlp(w, net)
    factors = measure.factors if measure.factors is not None else np.zeros((0, 0))
    w.u32(factors.shape[0])
    w.u32(factors.shape[1])
    w.array(factors, "<f8")
    return w.getvalue()


def read_measure(r: Reader) -> Measure:
    r.magic(FLMS_MAGIC)
    r.version(FLMS_VERSION)
    kind_pos = r.offset
    kind_id = r.u8()
    if kind_id >= len(KINDS):
        r.fail(f"unknown measure kind id {kind_id}", kind_pos)
    user_dim = r.u32()
    item_dim = r.u32()
    nets = tuple(read_mlp(r) for _ in range(r.u32()))
    rows, cols = r.u32(), r.u32()
    factors = r.array("<f8", rows * cols).reshape(rows, cols) if rows * cols else None
    try:
        return Measure(KINDS[kind_id], user_dim, item_dim, nets, factors)
    except InputError as exc:
        r.fail(f"inconsistent measure: {exc}")


def measure_from_bytes(buf: bytes) -> Measure:
    r = Reader(buf)
    m = read_measure(r)
    r.at_end()
    return m


def save_measure(measure: Measure, path) -> None:
    atomic_write(path, measure_to_bytes(measure))


def load_measure(path) -> Measure:
    r = Reader(read_bytes(path), path=path)
    m = read_measure(r)
    r.at_end()
    return m
