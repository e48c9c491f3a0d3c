"""Asymmetric hashing network and its training objective.

Users go through ``user_tower`` and items through ``item_tower``; both
feed the same ``shared`` head, whose last layer is tanh with ``m``
outputs. Continuous codes live in [-1, 1]^m and binary codes are their
signs.

Loss functions return ``(value, grads)`` where ``grads`` lines up with
``FloraModel.parameters()``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._binary import Reader, Writer, atomic_write, read_bytes
from .errors import InputError
from .nn import MLP, init_mlp, read_mlp, write_mlp

FLHM_MAGIC = b"FLHM"
FLHM_VERSION = 1
MAX_BITS = 4096


@dataclass
class HashConfig:
    m: int = 128
    # calibrated at desk scale; the balance term is O(m) while the
    # achievable consistency gain is O(0.1), so lambda_u must stay small
    lambda_u: float = 3e-5
    lambda_i: float = 0.1
    tower_sizes: tuple[int, ...] = (256, 256)
    shared_sizes: tuple[int, ...] = (128,)
    tower_activation: str = "relu"

    def __post_init__(self):
        if not 0 < self.m <= MAX_BITS:
            raise InputError(f"m must be in 1..{MAX_BITS}, got {self.m}")
        if self.lambda_u < 0 or self.lambda_i < 0:
            raise InputError("loss weights must be non-negative")
        if not self.tower_sizes:
            raise InputError("towers need at least one layer")
        self.tower_sizes = tuple(int(s) for s in self.tower_sizes)
        self.shared_sizes = tuple(int(s) for s in self.shared_sizes)


class FloraModel:
    """Two towers plus one shared head.

    The shared head is a single :class:`MLP` object referenced by both
    encoding paths, so an update made for one domain is seen by the other.
    """

    def __init__(self, user_tower: MLP, item_tower: MLP, shared: MLP):
        if user_tower.out_dim != shared.in_dim or item_tower.out_dim != shared.in_dim:
            raise InputError("tower outputs must match the shared head input")
        if shared.layers[-1].activation != "tanh":
            raise InputError("the shared head must end in tanh")
        if shared.out_dim > MAX_BITS:
            raise InputError(f"at most {MAX_BITS} bits supported")
        self.user_tower = user_tower
        self.item_tower = item_tower
        self.shared = shared

    @property
    def m(self) -> int:
        return self.shared.out_dim

    @property
    def user_dim(self) -> int:
        return self.user_tower.in_dim

    @property
    def item_dim(self) -> int:
        return self.item_tower.in_dim

    def tower(self, domain: str) -> MLP:
        if domain == "user":
            return self.user_tower
        if domain == "item":
            return self.item_tower
        raise InputError(f"domain must be 'user' or 'item', got {domain!r}")

    def parameters(self) -> list[np.ndarray]:
        return self.user_tower.parameters() + self.item_tower.parameters() + self.shared.parameters()

    def parameter_names(self) -> list[str]:
        names = []
        for prefix, net in (("user_tower", self.user_tower), ("item_tower", self.item_tower), ("shared", self.shared)):
            for i in range(len(net.layers)):
                names += [f"{prefix}.{i}.weights", f"{prefix}.{i}.bias"]
        return names

    def copy(self) -> "FloraModel":
        return FloraModel(self.user_tower.copy(), self.item_tower.copy(), self.shared.copy())

    @property
    def output_weights(self) -> np.ndarray:
        """Weights of the final shared layer, shape ``(d, m)``."""
        return self.shared.layers[-1].weights


def build_model(user_dim: int, item_dim: int, config: HashConfig, rng: np.random.Generator) -> FloraModel:
    act = config.tower_activation
    tower_acts = [act] * len(config.tower_sizes)
    user = init_mlp([user_dim, *config.tower_sizes], tower_acts, rng)
    item = init_mlp([item_dim, *config.tower_sizes], tower_acts, rng)
    shared_sizes = [config.tower_sizes[-1], *config.shared_sizes, config.m]
    shared = init_mlp(shared_sizes, [act] * len(config.shared_sizes) + ["tanh"], rng)
    return FloraModel(user, item, shared)


def encode_continuous(model: FloraModel, domain: str, x: np.ndarray) -> np.ndarray:
    """Relaxed codes in [-1, 1]^m for a batch of users or items."""
    return model.shared(model.tower(domain)(x))


def binarize(h: np.ndarray) -> np.ndarray:
    """Sign with sign(0) = +1, as int8."""
    return np.where(np.asarray(h) >= 0, 1, -1).astype(np.int8)


def encode_binary(model: FloraModel, domain: str, x: np.ndarray) -> np.ndarray:
    return binarize(encode_continuous(model, domain, x))


# -- objective ----------------------------------------------------------------


@dataclass
class Batch:
    users: np.ndarray
    items: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.float64)
        self.items = np.asarray(self.items, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if len(self.users) != len(self.items) or len(self.users) != len(self.targets):
            raise InputError("users, items and targets must have the same length")


@dataclass
class _Pass:
    h_user: np.ndarray
    h_item: np.ndarray
    user_cache: object
    item_cache: object
    shared_cache: object


def _forward(model: FloraModel, users: np.ndarray, items: np.ndarray) -> _Pass:
    zu, cu = model.user_tower.forward(users)
    zi, ci = model.item_tower.forward(items)
    # one shared pass over stacked rows so its gradient accumulates both domains
    h, cs = model.shared.forward(np.vstack([zu, zi]))
    n = len(zu)
    return _Pass(h[:n], h[n:], cu, ci, cs)


def _backward(model: FloraModel, p: _Pass, d_user: np.ndarray, d_item: np.ndarray) -> list[np.ndarray]:
    g_shared, dz = model.shared.backward(p.shared_cache, np.vstack([d_user, d_item]))
    n = len(p.h_user)
    g_user, _ = model.user_tower.backward(p.user_cache, dz[:n])
    g_item, _ = model.item_tower.backward(p.item_cache, dz[n:])
    return g_user + g_item + g_shared


def predicted_similarity(h_user: np.ndarray, h_item: np.ndarray) -> np.ndarray:
    """Row-wise ``h_user . h_item / (2m) + 0.5``; equals ``1 - d_H/m`` on sign codes."""
    m = h_user.shape[1]
    return np.einsum("ij,ij->i", h_user, h_item) / (2 * m) + 0.5


def _consistency_head(h_user, h_item, targets):
    m = h_user.shape[1]
    b = len(targets)
    r = targets - predicted_similarity(h_user, h_item)
    loss = float(np.mean(r * r))
    # d/dh of mean((t - h1.h2/(2m) - 0.5)^2)
    coef = (-r / (b * m))[:, None]
    return loss, coef * h_item, coef * h_user


def _balance_head(h_user, h_item):
    mu_u = h_user.mean(axis=0)
    mu_i = h_item.mean(axis=0)
    loss = float(np.abs(mu_u).sum() + np.abs(mu_i).sum())
    d_user = np.broadcast_to(np.sign(mu_u) / len(h_user), h_user.shape)
    d_item = np.broadcast_to(np.sign(mu_i) / len(h_item), h_item.shape)
    return loss, d_user, d_item


def _independence(w: np.ndarray):
    gram = w.T @ w - np.eye(w.shape[1])
    # both domains share the head, so the two identical terms are kept as 2x
    return 2.0 * float(np.sum(gram * gram)), 8.0 * (w @ gram)


def _check_targets(targets):
    if not np.isfinite(targets).all():
        raise InputError("consistency targets must be finite")


def _zero_grads(model):
    return [np.zeros_like(p) for p in model.parameters()]


def loss_consistency(model: FloraModel, users, items, targets):
    batch = Batch(users, items, targets)
    _check_targets(batch.targets)
    p = _forward(model, batch.users, batch.items)
    loss, du, di = _consistency_head(p.h_user, p.h_item, batch.targets)
    return loss, _backward(model, p, du, di)


def loss_balance(model: FloraModel, users, items):
    users = np.asarray(users, dtype=np.float64)
    items = np.asarray(items, dtype=np.float64)
    if len(users) == 0 or len(items) == 0:
        raise InputError("balance loss needs a non-empty batch")
    p = _forward(model, users, items)
    loss, du, di = _balance_head(p.h_user, p.h_item)
    return loss, _backward(model, p, du, di)


def loss_independence(model: FloraModel):
    loss, dw = _independence(model.output_weights)
    grads = _zero_grads(model)
    # output weights are the second-to-last parameter (weights, then bias)
    grads[-2] = dw
    return loss, grads


@dataclass
class LossBreakdown:
    total: float
    consistency: float
    balance: float
    independence: float
    grads: list[np.ndarray] = field(repr=False)


def loss_total(
    model: FloraModel, batch: Batch, config: HashConfig, balance_items: np.ndarray | None = None
) -> LossBreakdown:
    """Weighted sum of the three losses from a single forward/backward pass.

    The balance term is taken over ``batch.users`` and over
    ``balance_items`` when given (a uniform draw from the item set), else
    over ``batch.items``.
    """
    _check_targets(batch.targets)
    n_pair = len(batch.items)
    items = batch.items if balance_items is None else np.vstack([batch.items, balance_items])
    p = _forward(model, batch.users, items)
    h_pair = p.h_item[:n_pair]
    h_bal = p.h_item if balance_items is None else p.h_item[n_pair:]
    lc, du, di = _consistency_head(p.h_user, h_pair, batch.targets)
    lu, bu, bi = _balance_head(p.h_user, h_bal)
    if balance_items is not None:
        di = np.vstack([di, np.zeros_like(bi)])
        bi = np.vstack([np.zeros_like(h_pair), bi])
    if config.lambda_u:
        du = du + config.lambda_u * bu
        di = di + config.lambda_u * bi
    grads = _backward(model, p, du, di)
    li, dw = _independence(model.output_weights)
    if config.lambda_i:
        grads[-2] = grads[-2] + config.lambda_i * dw
    total = lc + config.lambda_u * lu + config.lambda_i * li
    return LossBreakdown(total, lc, lu, li, grads)


# -- FLHM checkpoint ----------------------------------------------------------


def model_to_bytes(model: FloraModel) -> bytes:
    w = Writer()
    w.magic(FLHM_MAGIC)
    w.u32(FLHM_VERSION)
    w.u32(model.m)
    w.u32(model.user_dim)
    w.u32(model.item_dim)
    for net in (model.user_tower, model.item_tower, model.shared):
        write_mlp(w, net)
    return w.getvalue()


def read_model(r: Reader) -> FloraModel:
    r.magic(FLHM_MAGIC)
    r.version(FLHM_VERSION)
    header = r.offset
    m, user_dim, item_dim = r.u32(), r.u32(), r.u32()
    nets = [read_mlp(r) for _ in range(3)]
    try:
        model = FloraModel(*nets)
    except InputError as exc:
        r.fail(f"inconsistent model: {exc}")
    if (model.m, model.user_dim, model.item_dim) != (m, user_dim, item_dim):
        r.fail("header dims disagree with the embedded networks", header)
    return model


def model_from_bytes(buf: bytes) -> FloraModel:
    r = Reader(buf)
    model = read_model(r)
    r.at_end()
    return model


def save_model(model: FloraModel, path) -> None:
    atomic_write(path, model_to_bytes(model))


def load_model(path) -> FloraModel:
    r = Reader(read_bytes(path), path=path)
    model = read_model(r)
    r.at_end()
    return model
