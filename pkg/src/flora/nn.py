"""Small feed-forward network machinery with hand-written backprop.

Everything runs in float64 on numpy arrays. Layers store weights as
``(in_dim, out_dim)`` so a forward pass is ``x @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._binary import Reader, Writer, atomic_write, read_bytes
from .errors import InputError, NumericError

ACTIVATIONS = ("identity", "relu", "tanh", "sigmoid")

FLNN_MAGIC = b"FLNN"
FLNN_VERSION = 1


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _activate(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "identity":
        return pre
    if name == "relu":
        return np.maximum(pre, 0.0)
    if name == "tanh":
        return np.tanh(pre)
    return sigmoid(pre)


def _activation_grad(name: str, pre: np.ndarray, post: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    if name == "identity":
        return upstream
    if name == "relu":
        return upstream * (pre > 0.0)
    if name == "tanh":
        return upstream * (1.0 - post * post)
    return upstream * post * (1.0 - post)


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise InputError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise InputError(
                f"inconsistent layer shapes: weights {self.weights.shape}, bias {self.bias.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)


class MLP:
    """A chain of dense layers.

    ``parameters()`` returns the live weight and bias arrays in layer order
    ``[W0, b0, W1, b1, ...]``; gradients from :meth:`backward` use the same order.
    """

    def __init__(self, layers: Sequence[DenseLayer]):
        layers = list(layers)
        if not layers:
            raise InputError("an MLP needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise InputError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        self.layers = layers

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.bias))
        return out

    def copy(self) -> "MLP":
        return MLP(
            [DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def freeze(self) -> "MLP":
        for p in self.parameters():
            p.flags.writeable = False
        return self

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise InputError(f"expected input of shape (batch, {self.in_dim}), got {x.shape}")
        if not np.isfinite(x).all():
            raise InputError("input contains non-finite values")
        return x

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        x = self._check_input(x)
        cache = ForwardCache()
        for layer in self.layers:
            cache.inputs.append(x)
            pre = x @ layer.weights + layer.bias
            x = _activate(layer.activation, pre)
            cache.pre.append(pre)
            cache.post.append(x)
        return x, cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def forward_rowwise(self, x: np.ndarray) -> np.ndarray:
        """Forward pass whose per-row result does not depend on the batch.

        BLAS picks different kernels for one row than for many, which changes
        the last bits. ``einsum`` without path optimization reduces each row on
        its own, so scoring one row or a thousand gives identical numbers.
        """
        x = self._check_input(x)
        for layer in self.layers:
            x = _activate(layer.activation, np.einsum("ij,jk->ik", x, layer.weights) + layer.bias)
        return x

    def backward(self, cache: ForwardCache, upstream: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Backpropagate ``upstream`` (dL/d output) through the cached forward pass.

        Returns ``(grads, dx)`` where ``grads`` matches ``parameters()``.
        """
        if len(cache.pre) != len(self.layers):
            raise InputError("cache does not come from this network")
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != cache.post[-1].shape:
            raise InputError(
                f"upstream gradient shape {upstream.shape} != output shape {cache.post[-1].shape}"
            )
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))
        g = upstream
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            dpre = _activation_grad(layer.activation, cache.pre[i], cache.post[i], g)
            grads[2 * i] = cache.inputs[i].T @ dpre
            grads[2 * i + 1] = dpre.sum(axis=0)
            g = dpre @ layer.weights.T
        return grads, g


def mlp_forward(params: MLP, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    return params.forward(x)


def mlp_backward(params: MLP, cache: ForwardCache, upstream: np.ndarray):
    return params.backward(cache, upstream)


def init_mlp(sizes: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> MLP:
    """Glorot-uniform weights, zero biases."""
    if len(sizes) < 2 or len(activations) != len(sizes) - 1:
        raise InputError("need len(activations) == len(sizes) - 1 >= 1")
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        if fan_in <= 0 or fan_out <= 0:
            raise InputError(f"layer sizes must be positive, got {fan_in}x{fan_out}")
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        layers.append(DenseLayer(w, np.zeros(fan_out), act))
    return MLP(layers)


class Adam:
    """Adaptive-moment optimizer updating parameter arrays in place."""

    def __init__(
        self,
        params: Sequence[np.ndarray],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        names: Sequence[str] | None = None,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.names = list(names) if names is not None else [f"param[{i}]" for i in range(len(self.params))]
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise InputError(f"got {len(grads)} gradients for {len(self.params)} parameters")
        for name, p, g in zip(self.names, self.params, grads):
            if g.shape != p.shape:
                raise InputError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {name} at step {self.t + 1}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def finite_difference_grad(
    loss_fn: Callable[[], float], params: Sequence[np.ndarray], step: float = 1e-5
) -> list[np.ndarray]:
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``params``.

    ``params`` are perturbed in place and restored afterwards.
    """
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = loss_fn()
            flat[j] = orig - step
            lo = loss_fn()
            flat[j] = orig
            gflat[j] = (hi - lo) / (2.0 * step)
        out.append(g)
    return out


# -- FLNN checkpoint ----------------------------------------------------------


def write_mlp(w: Writer, mlp: MLP) -> None:
    w.magic(FLNN_MAGIC)
    w.u32(FLNN_VERSION)
    w.u32(len(mlp.layers))
    for layer in mlp.layers:
        w.u32(layer.in_dim)
        w.u32(layer.out_dim)
        w.u8(ACTIVATIONS.index(layer.activation))
        w.array(layer.weights, "<f8")
        w.array(layer.bias, "<f8")


def read_mlp(r: Reader) -> MLP:
    r.magic(FLNN_MAGIC)
    r.version(FLNN_VERSION)
    n_layers = r.u32()
    if n_layers == 0:
        r.fail("checkpoint declares zero layers")
    layers = []
    for _ in range(n_layers):
        in_dim = r.u32()
        out_dim = r.u32()
        act_pos = r.offset
        act = r.u8()
        if act >= len(ACTIVATIONS):
            r.fail(f"unknown activation id {act}", act_pos)
        weights = r.array("<f8", in_dim * out_dim).reshape(in_dim, out_dim)
        bias = r.array("<f8", out_dim)
        layers.append(DenseLayer(weights.astype(np.float64), bias.astype(np.float64), ACTIVATIONS[act]))
    try:
        return MLP(layers)
    except InputError as exc:
        r.fail(str(exc))


def mlp_to_bytes(mlp: MLP) -> bytes:
    w = Writer()
    write_mlp(w, mlp)
    return w.getvalue()


def mlp_from_bytes(buf: bytes) -> MLP:
    r = Reader(buf)
    mlp = read_mlp(r)
    r.at_end()
    return mlp


def save_mlp(mlp: MLP, path) -> None:
    atomic_write(path, mlp_to_bytes(mlp))


def load_mlp(path) -> MLP:
    r = Reader(read_bytes(path), path=path)
    mlp = read_mlp(r)
    r.at_end()
    return mlp
