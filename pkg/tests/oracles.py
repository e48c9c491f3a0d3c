"""Independent reference implementations used as test oracles."""

import math

import numpy as np

ACT = {
    "identity": lambda z: z,
    "relu": lambda z: max(z, 0.0),
    "tanh": math.tanh,
    "sigmoid": lambda z: 1.0 / (1.0 + math.exp(-z)),
}


def scalar_forward(net, x):
    """Per-element reference evaluation with plain Python loops."""
    out = []
    for row in x:
        a = [float(v) for v in row]
        for layer in net.layers:
            w, b = layer.weights, layer.bias
            a = [ACT[layer.activation](sum(a[i] * w[i, j] for i in range(len(a))) + b[j]) for j in range(len(b))]
        out.append(a)
    return np.array(out)


def relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    diff = np.abs(a - b)
    scale = np.maximum(np.abs(a), np.abs(b))
    return np.where(scale < floor, diff, diff / np.maximum(scale, floor)).max()


def code_bit(words, j):
    return (int(words[j // 64]) >> (j % 64)) & 1


def naive_hamming(a_words, b_words, m):
    return sum(code_bit(a_words, j) != code_bit(b_words, j) for j in range(m))


def naive_rank(query_words, code_words, m, t):
    """Sort every (distance, id) pair and cut at t."""
    pairs = sorted((naive_hamming(query_words, row, m), i) for i, row in enumerate(code_words))
    return [i for _, i in pairs[:t]], [d for d, _ in pairs[:t]]


def gradient_check(loss_fn, grad_fn, params, step=1e-5, floor=1e-8):
    """Largest relative error between analytic and central-difference gradients."""
    from flora.nn import finite_difference_grad

    analytic = grad_fn()
    numeric = finite_difference_grad(loss_fn, params, step)
    return max(relative_error(a, n, floor) for a, n in zip(analytic, numeric))


def gradient_tolerance_ratio(loss_fn, grad_fn, params, rtol=1e-4, atol=1e-8, step=1e-5):
    """Worst |analytic - numeric| / max(rtol * scale, atol); at most 1 means within tolerance."""
    from flora.nn import finite_difference_grad

    worst = 0.0
    for a, n in zip(grad_fn(), finite_difference_grad(loss_fn, params, step)):
        scale = np.maximum(np.abs(a), np.abs(n))
        worst = max(worst, float((np.abs(a - n) / np.maximum(rtol * scale, atol)).max()))
    return worst
