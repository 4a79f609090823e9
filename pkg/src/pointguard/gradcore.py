"""Forward/backward kernel for the shared-MLP + max-pool classifier.

Layout: a stack of per-point affine+ReLU layers applied row-wise to an
``(N, 3)`` cloud, a channel-wise max over points, then an MLP head with ReLU
on every hidden layer. All arithmetic is float64.

Every function accepts either one cloud ``(N, 3)`` or a batch ``(B, N, 3)``.

Rows are fed to the per-point matmuls in lexicographic order of their
coordinates and scattered back afterwards. This makes the arithmetic seen by
BLAS identical for any row permutation of the input, so permutation
invariance of the logits holds bit-for-bit rather than up to rounding.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError

__all__ = [
    "ForwardCache",
    "make_rng",
    "forward",
    "backward",
    "loss_and_input_grad",
    "param_grads",
    "finite_difference_grad",
    "cross_entropy",
    "margin",
    "loss_and_dlogits",
]


def make_rng(seed, *stream):
    """Deterministic generator for the stream ``(seed, *stream)``.

    Philox is counter-based, so a given key produces the same sequence on
    every platform and independently of any other stream's use.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(s) & 0xFFFFFFFFFFFFFFFF for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


@dataclass
class ForwardCache:
    """Everything backward needs; arrays are batch-first.

    ``point_acts[l]`` holds the post-ReLU output of point layer ``l`` in
    sorted row order with shape ``(B*N, C_l)`` (``point_acts[0]`` is the sorted
    input). ``order[b, s]`` is the original row index of sorted row ``s``.
    ``argmax[b, c]`` is the original row index winning channel ``c`` (lowest
    index on ties).
    """

    batch: int
    n_points: int
    order: np.ndarray
    point_acts: list
    argmax: np.ndarray
    pooled: np.ndarray
    head_acts: list
    logits: np.ndarray


def _as_batch(clouds):
    x = np.asarray(clouds, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[-1] != 3:
        raise ConfigError(f"expected cloud of shape (N, 3) or (B, N, 3), got {x.shape}")
    if x.shape[1] < 1:
        raise InputError("cloud must contain at least one point")
    if not np.all(np.isfinite(x)):
        raise InputError("cloud contains non-finite coordinates")
    return x, single


def _check_params(params):
    arch = params.arch
    n_layers = len(params.weights)
    if n_layers != len(arch.point_mlp_dims) + len(arch.head_dims) - 2:
        raise ConfigError("parameter count does not match architecture")
    dims = list(arch.point_mlp_dims) + list(arch.head_dims[1:])
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
            raise ConfigError(
                f"layer {i}: expected weight {(dims[i], dims[i + 1])}, got {w.shape}"
            )


def _sort_order(x):
    # lexsort keys are last-major: sort by x, then y, then z
    return np.stack([np.lexsort((c[:, 2], c[:, 1], c[:, 0])) for c in x])


def forward(params, clouds):
    """Run the classifier.

    Args:
        params: ModelParams.
        clouds: ``(N, 3)`` or ``(B, N, 3)`` coordinates.

    Returns:
        ``(logits, cache)``; logits is ``(K,)`` or ``(B, K)``.
    """
    _check_params(params)
    x, single = _as_batch(clouds)
    B, N, _ = x.shape
    n_point = len(params.arch.point_mlp_dims) - 1

    order = _sort_order(x)
    h = np.take_along_axis(x, order[..., None], axis=1).reshape(B * N, 3)
    point_acts = [h]
    for w, b in zip(params.weights[:n_point], params.biases[:n_point]):
        h = h @ w
        h += b
        np.maximum(h, 0.0, out=h)
        point_acts.append(h)

    C = h.shape[1]
    feats = h.reshape(B, N, C)
    pooled = feats.max(axis=1)
    # lowest original row index among the maxima of each channel
    hit = feats == pooled[:, None, :]
    argmax = np.where(hit, order[:, :, None], N).min(axis=1)

    g = pooled
    head_acts = [g]
    head_w = params.weights[n_point:]
    head_b = params.biases[n_point:]
    for i, (w, b) in enumerate(zip(head_w, head_b)):
        g = g @ w + b
        if i < len(head_w) - 1:
            g = np.maximum(g, 0.0)
        head_acts.append(g)
    logits = g

    cache = ForwardCache(B, N, order, point_acts, argmax, pooled, head_acts, logits)
    return (logits[0] if single else logits), cache


def cross_entropy(logits, labels):
    """Softmax cross-entropy per row, max-logit stabilised."""
    z = np.atleast_2d(logits)
    labels = np.atleast_1d(labels)
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    return lse - z[np.arange(len(z)), labels]


def margin(logits, labels):
    """``max_{j != y} Z_j - Z_y`` per row; negative iff ``y`` strictly leads."""
    z = np.atleast_2d(logits).copy()
    labels = np.atleast_1d(labels)
    rows = np.arange(len(z))
    zy = z[rows, labels].copy()
    z[rows, labels] = -np.inf
    return z.max(axis=1) - zy


def loss_and_dlogits(logits, labels, loss="ce"):
    """Per-sample loss and its gradient w.r.t. the logits.

    ``loss`` is ``"ce"`` (softmax cross-entropy) or ``"margin"`` (the raw
    best-other-minus-label logit gap; its subgradient uses the lowest-index
    runner-up).
    """
    z = np.atleast_2d(logits)
    labels = np.atleast_1d(labels)
    rows = np.arange(len(z))
    K = z.shape[1]
    if np.any(labels < 0) or np.any(labels >= K):
        raise InputError(f"label out of range [0, {K})")
    if loss == "ce":
        zmax = z.max(axis=1, keepdims=True)
        e = np.exp(z - zmax)
        s = e.sum(axis=1, keepdims=True)
        value = np.log(s[:, 0]) + zmax[:, 0] - z[rows, labels]
        d = e / s
        d[rows, labels] -= 1.0
        return value, d
    if loss == "margin":
        other = z.copy()
        other[rows, labels] = -np.inf
        j = np.argmax(other, axis=1)
        value = other[rows, j] - z[rows, labels]
        d = np.zeros_like(z)
        d[rows, j] = 1.0
        d[rows, labels] -= 1.0
        return value, d
    raise ConfigError(f"unknown loss {loss!r}")


def backward(params, cache, dlogits, want_params=False, want_input=True):
    """Backpropagate ``dlogits`` through a cached forward pass.

    Only points that win at least one pooled channel receive gradient, so the
    point-layer backward runs on those rows alone.

    Returns:
        ``(input_grad, param_grads)``; ``input_grad`` is ``(B, N, 3)`` or None,
        ``param_grads`` is ``(dweights, dbiases)`` summed over the batch or None.
    """
    n_point = len(params.arch.point_mlp_dims) - 1
    B, N = cache.batch, cache.n_points
    d = np.atleast_2d(dlogits)
    dW = [None] * len(params.weights)
    db = [None] * len(params.biases)

    head_w = params.weights[n_point:]
    for i in range(len(head_w) - 1, -1, -1):
        a_in = cache.head_acts[i]
        if want_params:
            dW[n_point + i] = a_in.T @ d
            db[n_point + i] = d.sum(axis=0)
        d = d @ head_w[i].T
        if i > 0:
            d = d * (cache.head_acts[i] > 0)
    dpooled = d

    # map winning original rows to their sorted positions
    inv = np.empty_like(cache.order)
    np.put_along_axis(inv, cache.order, np.arange(N)[None, :].repeat(B, 0), axis=1)
    win_sorted = np.take_along_axis(inv, cache.argmax, axis=1) + (np.arange(B) * N)[:, None]
    flat_rows = win_sorted.ravel()
    active, slot = np.unique(flat_rows, return_inverse=True)
    C = dpooled.shape[1]
    dz = np.zeros((len(active), C))
    np.add.at(dz, (slot, np.tile(np.arange(C), B)), dpooled.ravel())

    for l in range(n_point, 0, -1):
        dz = dz * (cache.point_acts[l][active] > 0)
        a_in = cache.point_acts[l - 1][active]
        if want_params:
            dW[l - 1] = a_in.T @ dz
            db[l - 1] = dz.sum(axis=0)
        if l > 1 or want_input:
            dz = dz @ params.weights[l - 1].T

    input_grad = None
    if want_input:
        gx_sorted = np.zeros((B * N, 3))
        gx_sorted[active] = dz
        input_grad = np.empty((B, N, 3))
        np.put_along_axis(
            input_grad, cache.order[..., None], gx_sorted.reshape(B, N, 3), axis=1
        )
    return input_grad, ((dW, db) if want_params else None)


def loss_and_input_grad(params, clouds, labels, loss="ce"):
    """Loss and its gradient w.r.t. every input coordinate.

    Returns:
        ``(loss, grad)`` with grad shaped like ``clouds``; loss is a float for
        a single cloud, else a ``(B,)`` array.
    """
    logits, cache = forward(params, clouds)
    value, dlog = loss_and_dlogits(logits, labels, loss)
    grad, _ = backward(params, cache, dlog)
    if np.ndim(clouds) == 2:
        return float(value[0]), grad[0]
    return value, grad


def param_grads(params, clouds, labels):
    """Gradient of the summed cross-entropy w.r.t. every weight and bias.

    Returns:
        ``(loss, dweights, dbiases)`` with loss summed over the batch.
    """
    logits, cache = forward(params, clouds)
    value, dlog = loss_and_dlogits(logits, labels, "ce")
    _, (dW, db) = backward(params, cache, dlog, want_params=True, want_input=False)
    return float(value.sum()), dW, db


def finite_difference_grad(params, cloud, label, h=1e-5, loss="ce"):
    """Central-difference estimate of the input gradient of one cloud."""
    if h <= 0:
        raise ConfigError("h must be positive")
    x = np.asarray(cloud, dtype=np.float64)
    N = x.shape[0]
    # every perturbed copy in one batch: rows 2k / 2k+1 are +h / -h of coord k
    batch = np.repeat(x[None], 2 * N * 3, axis=0)
    k = np.arange(N * 3)
    batch.reshape(2 * N * 3, N * 3)[2 * k, k] += h
    batch.reshape(2 * N * 3, N * 3)[2 * k + 1, k] -= h
    out = np.empty(2 * N * 3)
    for s in range(0, len(batch), 512):
        logits, _ = forward(params, batch[s:s + 512])
        out[s:s + 512], _ = loss_and_dlogits(logits, np.full(len(logits), label), loss)
    return ((out[0::2] - out[1::2]) / (2 * h)).reshape(N, 3)
