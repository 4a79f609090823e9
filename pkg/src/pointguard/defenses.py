"""Model views: the query surface attacks see, and the defenses built on it.

A view answers two queries on a batch of clouds ``(B, N, 3)`` (a single
``(N, 3)`` cloud also works):

* ``predict(clouds)`` returns logits.
* ``grad(clouds, labels, loss="ce", keys=None)`` returns ``(loss, grad)``.

``keys`` are non-negative sample identifiers. Stochastic views derive each
query's randomness from ``(view seed, key, per-key query counter)`` so a
sample's stream does not depend on which other samples share the batch.
"""

import numpy as np
from scipy.spatial import cKDTree

from . import gradcore
from .errors import ConfigError


def _batch(clouds):
    x = np.asarray(clouds, dtype=np.float64)
    return (x[None], True) if x.ndim == 2 else (x, False)


def _keys(keys, B):
    if keys is None:
        return list(range(B))
    keys = [int(k) for k in np.atleast_1d(keys)]
    if len(keys) != B:
        raise ConfigError(f"{len(keys)} keys for a batch of {B}")
    return keys


class ModelView:
    """Base view; subclasses set ``kind`` and override the queries."""

    kind = "base"
    seed = None
    query_cost = 1
    stochastic = False

    def predict(self, clouds):
        raise NotImplementedError

    def grad(self, clouds, labels, loss="ce", keys=None):
        raise NotImplementedError

    def describe(self):
        return {"kind": self.kind, "seed": self.seed}


class _Counters:
    def __init__(self):
        self._n = {}

    def next(self, key):
        c = self._n.get(key, 0)
        self._n[key] = c + 1
        return c


class UndefendedView(ModelView):
    kind = "none"

    def __init__(self, params):
        self.params = params

    def predict(self, clouds):
        logits, _ = gradcore.forward(self.params, clouds)
        return logits

    def grad(self, clouds, labels, loss="ce", keys=None):
        return gradcore.loss_and_input_grad(self.params, clouds, labels, loss)


def undefended_view(params):
    return UndefendedView(params)


def sample_permutation(n, rng):
    """Uniform permutation of ``range(n)`` (Fisher-Yates via numpy)."""
    return rng.permutation(n)


class ITDefenseView(ModelView):
    """Permutes the point order before every gradient query.

    The gradient is computed for the permuted cloud and handed back in the
    permuted row order: row ``k`` of the answer belongs to point ``perm[k]``
    of the caller's cloud. Logits and loss are unchanged because the
    classifier is permutation invariant.

    Since ``grad(x[perm])`` equals ``grad(x)[perm]`` whenever no pooled
    channel has a tied maximum, the unpermuted gradient is computed once per
    distinct batch and re-indexed; tied samples are recomputed on the
    permuted cloud so tie-breaking follows the permuted order.
    """

    kind = "it"
    stochastic = True

    def __init__(self, params, seed=0, permute_predict=False):
        self.params = params
        self.seed = int(seed)
        self.permute_predict = permute_predict
        self.force_identity = False  # debug hook
        self._counters = _Counters()
        self._memo = None

    def _perm(self, key, n):
        if self.force_identity:
            return np.arange(n)
        rng = gradcore.make_rng(self.seed, key, self._counters.next(key))
        return sample_permutation(n, rng)

    def predict(self, clouds):
        x, single = _batch(clouds)
        if self.permute_predict:
            x = np.stack([c[self._perm(0x9E, len(c))] for c in x])
        logits, _ = gradcore.forward(self.params, x)
        return logits[0] if single else logits

    def _base_grad(self, x, labels, loss):
        m = self._memo
        if m is not None and m[2] == loss and np.array_equal(m[0], x) and np.array_equal(m[1], labels):
            return m[3], m[4], m[5]
        logits, cache = gradcore.forward(self.params, x)
        value, dlog = gradcore.loss_and_dlogits(logits, labels, loss)
        g, _ = gradcore.backward(self.params, cache, dlog)
        B, N = x.shape[:2]
        last = cache.point_acts[-1].reshape(B, N, -1)
        ties = ((last == cache.pooled[:, None, :]) & (cache.pooled[:, None, :] > 0)).sum(axis=1)
        tied = np.any(ties > 1, axis=1)
        self._memo = (x.copy(), labels.copy(), loss, value, g, tied)
        return value, g, tied

    def grad(self, clouds, labels, loss="ce", keys=None):
        x, single = _batch(clouds)
        labels = np.broadcast_to(np.atleast_1d(labels), (len(x),)).astype(np.int64)
        value, g, tied = self._base_grad(x, labels, loss)
        out = np.empty_like(g)
        for b, key in enumerate(_keys(keys, len(x))):
            perm = self._perm(key, x.shape[1])
            if tied[b]:
                _, out[b] = gradcore.loss_and_input_grad(self.params, x[b][perm], labels[b], loss)
            else:
                out[b] = g[b][perm]
        if single:
            return float(value[0]), out[0]
        return value.copy(), out


def it_defense_view(params, seed=0, permute_predict=False):
    return ITDefenseView(params, seed, permute_predict)


class EOTView(ModelView):
    """Averages ``n`` independent gradient queries to the wrapped view."""

    stochastic = False

    def __init__(self, view, n):
        if n < 1:
            raise ConfigError("EOT count must be >= 1")
        self.view = view
        self.n = int(n)
        self.seed = view.seed
        self.kind = f"{view.kind}+eot{self.n}"
        self.query_cost = self.n * view.query_cost
        self.stochastic = view.stochastic

    def predict(self, clouds):
        return self.view.predict(clouds)

    def grad(self, clouds, labels, loss="ce", keys=None):
        value, mean = self.view.grad(clouds, labels, loss, keys)
        # running mean keeps a constant sequence exactly constant
        for k in range(2, self.n + 1):
            _, g = self.view.grad(clouds, labels, loss, keys)
            mean = mean + (g - mean) / k
        return value, mean


def eot_wrap(view, n, seed=None):
    """EOT wrapper; ``seed`` is accepted for symmetry, randomness stays the defender's."""
    return EOTView(view, n)


# ---------------------------------------------------------------- purification

def srs_indices(n, keep_m, rng):
    if not 1 <= keep_m <= n:
        raise ConfigError(f"keep_m={keep_m} outside [1, {n}]")
    return np.sort(rng.choice(n, size=keep_m, replace=False))


def srs_preprocess(cloud, keep_m, rng):
    """Keep a uniformly chosen subset of ``keep_m`` points, in original order."""
    cloud = np.asarray(cloud, dtype=np.float64)
    return cloud[srs_indices(len(cloud), keep_m, rng)]


def sor_indices(cloud, k=2, alpha=1.1):
    cloud = np.asarray(cloud, dtype=np.float64)
    n = len(cloud)
    if not 1 <= k < n:
        raise ConfigError(f"k={k} must satisfy 1 <= k < N={n}")
    if alpha < 0:
        raise ConfigError("alpha must be >= 0")
    dist, _ = cKDTree(cloud).query(cloud, k=k + 1)
    d = dist[:, 1:].mean(axis=1)
    sd = d.std(ddof=1)
    if not sd > 0:
        return np.arange(n)
    keep = np.flatnonzero(d <= d.mean() + alpha * sd)
    return keep if len(keep) else np.array([int(np.argmin(d))])


def sor_preprocess(cloud, k=2, alpha=1.1):
    """Drop points whose mean kNN distance exceeds ``mean + alpha * std``."""
    cloud = np.asarray(cloud, dtype=np.float64)
    return cloud[sor_indices(cloud, k, alpha)]


class _PurifyView(ModelView):
    """Runs the classifier on a per-sample subset of the points."""

    def _select(self, cloud, key):
        raise NotImplementedError

    def predict(self, clouds, keys=None):
        x, single = _batch(clouds)
        logits = np.stack([
            gradcore.forward(self.params, c[self._select(c, k)])[0]
            for c, k in zip(x, _keys(keys, len(x)))
        ])
        return logits[0] if single else logits

    def grad(self, clouds, labels, loss="ce", keys=None):
        x, single = _batch(clouds)
        labels = np.broadcast_to(np.atleast_1d(labels), (len(x),))
        value = np.empty(len(x))
        out = np.zeros_like(x)
        for b, k in enumerate(_keys(keys, len(x))):
            idx = self._select(x[b], k)
            value[b], out[b, idx] = gradcore.loss_and_input_grad(
                self.params, x[b][idx], int(labels[b]), loss)
        if single:
            return float(value[0]), out[0]
        return value, out


class SRSView(_PurifyView):
    kind = "srs"
    stochastic = True

    def __init__(self, params, keep_m=None, drop=None, seed=0):
        self.params = params
        self.keep_m = keep_m
        self.drop = drop
        self.seed = int(seed)
        self._counters = _Counters()

    def _select(self, cloud, key):
        n = len(cloud)
        keep = self.keep_m if self.keep_m is not None else n - (self.drop if self.drop is not None else n // 4)
        rng = gradcore.make_rng(self.seed, key, self._counters.next(key))
        return srs_indices(n, min(keep, n), rng)

    def describe(self):
        return {"kind": self.kind, "seed": self.seed, "keep_m": self.keep_m, "drop": self.drop}


class SORView(_PurifyView):
    kind = "sor"

    def __init__(self, params, k=2, alpha=1.1):
        self.params = params
        self.k = k
        self.alpha = alpha

    def _select(self, cloud, key):
        return sor_indices(cloud, self.k, self.alpha)

    def describe(self):
        return {"kind": self.kind, "k": self.k, "alpha": self.alpha}


def make_view(params, spec, seed=0):
    """Build a view from a defense spec dict (``{"kind": ..., ...}``) or name."""
    if isinstance(spec, str):
        spec = {"kind": spec}
    spec = dict(spec)
    kind = spec.pop("kind", "none")
    seed = spec.pop("seed", seed)
    if kind == "none":
        view = UndefendedView(params)
    elif kind == "it":
        view = ITDefenseView(params, seed, spec.pop("permute_predict", False))
    elif kind == "srs":
        view = SRSView(params, spec.pop("keep_m", None), spec.pop("drop", None), seed)
    elif kind == "sor":
        view = SORView(params, spec.pop("k", 2), spec.pop("alpha", 1.1))
    else:
        raise ConfigError(f"unknown defense {kind!r}")
    if spec:
        raise ConfigError(f"unknown options for defense {kind!r}: {sorted(spec)}")
    return view
