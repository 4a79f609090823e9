"""Multi-order pairwise interactions between points.

For a payoff ``v`` over point subsets, the order-``m`` interaction of points
``i`` and ``j`` is the mean over backgrounds ``S`` of size ``m`` (drawn from
the other points) of::

    dv(i, j, S) = v(S+{i,j}) - v(S+{i}) - v(S+{j}) + v(S)

Averaging the orders with weight ``1/(n-1)`` gives the pairwise Shapley
interaction. A point is "absent" when its coordinates are replaced by a
baseline (the cloud centroid by default), so every evaluation keeps the same
number of rows.
"""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import gradcore
from .defenses import srs_indices
from .errors import InputError


class ValueFunction:
    """Payoff ``v(S)``: logit margin of ``label`` with points outside ``S`` masked.

    Args:
        params: ModelParams, or None when ``scorer`` is given.
        cloud: ``(n, 3)`` points.
        label: class whose margin is the payoff.
        baseline: replacement coordinates for absent points; defaults to the
            centroid.
        scorer: optional ``f(clouds (M, n, 3)) -> (M,)`` replacing the model.
    """

    def __init__(self, params, cloud, label=0, baseline=None, scorer=None, batch_size=512):
        self.params = params
        self.cloud = np.asarray(cloud, dtype=np.float64)
        self.label = int(label)
        self.baseline = (self.cloud.mean(axis=0) if baseline is None
                         else np.broadcast_to(np.asarray(baseline, np.float64), (3,)))
        self.scorer = scorer
        self.batch_size = batch_size

    @property
    def n(self):
        return len(self.cloud)

    def __call__(self, masks):
        masks = np.atleast_2d(np.asarray(masks, dtype=bool))
        out = np.empty(len(masks))
        for s in range(0, len(masks), self.batch_size):
            mk = masks[s:s + self.batch_size]
            clouds = np.where(mk[..., None], self.cloud[None], self.baseline)
            if self.scorer is not None:
                out[s:s + len(mk)] = self.scorer(clouds)
            else:
                logits, _ = gradcore.forward(self.params, clouds)
                out[s:s + len(mk)] = -gradcore.margin(logits, np.full(len(mk), self.label))
        return out

    def value(self, subset):
        mask = np.zeros(self.n, dtype=bool)
        mask[list(subset)] = True
        return float(self(mask[None])[0])


def _check(vf, i, j, S):
    S = set(S)
    if i == j or i in S or j in S:
        raise InputError("i, j and S must be disjoint with i != j")
    if not all(0 <= k < vf.n for k in S | {i, j}):
        raise InputError("index out of range")
    return S


def delta_v(vf, i, j, S=()):
    S = _check(vf, i, j, S)
    masks = np.zeros((4, vf.n), dtype=bool)
    for row in masks:
        row[list(S)] = True
    masks[0, [i, j]] = True
    masks[1, i] = True
    masks[2, j] = True
    v = vf(masks)
    return float(v[0] - v[1] - v[2] + v[3])


def _delta_batch(vf, pairs, subsets):
    """dv for every (pair, subset) row; ``subsets`` is a bool mask per row."""
    R = len(pairs)
    masks = np.repeat(subsets[:, None, :], 4, axis=1)
    rows = np.arange(R)
    masks[rows, 0, pairs[:, 0]] = True
    masks[rows, 0, pairs[:, 1]] = True
    masks[rows, 1, pairs[:, 0]] = True
    masks[rows, 2, pairs[:, 1]] = True
    v = vf(masks.reshape(R * 4, vf.n)).reshape(R, 4)
    return v[:, 0] - v[:, 1] - v[:, 2] + v[:, 3]


def estimate_order(vf, m, n_pairs, n_subsets, rng):
    """Monte-Carlo estimate of the order-``m`` interaction.

    Pairs are drawn uniformly (with replacement), then ``n_subsets`` uniform
    size-``m`` backgrounds per pair. A budget covering every pair (or every
    background) enumerates them instead, which makes the estimate exact.

    Returns:
        ``(mean, stderr)``; stderr is the spread of per-pair means over
        ``sqrt(pairs)``.
    """
    n = vf.n
    if not 0 <= m <= n - 2:
        raise InputError(f"order m={m} outside [0, {n - 2}]")
    if n_pairs < 1 or n_subsets < 1:
        raise InputError("budgets must be >= 1")
    all_pairs = list(itertools.combinations(range(n), 2))
    if n_pairs >= len(all_pairs):
        pairs = np.array(all_pairs)
    else:
        pairs = np.array([sorted(rng.choice(n, 2, replace=False)) for _ in range(n_pairs)])
    exhaustive = n_subsets >= math.comb(n - 2, m)

    rows_p, rows_s = [], []
    for i, j in pairs:
        rest = np.array([k for k in range(n) if k != i and k != j])
        if exhaustive:
            chosen = [rest[list(c)] for c in itertools.combinations(range(n - 2), m)]
        else:
            chosen = [rng.choice(rest, m, replace=False) for _ in range(n_subsets)]
        for c in chosen:
            mask = np.zeros(n, dtype=bool)
            mask[c] = True
            rows_p.append((i, j))
            rows_s.append(mask)
    dv = _delta_batch(vf, np.array(rows_p), np.array(rows_s))
    per_pair = dv.reshape(len(pairs), -1).mean(axis=1)
    mean = float(per_pair.mean())
    if len(per_pair) > 1:
        stderr = float(per_pair.std(ddof=1) / np.sqrt(len(per_pair)))
    else:
        stderr = float(dv.std(ddof=1) / np.sqrt(len(dv))) if len(dv) > 1 else 0.0
    return mean, stderr


def brute_force_order(vf, m, pairs=None, max_evals=2_000_000):
    """Exact order-``m`` interaction by enumerating every pair and background.

    Each distinct subset is evaluated once and memoised. Refuses when the
    enumeration exceeds ``max_evals`` delta terms.
    """
    n = vf.n
    if not 0 <= m <= n - 2:
        raise InputError(f"order m={m} outside [0, {n - 2}]")
    pairs = list(itertools.combinations(range(n), 2)) if pairs is None else list(pairs)
    size = len(pairs) * math.comb(n - 2, m)
    if size > max_evals:
        raise InputError(
            f"brute force needs {size} terms (n={n}, m={m}, pairs={len(pairs)}), "
            f"limit is {max_evals}")
    memo = {}

    def v(s):
        key = frozenset(s)
        if key not in memo:
            memo[key] = vf.value(key)
        return memo[key]

    total = 0.0
    for i, j in pairs:
        rest = [k for k in range(n) if k != i and k != j]
        acc = 0.0
        count = 0
        for S in itertools.combinations(rest, m):
            S = set(S)
            acc += v(S | {i, j}) - v(S | {i}) - v(S | {j}) + v(S)
            count += 1
        total += acc / count
    return total / len(pairs)


def shapley_pair_interaction(vf, i, j):
    """Shapley value of ``i`` with ``j`` always present minus with ``j`` always absent.

    Computed by averaging marginal contributions over every ordering of the
    other ``n - 1`` players; only practical for ``n <= 8``.
    """
    n = vf.n
    if n > 9:
        raise InputError(f"ordering enumeration infeasible for n={n}")
    players = [k for k in range(n) if k != j]
    memo = {}

    def v(s):
        key = frozenset(s)
        if key not in memo:
            memo[key] = vf.value(key)
        return memo[key]

    present = absent = 0.0
    count = 0
    for order in itertools.permutations(players):
        before = set(order[:order.index(i)])
        present += v(before | {i, j}) - v(before | {j})
        absent += v(before | {i}) - v(before)
        count += 1
    return (present - absent) / count


@dataclass
class InteractionProfile:
    ratios: list
    orders: list
    means: list
    stderrs: list
    n_pairs: int
    n_subsets: int
    n_points: int
    seed: int = None
    meta: dict = field(default_factory=dict)

    def rows(self):
        n_eval = 4 * self.n_pairs * self.n_subsets
        return [
            {"ratio": r, "mean": mu, "stderr": se, "n_eval": n_eval}
            for r, mu, se in zip(self.ratios, self.means, self.stderrs)
        ]


def parse_grid(text):
    """``"start:step:stop"`` (inclusive) or comma-separated ratios."""
    if ":" in text:
        start, step, stop = (float(t) for t in text.split(":"))
        count = int(round((stop - start) / step)) + 1
        grid = [round(start + k * step, 10) for k in range(count)]
    else:
        grid = [float(t) for t in text.split(",")]
    if any(not 0 <= g <= 1 for g in grid):
        raise InputError("grid ratios must lie in [0, 1]")
    return grid


def interaction_profile(params, cloud, label, grid, budgets=(20, 8), seed=0,
                        n_points=32, baseline=None):
    """Order profile of one cloud on a grid of background ratios.

    The cloud is first subsampled to ``n_points`` (simple random sampling);
    for a fixed ``seed`` the same rows, pairs and backgrounds are used for
    every cloud of equal size, so clean and adversarial versions of one
    sample are compared on common randomness.
    """
    if any(not 0 <= g <= 1 for g in grid):
        raise InputError("grid ratios must lie in [0, 1]")
    cloud = np.asarray(cloud, dtype=np.float64)
    if len(cloud) > n_points:
        cloud = cloud[srs_indices(len(cloud), n_points, gradcore.make_rng(seed, 0x5A5))]
    vf = ValueFunction(params, cloud, label, baseline)
    n = vf.n
    n_pairs, n_subsets = budgets
    orders, means, stderrs = [], [], []
    for k, ratio in enumerate(grid):
        m = int(round(ratio * (n - 2)))
        mu, se = estimate_order(vf, m, n_pairs, n_subsets, gradcore.make_rng(seed, 0x1B7, k))
        orders.append(m)
        means.append(mu)
        stderrs.append(se)
    return InteractionProfile(list(grid), orders, means, stderrs, n_pairs, n_subsets, n, seed)
