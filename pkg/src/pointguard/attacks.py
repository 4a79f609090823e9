"""Attacks that reach the victim only through a ModelView.

All attacks run on a batch ``(B, N, 3)`` and return one AttackResult per
cloud; passing a single ``(N, 3)`` cloud returns a single result. Targeted
attacks descend the loss of the target class, untargeted ones ascend the loss
of the true class.
"""

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import gradcore
from .defenses import EOTView
from .errors import ConfigError

KINDS = ("fgm", "ifgm", "mifgm", "pgd", "cw", "knn", "drop")


@dataclass
class AttackConfig:
    kind: str = "ifgm"
    targeted: bool = True
    target_label: int = None
    epsilon: float = 0.2
    steps: int = 50
    step_size: float = None
    momentum: float = 1.0
    cw_c: float = 10.0
    cw_kappa: float = 0.0
    knn_k: int = 5
    knn_lambda: float = 3.0
    knn_percentile: float = 90.0
    iterations: int = 200
    lr: float = 0.002
    binary_search_steps: int = 5
    drop_count: int = 50
    drop_rounds: int = 10
    eot_n: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if self.kind == "drop":
            self.targeted = False
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not 0 <= self.momentum <= 1:
            raise ConfigError("momentum must lie in [0, 1]")
        if self.step_size is not None and self.steps > 1 and self.step_size <= 0:
            raise ConfigError("step_size must be > 0")
        if self.eot_n < 1:
            raise ConfigError("eot_n must be >= 1")

    @property
    def alpha(self):
        return self.step_size if self.step_size is not None else self.epsilon / self.steps

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown attack options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    success: bool
    queries_used: int
    loss: float
    linf: float
    l2: float
    label: int
    target: int = None
    pred: int = None
    trace: list = field(default=None, repr=False)


# ---------------------------------------------------------------- plumbing

def _setup(clouds, labels, cfg, targets):
    x = np.asarray(clouds, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    labels = np.broadcast_to(np.atleast_1d(np.asarray(labels, np.int64)), (len(x),)).copy()
    if cfg.targeted:
        if targets is None:
            if cfg.target_label is None:
                raise ConfigError("targeted attack needs target_label")
            targets = cfg.target_label
        targets = np.broadcast_to(np.atleast_1d(np.asarray(targets, np.int64)), (len(x),)).copy()
        if np.any(targets == labels):
            raise ConfigError("target label equals the true label")
    else:
        targets = None
    return x, single, labels, targets


def _finish(view, x, x_adv, labels, targets, queries, keys, single, traces=None):
    logits = view.predict(x_adv)
    pred = np.argmax(logits, axis=1)
    if targets is not None:
        success = pred == targets
        loss = gradcore.cross_entropy(logits, targets)
    else:
        success = pred != labels
        loss = gradcore.cross_entropy(logits, labels)
    same_shape = x_adv.shape == x.shape
    out = []
    for b in range(len(x_adv)):
        if same_shape:
            delta = x_adv[b] - x[b]
            linf, l2 = float(np.max(np.abs(delta))), float(np.sqrt(np.sum(delta * delta)))
        else:
            linf = l2 = float("nan")
        out.append(AttackResult(
            x_adv=x_adv[b], success=bool(success[b]), queries_used=int(queries[b]) + 1,
            loss=float(loss[b]), linf=linf, l2=l2, label=int(labels[b]),
            target=None if targets is None else int(targets[b]), pred=int(pred[b]),
            trace=None if traces is None else traces[b],
        ))
    return out[0] if single else out


def _keys(keys, B):
    return np.arange(B) if keys is None else np.asarray(keys, dtype=np.int64)


def _project(x_new, x, eps):
    return np.clip(np.clip(x_new, x - eps, x + eps), 0.0, 1.0)


# ---------------------------------------------------------------- gradient-sign family

def fgm(view, clouds, labels, cfg, targets=None, keys=None):
    """One signed step of size epsilon."""
    x, single, labels, targets = _setup(clouds, labels, cfg, targets)
    keys = _keys(keys, len(x))
    glabels, sign = (targets, -1.0) if cfg.targeted else (labels, 1.0)
    _, g = view.grad(x, glabels, "ce", keys)
    x_adv = np.clip(x + sign * cfg.epsilon * np.sign(g), 0.0, 1.0)
    queries = np.full(len(x), view.query_cost)
    return _finish(view, x, x_adv, labels, targets, queries, keys, single)


def _iterate(view, x, x_start, labels, targets, cfg, keys, momentum=None):
    glabels, sign = (targets, -1.0) if cfg.targeted else (labels, 1.0)
    alpha, eps = cfg.alpha, cfg.epsilon
    xa = x_start
    acc = np.zeros_like(x)
    for _ in range(cfg.steps):
        _, g = view.grad(xa, glabels, "ce", keys)
        if momentum is not None:
            l1 = np.abs(g).sum(axis=(1, 2), keepdims=True)
            # an all-zero gradient contributes nothing to the accumulator
            g = momentum * acc + np.divide(g, l1, out=np.zeros_like(g), where=l1 > 0)
            acc = g
        xa = _project(xa + sign * alpha * np.sign(g), x, eps)
    return xa, np.full(len(x), cfg.steps * view.query_cost)


def ifgm(view, clouds, labels, cfg, targets=None, keys=None):
    """``steps`` signed steps of size ``alpha``, projected to the eps-ball and [0, 1]."""
    x, single, labels, targets = _setup(clouds, labels, cfg, targets)
    keys = _keys(keys, len(x))
    x_adv, q = _iterate(view, x, x, labels, targets, cfg, keys)
    return _finish(view, x, x_adv, labels, targets, q, keys, single)


def mifgm(view, clouds, labels, cfg, targets=None, keys=None):
    """I-FGM on an L1-normalised momentum accumulator (decay ``cfg.momentum``)."""
    x, single, labels, targets = _setup(clouds, labels, cfg, targets)
    keys = _keys(keys, len(x))
    x_adv, q = _iterate(view, x, x, labels, targets, cfg, keys, momentum=cfg.momentum)
    return _finish(view, x, x_adv, labels, targets, q, keys, single)


def pgd(view, clouds, labels, cfg, targets=None, keys=None):
    """I-FGM from a uniform random start inside the eps-ball."""
    x, single, labels, targets = _setup(clouds, labels, cfg, targets)
    keys = _keys(keys, len(x))
    noise = np.stack([
        gradcore.make_rng(cfg.seed, 0x96D, int(k)).uniform(-cfg.epsilon, cfg.epsilon, x.shape[1:])
        for k in keys
    ])
    x_start = np.clip(x + noise, 0.0, 1.0)
    x_adv, q = _iterate(view, x, x_start, labels, targets, cfg, keys)
    return _finish(view, x, x_adv, labels, targets, q, keys, single)


# ---------------------------------------------------------------- optimisation family

def knn_threshold(clouds, k, percentile=90.0):
    """Per-cloud percentile of the mean kNN distance."""
    d, _, _ = _knn(np.asarray(clouds, dtype=np.float64), k)
    return np.percentile(d, percentile, axis=1)


def _knn(x, k):
    B, N, _ = x.shape
    sq = np.einsum("bnd,bnd->bn", x, x)
    d2 = sq[:, :, None] + sq[:, None, :] - 2.0 * (x @ x.transpose(0, 2, 1))
    idx = np.arange(N)
    d2[:, idx, idx] = np.inf
    nbr = np.argpartition(d2, k - 1, axis=2)[:, :, :k]
    diff = x[:, :, None, :] - np.take_along_axis(x[:, None, :, :], nbr[..., None], axis=2)
    dist = np.sqrt(np.sum(diff * diff, axis=3))
    return dist.mean(axis=2), nbr, (diff, dist)


def knn_penalty(clouds, k, tau):
    """Mean over points of their mean kNN distance, counting only values above ``tau``."""
    x = np.asarray(clouds, dtype=np.float64)
    single = x.ndim == 2
    x = x[None] if single else x
    d, _, _ = _knn(x, k)
    tau = np.broadcast_to(np.atleast_1d(tau), (len(x),))
    val = np.where(d > tau[:, None], d, 0.0).mean(axis=1)
    return float(val[0]) if single else val


def _knn_penalty_grad(x, k, tau):
    B, N, _ = x.shape
    d, nbr, (diff, dist) = _knn(x, k)
    w = (d > tau[:, None]) / (N * k)
    unit = np.divide(diff, dist[..., None], out=np.zeros_like(diff), where=dist[..., None] > 0)
    contrib = w[:, :, None, None] * unit
    grad = contrib.sum(axis=2)
    flat = (nbr + (np.arange(B) * N)[:, None, None]).ravel()
    g = grad.reshape(B * N, 3)
    np.subtract.at(g, flat, contrib.reshape(-1, 3))
    return g.reshape(B, N, 3)


def _adam_search(view, x, labels, targets, cfg, keys, knn_lambda):
    B = len(x)
    kappa = cfg.cw_kappa
    beta1, beta2, tiny = 0.9, 0.999, 1e-8
    tau = knn_threshold(x, cfg.knn_k, cfg.knn_percentile) if knn_lambda else None
    lower, upper = np.zeros(B), np.full(B, 1e10)
    c = np.full(B, float(cfg.cw_c))
    best_l2 = np.full(B, np.inf)
    best_x = x.copy()
    queries = np.zeros(B, dtype=np.int64)

    def record(xa, d, hit):
        l2 = np.sum((xa - x) ** 2, axis=(1, 2))
        better = (d < 0) & (l2 < best_l2)
        best_l2[better] = l2[better]
        best_x[better] = xa[better]
        hit |= d < 0

    xa = x
    for _ in range(max(1, cfg.binary_search_steps)):
        xa = x.copy()
        m, v = np.zeros_like(x), np.zeros_like(x)
        hit = np.zeros(B, dtype=bool)
        for it in range(1, cfg.iterations + 1):
            d, gd = view.grad(xa, targets, "margin", keys)
            queries += view.query_cost
            record(xa, d, hit)
            g = 2.0 * (xa - x) + (c * (d > -kappa))[:, None, None] * gd
            if knn_lambda:
                g = g + knn_lambda * _knn_penalty_grad(xa, cfg.knn_k, tau)
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            step = (m / (1 - beta1 ** it)) / (np.sqrt(v / (1 - beta2 ** it)) + tiny)
            xa = np.clip(xa - cfg.lr * step, 0.0, 1.0)
        d = gradcore.margin(view.predict(xa), targets)
        queries += 1
        record(xa, d, hit)
        upper = np.where(hit, np.minimum(upper, c), upper)
        lower = np.where(hit, lower, np.maximum(lower, c))
        c = np.where(upper < 1e9, (lower + upper) / 2, c * 10)

    found = np.isfinite(best_l2)
    x_adv = np.where(found[:, None, None], best_x, xa)
    return x_adv, queries


def cw_l2(view, clouds, labels, cfg, targets=None, keys=None):
    """Targeted C&W-L2 point perturbation with Adam, clipping and a search over c."""
    if not cfg.targeted:
        raise ConfigError("cw_l2 is targeted only")
    x, single, labels, targets = _setup(clouds, labels, cfg, targets)
    keys = _keys(keys, len(x))
    x_adv, q = _adam_search(view, x, labels, targets, cfg, keys, 0.0)
    return _finish(view, x, x_adv, labels, targets, q, keys, single)


def knn_attack(view, clouds, labels, cfg, targets=None, keys=None):
    """C&W-L2 plus ``knn_lambda`` times the kNN-distance penalty."""
    if not cfg.targeted:
        raise ConfigError("knn_attack is targeted only")
    x, single, labels, targets = _setup(clouds, labels, cfg, targets)
    keys = _keys(keys, len(x))
    x_adv, q = _adam_search(view, x, labels, targets, cfg, keys, cfg.knn_lambda)
    return _finish(view, x, x_adv, labels, targets, q, keys, single)


# ---------------------------------------------------------------- point dropping

def drop_schedule(drop_count, rounds):
    per = drop_count // rounds
    return [per] * (rounds - 1) + [drop_count - per * (rounds - 1)]


def point_drop(view, clouds, labels, cfg, targets=None, keys=None):
    """Untargeted saliency point dropping.

    Each round scores ``s_i = -grad_i . (x_i - median(x))`` and removes the
    highest-scoring points (ties go to the lower index); surviving points keep
    their order.
    """
    if cfg.targeted:
        raise ConfigError("point_drop is untargeted")
    x, single, labels, _ = _setup(clouds, labels, cfg, None)
    keys = _keys(keys, len(x))
    if not 0 <= cfg.drop_count < x.shape[1]:
        raise ConfigError("drop_count must be in [0, N)")
    xa = x
    queries = np.zeros(len(x), dtype=np.int64)
    if cfg.drop_count:
        for count in drop_schedule(cfg.drop_count, cfg.drop_rounds):
            if count == 0:
                continue
            _, g = view.grad(xa, labels, "ce", keys)
            queries += view.query_cost
            med = np.median(xa, axis=1, keepdims=True)
            score = -np.sum(g * (xa - med), axis=2)
            drop = np.argsort(-score, axis=1, kind="stable")[:, :count]
            keep = np.ones(score.shape, dtype=bool)
            np.put_along_axis(keep, drop, False, axis=1)
            xa = xa[keep].reshape(len(xa), -1, 3)
    return _finish(view, x, xa, labels, None, queries, keys, single)


_DISPATCH = {
    "fgm": fgm, "ifgm": ifgm, "mifgm": mifgm, "pgd": pgd,
    "cw": cw_l2, "knn": knn_attack, "drop": point_drop,
}


def run_attack(view, clouds, labels, cfg, targets=None, keys=None):
    """Dispatch on ``cfg.kind``, wrapping the view in EOT when ``cfg.eot_n > 1``."""
    if cfg.eot_n > 1 and not isinstance(view, EOTView):
        view = EOTView(view, cfg.eot_n)
    return _DISPATCH[cfg.kind](view, clouds, labels, cfg, targets, keys)
