"""PointNet-lite classifier: architecture, training, evaluation, checkpoints."""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import gradcore
from .errors import ConfigError, DivergedError, FormatError

CHECKPOINT_MAGIC = b"PGCK"
CHECKPOINT_VERSION = 1
F32_MAX = float(np.finfo(np.float32).max)


@dataclass(frozen=True)
class Architecture:
    point_mlp_dims: tuple = (3, 64, 64, 128, 256)
    head_dims: tuple = (256, 128, 8)

    def __post_init__(self):
        object.__setattr__(self, "point_mlp_dims", tuple(int(d) for d in self.point_mlp_dims))
        object.__setattr__(self, "head_dims", tuple(int(d) for d in self.head_dims))
        if len(self.point_mlp_dims) < 2 or len(self.head_dims) < 2:
            raise ConfigError("need at least one point layer and one head layer")
        if self.point_mlp_dims[0] != 3:
            raise ConfigError("first point-MLP dim must be 3")
        if self.head_dims[0] != self.point_mlp_dims[-1]:
            raise ConfigError("head input must equal last point-MLP width")
        if min(self.point_mlp_dims + self.head_dims) < 1:
            raise ConfigError("all layer widths must be >= 1")

    @classmethod
    def default(cls, num_classes=8):
        return cls(head_dims=(256, 128, num_classes))

    @property
    def num_classes(self):
        return self.head_dims[-1]

    @property
    def layer_dims(self):
        return list(self.point_mlp_dims) + list(self.head_dims[1:])

    def to_dict(self):
        return {"point_mlp_dims": list(self.point_mlp_dims), "head_dims": list(self.head_dims)}


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Weights ``(fan_in, fan_out)`` and biases for each layer in order.

    Values are rounded to float32 on construction so a checkpoint round trip
    is exact; arithmetic stays float64.
    """

    arch: Architecture
    weights: tuple
    biases: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ws = tuple(_f32_exact(w) for w in self.weights)
        bs = tuple(_f32_exact(b) for b in self.biases)
        dims = self.arch.layer_dims
        if len(ws) != len(dims) - 1 or len(bs) != len(ws):
            raise ConfigError("number of tensors does not match architecture")
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ConfigError(f"layer {i} has shape {w.shape}/{b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ConfigError(f"layer {i} contains non-finite values")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    def __eq__(self, other):
        if not isinstance(other, ModelParams) or self.arch != other.arch:
            return False
        return all(
            np.array_equal(a, b)
            for a, b in zip(self.weights + self.biases, other.weights + other.biases)
        )

    @property
    def num_classes(self):
        return self.arch.num_classes


def _f32_exact(a):
    a = np.asarray(a, dtype=np.float64).astype(np.float32).astype(np.float64)
    a.setflags(write=False)
    return a


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    weight_init_scale: float = 1.0
    # per-cloud augmentation: anisotropic scale in [1-a, 1+a], shift in [-a, a],
    # gaussian jitter whose std is drawn from [0, a]
    augment_scale: float = 0.0
    augment_shift: float = 0.0
    augment_jitter: float = 0.0

    def __post_init__(self):
        if min(self.augment_scale, self.augment_shift, self.augment_jitter) < 0:
            raise ConfigError("augmentation magnitudes must be >= 0")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")


def init_params(arch, seed, scale=1.0):
    """He-uniform init: ``W ~ U(-a, a)`` with ``a = scale * sqrt(6 / fan_in)``.

    The resulting weight std is ``scale * sqrt(2 / fan_in)``. Biases are zero.
    """
    rng = gradcore.make_rng(seed, 0x1A17)
    dims = arch.layer_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = scale * np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)) if scale else np.zeros((fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(arch, tuple(weights), tuple(biases), {"seed": int(seed)})


def predict(params, clouds, batch_size=256):
    """Argmax predictions for a ``(M, N, 3)`` array of clouds."""
    clouds = np.asarray(clouds, dtype=np.float64)
    out = np.empty(len(clouds), dtype=np.int64)
    for s in range(0, len(clouds), batch_size):
        logits, _ = gradcore.forward(params, clouds[s:s + batch_size])
        out[s:s + batch_size] = np.argmax(logits, axis=1)
    return out


def train(params, dataset, cfg, eval_dataset=None, log=None):
    """Mini-batch SGD with classical momentum on mean cross-entropy.

    When the cfg enables augmentation, each batch is randomly rescaled per
    axis about the cube centre, shifted and jittered with a random noise level
    before the forward pass.

    Args:
        params: starting ModelParams.
        dataset: object with ``points (M, N, 3)`` and ``labels (M,)``.
        cfg: TrainConfig.
        eval_dataset: optional; its accuracy is added to each history entry.
        log: optional callable taking one history dict per epoch.

    Returns:
        ``(params, history)``.
    """
    points = np.asarray(dataset.points, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if len(points) == 0:
        raise ConfigError("training set is empty")
    if labels.max() >= params.num_classes:
        raise ConfigError("label exceeds number of classes")

    weights = [w.copy() for w in params.weights]
    biases = [b.copy() for b in params.biases]
    vel_w = [np.zeros_like(w) for w in weights]
    vel_b = [np.zeros_like(b) for b in biases]
    history = []
    M = len(points)

    for epoch in range(cfg.epochs):
        perm = gradcore.make_rng(cfg.seed, 0x7EA1, epoch).permutation(M)
        total_loss, correct = 0.0, 0
        for s in range(0, M, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            cur = _RawParams(params.arch, weights, biases)
            logits, cache = gradcore.forward(cur, _augment(points[idx], cfg, epoch, s))
            loss, dlog = gradcore.loss_and_dlogits(logits, labels[idx], "ce")
            if not np.all(np.isfinite(loss)):
                raise DivergedError(epoch)
            total_loss += float(loss.sum())
            correct += int(np.sum(np.argmax(logits, axis=1) == labels[idx]))
            _, (dW, db) = gradcore.backward(
                cur, cache, dlog / len(idx), want_params=True, want_input=False
            )
            for i in range(len(weights)):
                vel_w[i] = cfg.momentum * vel_w[i] - cfg.learning_rate * dW[i]
                vel_b[i] = cfg.momentum * vel_b[i] - cfg.learning_rate * db[i]
                weights[i] = weights[i] + vel_w[i]
                biases[i] = biases[i] + vel_b[i]
        # parameters are stored as float32, so overflow there counts as divergence
        if not all(np.all(np.abs(w) < F32_MAX) for w in weights + biases):
            raise DivergedError(epoch)
        entry = {"epoch": epoch + 1, "loss": total_loss / M, "train_accuracy": correct / M}
        if eval_dataset is not None:
            cur = _RawParams(params.arch, weights, biases)
            entry["test_accuracy"] = float(
                np.mean(predict(cur, eval_dataset.points) == eval_dataset.labels)
            )
        history.append(entry)
        if log is not None:
            log(entry)

    meta = dict(params.meta)
    meta.update(
        train_seed=cfg.seed,
        epochs=int(meta.get("epochs", 0)) + cfg.epochs,
        final_train_accuracy=history[-1]["train_accuracy"] if history else None,
    )
    if history and "test_accuracy" in history[-1]:
        meta["final_test_accuracy"] = history[-1]["test_accuracy"]
    return ModelParams(params.arch, tuple(weights), tuple(biases), meta), history


def _augment(x, cfg, epoch, step):
    if not (cfg.augment_scale or cfg.augment_shift or cfg.augment_jitter):
        return x
    rng = gradcore.make_rng(cfg.seed, 0xA06, epoch, step)
    B = len(x)
    scale = rng.uniform(1 - cfg.augment_scale, 1 + cfg.augment_scale, (B, 1, 3))
    shift = rng.uniform(-cfg.augment_shift, cfg.augment_shift, (B, 1, 3))
    std = rng.uniform(0, cfg.augment_jitter, (B, 1, 1))
    return (x - 0.5) * scale + 0.5 + shift + std * rng.standard_normal(x.shape)


@dataclass
class _RawParams:
    # unrounded float64 weights used inside the training loop
    arch: Architecture
    weights: list
    biases: list

    @property
    def num_classes(self):
        return self.arch.num_classes


def evaluate(params, dataset, view=None, batch_size=256):
    """Fraction of argmax-correct predictions, optionally through a ModelView."""
    points = np.asarray(dataset.points, dtype=np.float64)
    if len(points) == 0:
        raise ConfigError("evaluation set is empty")
    if view is None:
        preds = predict(params, points, batch_size)
    else:
        preds = np.concatenate([
            np.argmax(view.predict(points[s:s + batch_size]), axis=1)
            for s in range(0, len(points), batch_size)
        ])
    return float(np.mean(preds == np.asarray(dataset.labels)))


def save_checkpoint(params, path):
    """Write ``params`` in the checkpoint format described in docs/formats.md."""
    tensors, offset = [], 0
    payload = []
    for kind, arrays in (("weight", params.weights), ("bias", params.biases)):
        for i, a in enumerate(arrays):
            raw = a.astype("<f4").tobytes()
            tensors.append({"name": f"{kind}{i}", "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
            payload.append(raw)
            offset += len(raw)
    header = json.dumps(
        {
            "format": "pointguard-checkpoint",
            "version": CHECKPOINT_VERSION,
            "architecture": params.arch.to_dict(),
            "num_classes": params.num_classes,
            "meta": params.meta,
            "tensors": tensors,
            "payload_nbytes": offset,
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        f.write(b"".join(payload))


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise FormatError("file too short for checkpoint preamble", len(blob))
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad magic, not a checkpoint", 0)
    version, hlen = struct.unpack_from("<IQ", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    if 16 + hlen > len(blob):
        raise FormatError("header extends past end of file", len(blob))
    try:
        header = json.loads(blob[16:16 + hlen])
        arch = Architecture(**header["architecture"])
        tensors = {t["name"]: t for t in header["tensors"]}
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"corrupt header: {e}", 16) from None
    base = 16 + hlen
    n_layers = len(arch.layer_dims) - 1

    def read(name, shape):
        t = tensors.get(name)
        if t is None:
            raise FormatError(f"missing tensor {name}", 16)
        if tuple(t["shape"]) != tuple(shape):
            raise FormatError(f"tensor {name} has shape {t['shape']}, expected {list(shape)}", 16)
        start = base + t["offset"]
        end = start + int(np.prod(shape)) * 4
        if end > len(blob):
            raise FormatError(f"payload for {name} truncated", len(blob))
        return np.frombuffer(blob, dtype="<f4", count=int(np.prod(shape)), offset=start).reshape(shape)

    dims = arch.layer_dims
    weights = tuple(read(f"weight{i}", (dims[i], dims[i + 1])) for i in range(n_layers))
    biases = tuple(read(f"bias{i}", (dims[i + 1],)) for i in range(n_layers))
    return ModelParams(arch, weights, biases, header.get("meta", {}))
