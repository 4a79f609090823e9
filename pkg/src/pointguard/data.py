"""Synthetic shape dataset: surface samplers, normalisation, on-disk format."""

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError, FormatError
from .gradcore import make_rng

FAMILIES = ("sphere", "cube", "cylinder", "cone", "torus", "pyramid", "disk", "helix")

TORUS_MAJOR, TORUS_MINOR = 1.0, 0.35
HELIX_TURNS, HELIX_HEIGHT, HELIX_TUBE = 2.0, 2.0, 0.1


@dataclass
class DatasetSpec:
    classes: list = field(default_factory=lambda: list(FAMILIES))
    train_per_class: int = 330
    test_per_class: int = 70
    n_points: int = 256
    noise_std: float = 0.01
    rotation: bool = True
    seed: int = 0

    def __post_init__(self):
        self.classes = list(self.classes)
        unknown = [c for c in self.classes if c not in FAMILIES]
        if unknown:
            raise ConfigError(f"unknown shape families: {unknown}")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigError("per-class counts must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.n_points < 8:
            raise ConfigError("n_points must be >= 8")

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def to_dict(self):
        return asdict(self)


@dataclass
class Dataset:
    """Clouds ``(M, N, 3)`` (float64 holding float32 values), labels, ids."""

    points: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    classes: list
    splits: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self):
        return len(self.classes)

    def split(self, name):
        wanted = set(self.splits[name])
        return self.subset([i for i, sid in enumerate(self.ids) if int(sid) in wanted])

    def subset(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.points[rows], self.labels[rows], self.ids[rows], self.classes, {}, dict(self.meta))


# ---------------------------------------------------------------- surfaces

def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _triangle(rng, a, b, c, n):
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def _pick_faces(rng, areas, n):
    p = np.asarray(areas, dtype=np.float64)
    return rng.choice(len(p), size=n, p=p / p.sum())


def _sphere(rng, n):
    return _unit(rng.normal(size=(n, 3)))


def _cube(rng, n):
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-1, 1, (n, 2))
    axis, sign = face // 2, np.where(face % 2 == 0, -1.0, 1.0)
    pts = np.empty((n, 3))
    for ax in range(3):
        sel = axis == ax
        others = [a for a in range(3) if a != ax]
        pts[sel, ax] = sign[sel]
        pts[np.ix_(sel, others)] = uv[sel]
    return pts


def _cylinder(rng, n, r=0.5, h=2.0):
    part = _pick_faces(rng, [2 * np.pi * r * h, np.pi * r * r, np.pi * r * r], n)
    theta = rng.uniform(0, 2 * np.pi, n)
    rad = np.where(part == 0, r, r * np.sqrt(rng.random(n)))
    z = np.where(part == 0, rng.uniform(-h / 2, h / 2, n), np.where(part == 1, h / 2, -h / 2))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _cone(rng, n, r=1.0, h=1.5):
    slant = np.hypot(r, h)
    part = _pick_faces(rng, [np.pi * r * slant, np.pi * r * r], n)
    theta = rng.uniform(0, 2 * np.pi, n)
    s = np.sqrt(rng.random(n))  # area grows linearly with distance from apex
    rad = r * s
    z = np.where(part == 0, h * (1 - s), 0.0)
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _torus(rng, n, R=TORUS_MAJOR, r=TORUS_MINOR):
    # tube angle density is proportional to R + r cos(v); rejection sample it
    v = np.empty(0)
    while len(v) < n:
        cand = rng.uniform(0, 2 * np.pi, 2 * n)
        keep = rng.random(2 * n) * (R + r) < R + r * np.cos(cand)
        v = np.concatenate([v, cand[keep]])
    v = v[:n]
    u = rng.uniform(0, 2 * np.pi, n)
    ring = R + r * np.cos(v)
    return np.stack([ring * np.cos(u), ring * np.sin(u), r * np.sin(v)], axis=1)


def _pyramid(rng, n, half=1.0, h=1.5):
    base = np.array([[-half, -half, 0], [half, -half, 0], [half, half, 0], [-half, half, 0]], float)
    apex = np.array([0, 0, h], float)
    tris = [(base[i], base[(i + 1) % 4], apex) for i in range(4)]
    tris += [(base[0], base[1], base[2]), (base[0], base[2], base[3])]
    areas = [0.5 * np.linalg.norm(np.cross(b - a, c - a)) for a, b, c in tris]
    face = _pick_faces(rng, areas, n)
    pts = np.empty((n, 3))
    for f, (a, b, c) in enumerate(tris):
        sel = face == f
        pts[sel] = _triangle(rng, a, b, c, int(sel.sum()))
    return pts


def _disk(rng, n):
    rad = np.sqrt(rng.random(n))
    theta = rng.uniform(0, 2 * np.pi, n)
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), np.zeros(n)], axis=1)


def _helix(rng, n):
    c = HELIX_HEIGHT / (2 * np.pi * HELIX_TURNS)
    kappa = 1.0 / (1.0 + c * c)
    rho = HELIX_TUBE
    # tube area element is proportional to 1 - kappa*rho*cos(phi)
    phi = np.empty(0)
    while len(phi) < n:
        cand = rng.uniform(0, 2 * np.pi, 2 * n)
        keep = rng.random(2 * n) * (1 + kappa * rho) < 1 - kappa * rho * np.cos(cand)
        phi = np.concatenate([phi, cand[keep]])
    phi = phi[:n]
    t = rng.uniform(0, 2 * np.pi * HELIX_TURNS, n)
    centre = np.stack([np.cos(t), np.sin(t), c * t - HELIX_HEIGHT / 2], axis=1)
    normal = np.stack([-np.cos(t), -np.sin(t), np.zeros(n)], axis=1)
    tangent = _unit(np.stack([-np.sin(t), np.cos(t), np.full(n, c)], axis=1))
    binormal = np.cross(tangent, normal)
    return centre + rho * (np.cos(phi)[:, None] * normal + np.sin(phi)[:, None] * binormal)


_SAMPLERS = {
    "sphere": _sphere,
    "cube": _cube,
    "cylinder": _cylinder,
    "cone": _cone,
    "torus": _torus,
    "pyramid": _pyramid,
    "disk": _disk,
    "helix": _helix,
}


def sample_surface(family, n_points, rng):
    """Area-uniform samples on the ideal (unrotated, unnormalised) surface."""
    if family not in _SAMPLERS:
        raise ConfigError(f"unknown shape family {family!r}")
    return _SAMPLERS[family](rng, n_points)


def normalize_cloud(points):
    """Similarity map into the unit cube.

    The longest bounding-box axis spans exactly [0, 1]; the other axes are
    centred on 0.5.
    """
    p = np.asarray(points, dtype=np.float64)
    lo, hi = p.min(axis=0), p.max(axis=0)
    extent = hi - lo
    longest = extent.max()
    if not longest > 0:
        raise DegenerateInputError("all points coincide; cannot normalise")
    out = (p - lo) / longest + (1.0 - extent / longest) / 2.0
    return np.clip(out, 0.0, 1.0)


def generate_shape(family, n_points, rng, noise_std=0.01, rotation=True):
    """One normalised cloud: sample, rotate about z, jitter, normalise.

    Returns:
        ``(n_points, 3)`` float64 array in [0, 1].
    """
    if n_points < 8:
        raise ConfigError("n_points must be >= 8")
    pts = sample_surface(family, n_points, rng)
    if rotation:
        a = rng.uniform(0, 2 * np.pi)
        rot = np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]])
        pts = pts @ rot.T
    if noise_std > 0:
        pts = pts + rng.normal(scale=noise_std, size=pts.shape)
    return normalize_cloud(pts)


# ---------------------------------------------------------------- storage

def generate_dataset(spec):
    """Build the in-memory dataset for ``spec`` (train samples first)."""
    pts, labels, splits = [], [], {"train": [], "test": []}
    sid = 0
    for split, count in (("train", spec.train_per_class), ("test", spec.test_per_class)):
        for label, family in enumerate(spec.classes):
            for _ in range(count):
                rng = make_rng(spec.seed, 0xDA7A, sid)
                cloud = generate_shape(family, spec.n_points, rng, spec.noise_std, spec.rotation)
                pts.append(cloud.astype(np.float32))
                labels.append(label)
                splits[split].append(sid)
                sid += 1
    points = np.stack(pts).astype(np.float64)
    meta = {"spec": spec.to_dict()}
    return Dataset(points, np.asarray(labels, np.int64), np.arange(sid, dtype=np.int64),
                   list(spec.classes), splits, meta)


def write_dataset(ds, out_dir, extra_meta=None):
    """Write ``ds`` as ``meta.json`` + ``points.f32`` + ``labels.u16``."""
    os.makedirs(out_dir, exist_ok=True)
    M, N = ds.points.shape[:2]
    meta = {
        "format": "pointguard-dataset",
        "version": 1,
        "n_samples": int(M),
        "n_points": int(N),
        "num_classes": len(ds.classes),
        "classes": list(ds.classes),
        "ids": [int(i) for i in ds.ids],
        "splits": {k: [int(i) for i in v] for k, v in ds.splits.items()},
        "counts": {k: len(v) for k, v in ds.splits.items()},
    }
    meta.update(ds.meta)
    if extra_meta:
        meta.update(extra_meta)
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
    ds.points.astype("<f4").tofile(os.path.join(out_dir, "points.f32"))
    ds.labels.astype("<u2").tofile(os.path.join(out_dir, "labels.u16"))


def build_dataset(spec, out_dir):
    ds = generate_dataset(spec)
    write_dataset(ds, out_dir)
    return ds


def load_dataset(path):
    """Read a dataset directory, validating every stored cloud."""
    meta_path = os.path.join(path, "meta.json")
    try:
        with open(meta_path) as f:
            meta = json.load(f)
        M, N, K = meta["n_samples"], meta["n_points"], meta["num_classes"]
        classes, ids = meta["classes"], meta["ids"]
    except (ValueError, KeyError) as e:
        raise FormatError(f"{meta_path}: {e}", 0) from None
    with open(os.path.join(path, "points.f32"), "rb") as f:
        raw = f.read()
    if len(raw) != M * N * 3 * 4:
        raise FormatError(f"points.f32 holds {len(raw)} bytes, expected {M * N * 12}",
                          min(len(raw), M * N * 12))
    with open(os.path.join(path, "labels.u16"), "rb") as f:
        lraw = f.read()
    if len(lraw) != M * 2:
        raise FormatError(f"labels.u16 holds {len(lraw)} bytes, expected {M * 2}", min(len(lraw), M * 2))
    points = np.frombuffer(raw, dtype="<f4").reshape(M, N, 3)
    labels = np.frombuffer(lraw, dtype="<u2").astype(np.int64)
    bad = np.flatnonzero(~((points >= 0) & (points <= 1)).ravel())
    if len(bad):
        raise FormatError(f"coordinate outside [0, 1] in points.f32", int(bad[0]) * 4)
    bad = np.flatnonzero(labels >= K)
    if len(bad):
        raise FormatError(f"label {labels[bad[0]]} >= {K} in labels.u16", int(bad[0]) * 2)
    if len(ids) != M:
        raise FormatError("meta ids length does not match n_samples", 0)
    extra = {k: v for k, v in meta.items() if k not in
             ("format", "version", "n_samples", "n_points", "num_classes", "classes", "ids", "splits", "counts")}
    return Dataset(points.astype(np.float64), labels, np.asarray(ids, np.int64), list(classes),
                   {k: list(v) for k, v in meta.get("splits", {}).items()}, extra)
