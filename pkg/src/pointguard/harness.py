"""Experiment runner: attack x defense grids, sweeps, exports and interaction runs.

Every run writes three files into its output directory:

* ``records.jsonl``: one JSON object per (repeat, defense, attack, sample).
* ``summary.csv``: per (attack, defense) aggregates over repeats.
* ``report.json``: the aggregates plus the full config echo and timing.

The summary is a pure function of the records (see :func:`aggregate`).
"""

import copy
import csv
import io
import json
import os
import time
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import attacks, data, defenses, interactions, model
from .errors import ConfigError, InputError

SCHEMA_VERSION = 1
OUT_ENV = "POINTGUARD_OUT"

# every ExperimentConfig default, echoed verbatim into each report
DEFAULTS = {
    "dataset": None,
    "checkpoint": None,
    "split": "test",
    "defenses": [{"kind": "none"}],
    "attacks": [],
    "sample_limit": None,
    "repeats": 5,
    "seed": 0,
    "out_dir": None,
    "batch_size": 100,
}

SUMMARY_COLUMNS = [
    "attack", "defense", "n_samples", "repeats", "success_mean", "success_std",
    "accuracy_mean", "accuracy_std", "linf_mean", "l2_mean", "queries_mean",
]


@dataclass
class ExperimentConfig:
    dataset: str = None
    checkpoint: str = None
    split: str = "test"
    defenses: list = field(default_factory=lambda: [{"kind": "none"}])
    attacks: list = field(default_factory=list)
    sample_limit: int = None
    repeats: int = 5
    seed: int = 0
    out_dir: str = None
    batch_size: int = 100

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.defenses = [{"kind": d} if isinstance(d, str) else dict(d) for d in self.defenses]
        self.attacks = [{"kind": a} if isinstance(a, str) else dict(a) for a in self.attacks]
        if self.out_dir is None:
            self.out_dir = os.path.join(os.environ.get(OUT_ENV, "runs"), "eval")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged = copy.deepcopy(DEFAULTS)
        merged.update(d)
        return cls(**merged)

    @classmethod
    def from_json(cls, path):
        try:
            with open(path) as f:
                return cls.from_dict(json.load(f))
        except (OSError, ValueError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None

    def to_dict(self):
        return asdict(self)


def derive_seed(master, *parts):
    state = np.random.SeedSequence([int(master)] + [int(p) for p in parts]).generate_state(2, np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


def assign_targets(labels, ids, num_classes):
    """Target class ``(label + 1 + crc32(str(id)) mod (K - 1)) mod K``; never the label."""
    shift = np.array([zlib.crc32(str(int(i)).encode()) % (num_classes - 1) for i in ids])
    return (np.asarray(labels) + 1 + shift) % num_classes


def attack_name(spec):
    if spec.get("name"):
        return spec["name"]
    name = spec["kind"]
    if spec.get("eot_n", 1) > 1:
        name += f"+eot{spec['eot_n']}"
    return name


def defense_name(spec):
    return spec.get("name") or spec["kind"]


def _attack_config(spec, seed):
    spec = {k: v for k, v in spec.items() if k != "name"}
    spec.setdefault("seed", seed)
    return attacks.AttackConfig.from_dict(spec)


def _make_view(params, spec, seed):
    return defenses.make_view(params, {k: v for k, v in spec.items() if k != "name"}, seed)


def balanced_prefix(labels, limit):
    """Pick ``limit`` rows by taking classes in turn, keeping id order.

    Args:
        labels: Integer labels of the candidate rows.
        limit: Number of rows wanted.

    Returns:
        Sorted row indices.
    """
    labels = np.asarray(labels)
    rank = np.zeros(len(labels), np.int64)
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        rank[rows] = np.arange(len(rows))
    order = np.lexsort((labels, rank))
    return np.sort(order[:limit])


def _load_inputs(cfg):
    for what, path in (("dataset", cfg.dataset), ("checkpoint", cfg.checkpoint)):
        if not path or not os.path.exists(path):
            raise ConfigError(f"{what} path {path!r} does not exist")
    ds = data.load_dataset(cfg.dataset)
    if cfg.split:
        ds = ds.split(cfg.split)
    if cfg.sample_limit is not None:
        ds = ds.subset(balanced_prefix(ds.labels, cfg.sample_limit))
    params = model.load_checkpoint(cfg.checkpoint)
    if ds.num_classes != params.num_classes:
        raise ConfigError("dataset and checkpoint disagree on the number of classes")
    for spec in cfg.attacks:
        if spec.get("kind") != "none":
            _attack_config(spec, 0)
    return ds, params


def _num(v):
    v = float(v)
    return None if not np.isfinite(v) else v


def run_samples(view, acfg, ds, targets, batch_size):
    """Attack every sample of ``ds`` in fixed-size batches (sample order kept)."""
    out = []
    for s in range(0, len(ds), batch_size):
        sl = slice(s, s + batch_size)
        out.extend(attacks.run_attack(
            view, ds.points[sl], ds.labels[sl], acfg,
            targets=targets[sl] if acfg.targeted else None, keys=ds.ids[sl]))
    return out


def _clean_preds(view, ds, batch_size):
    return np.concatenate([
        np.argmax(view.predict(ds.points[s:s + batch_size]), axis=1)
        for s in range(0, len(ds), batch_size)
    ])


def run_eval(cfg, log=None):
    """Run every (defense, attack) pair for every repeat and write the outputs.

    Repeat ``r`` derives each view seed and attack seed from ``(seed, r, ...)``.
    A pipeline with a deterministic view and a deterministic attack is computed
    once and its records reused for later repeats.

    Returns:
        The report dict (also written as report.json).
    """
    if isinstance(cfg, dict):
        cfg = ExperimentConfig.from_dict(cfg)
    t0 = time.time()
    ds, params = _load_inputs(cfg)
    targets = assign_targets(ds.labels, ds.ids, params.num_classes)
    records = []
    reuse = {}

    for r in range(cfg.repeats):
        for di, dspec in enumerate(cfg.defenses):
            dname = defense_name(dspec)
            view = _make_view(params, dspec, derive_seed(cfg.seed, r, di))
            preds = _clean_preds(view, ds, cfg.batch_size)
            for b in range(len(ds)):
                records.append({
                    "schema": SCHEMA_VERSION, "repeat": r, "defense": dname, "attack": "none",
                    "sample_id": int(ds.ids[b]), "label": int(ds.labels[b]), "target": None,
                    "pred": int(preds[b]), "success": None, "queries": 1,
                    "loss": None, "linf": 0.0, "l2": 0.0, "n_points": int(ds.points.shape[1]),
                })
            for ai, aspec in enumerate(cfg.attacks):
                if aspec.get("kind") == "none":
                    continue
                aname = attack_name(aspec)
                acfg = _attack_config(aspec, derive_seed(cfg.seed, r, di, ai, 1))
                view = _make_view(params, dspec, derive_seed(cfg.seed, r, di, ai))
                deterministic = not view.stochastic and acfg.kind != "pgd"
                key = (di, ai)
                if deterministic and key in reuse:
                    rows = [dict(row, repeat=r) for row in reuse[key]]
                else:
                    t1 = time.time()
                    results = run_samples(view, acfg, ds, targets, cfg.batch_size)
                    rows = [{
                        "schema": SCHEMA_VERSION, "repeat": r, "defense": dname, "attack": aname,
                        "sample_id": int(ds.ids[b]), "label": res.label, "target": res.target,
                        "pred": res.pred, "success": res.success, "queries": res.queries_used,
                        "loss": _num(res.loss), "linf": _num(res.linf), "l2": _num(res.l2),
                        "n_points": int(res.x_adv.shape[0]),
                    } for b, res in enumerate(results)]
                    if log:
                        rate = 100 * np.mean([row["success"] for row in rows])
                        log(f"repeat {r} {aname} vs {dname}: success {rate:.2f}% ({time.time() - t1:.1f}s)")
                    if deterministic:
                        reuse[key] = rows
                records.extend(rows)

    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "records.jsonl"), "w") as f:
        for row in records:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    summary = aggregate(records)
    with open(os.path.join(cfg.out_dir, "summary.csv"), "w", newline="") as f:
        f.write(summary_csv(summary))

    echo = cfg.to_dict()
    echo["attacks"] = [dict(_attack_config(a, 0).to_dict(), name=attack_name(a))
                       for a in cfg.attacks if a.get("kind") != "none"]
    report = {
        "schema_version": SCHEMA_VERSION,
        "config": echo,
        "defaults": DEFAULTS,
        "clean_accuracy": {row["defense"]: row["accuracy_mean"] for row in summary if row["attack"] == "none"},
        "cells": summary,
        "n_samples": len(ds),
        "wall_clock_s": time.time() - t0,
    }
    with open(os.path.join(cfg.out_dir, "report.json"), "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
    return report


def aggregate(records):
    """Per (attack, defense) mean and population std over repeats, in percent."""
    cells = {}
    for row in records:
        cells.setdefault((row["attack"], row["defense"]), {}).setdefault(row["repeat"], []).append(row)
    out = []
    for (aname, dname), reps in cells.items():
        acc = [100.0 * np.mean([r["pred"] == r["label"] for r in rows]) for rows in reps.values()]
        entry = {
            "attack": aname, "defense": dname,
            "n_samples": len(next(iter(reps.values()))), "repeats": len(reps),
            "accuracy_mean": float(np.mean(acc)), "accuracy_std": float(np.std(acc)),
        }
        if aname != "none":
            succ = [100.0 * np.mean([r["success"] for r in rows]) for rows in reps.values()]
            every = [r for rows in reps.values() for r in rows]
            linf = [r["linf"] for r in every if r["linf"] is not None]
            l2 = [r["l2"] for r in every if r["l2"] is not None]
            entry.update(
                success_mean=float(np.mean(succ)), success_std=float(np.std(succ)),
                linf_mean=float(np.mean(linf)) if linf else None,
                l2_mean=float(np.mean(l2)) if l2 else None,
                queries_mean=float(np.mean([r["queries"] for r in every])),
            )
        out.append(entry)
    return out


def summary_csv(summary):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in summary:
        w.writerow({k: ("" if row.get(k) is None else
                        (f"{row[k]:.6f}" if isinstance(row[k], float) else row[k]))
                    for k in SUMMARY_COLUMNS})
    return buf.getvalue()


def read_records(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def success_matrix(report):
    """``{attack: {defense: success_mean}}`` from a report."""
    out = {}
    for cell in report["cells"]:
        if cell["attack"] != "none":
            out.setdefault(cell["attack"], {})[cell["defense"]] = cell["success_mean"]
    return out


SWEEP_AXES = {"epsilon": "epsilon", "steps": "steps", "iterations": "iterations", "eot_n": "eot_n"}


def sweep(cfg, axis, values, log=None):
    """One run_eval per value of ``axis``; returns curve rows and writes sweep_<axis>.csv."""
    if isinstance(cfg, dict):
        cfg = ExperimentConfig.from_dict(cfg)
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    values = list(values)
    if not values or values != sorted(values):
        raise ConfigError("sweep values must be non-empty and sorted")
    rows = []
    for v in values:
        sub = copy.deepcopy(cfg)
        sub.attacks = [dict(a, **{SWEEP_AXES[axis]: v}) for a in cfg.attacks]
        for a, orig in zip(sub.attacks, cfg.attacks):
            a["name"] = attack_name(orig)
        sub.out_dir = os.path.join(cfg.out_dir, f"{axis}={v}")
        report = run_eval(sub, log)
        for cell in report["cells"]:
            if cell["attack"] == "none":
                continue
            rows.append({"axis": axis, "value": v, "attack": cell["attack"], "defense": cell["defense"],
                         "success_mean": cell["success_mean"], "success_std": cell["success_std"]})
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, f"sweep_{axis}.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["axis", "value", "attack", "defense", "success_mean", "success_std"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


def export_adv_samples(cfg, ids, path, epsilons=None):
    """Write clean and adversarial clouds (undefended and IT-defended) as a dataset.

    The first attack in ``cfg`` (I-FGM when none is given) is run once per
    budget. ``path`` receives a regular dataset directory plus manifest.json
    mapping each exported record to its source sample, group and budget.
    """
    if isinstance(cfg, dict):
        cfg = ExperimentConfig.from_dict(cfg)
    ds, params = _load_inputs(ExperimentConfig(**dict(cfg.to_dict(), sample_limit=None)))
    pos = {int(s): k for k, s in enumerate(ds.ids)}
    missing = [i for i in ids if int(i) not in pos]
    if missing:
        raise InputError(f"unknown sample ids: {missing}")
    sel = ds.subset([pos[int(i)] for i in ids])
    targets = assign_targets(sel.labels, sel.ids, params.num_classes)
    base = dict(cfg.attacks[0]) if cfg.attacks else {"kind": "ifgm"}
    base.pop("name", None)
    epsilons = epsilons or [base.get("epsilon", attacks.AttackConfig().epsilon)]

    clouds, labels, manifest = [], [], []

    def add(cloud, label, **info):
        manifest.append(dict(info, export_id=len(clouds)))
        clouds.append(np.asarray(cloud, dtype=np.float32).astype(np.float64))
        labels.append(int(label))

    for k in range(len(sel)):
        add(sel.points[k], sel.labels[k], group="clean", defense=None, epsilon=0.0,
            source_id=int(sel.ids[k]), target=int(targets[k]), pred=None)
    for eps in epsilons:
        acfg = _attack_config(dict(base, epsilon=eps), cfg.seed)
        for dkind in ("none", "it"):
            view = defenses.make_view(params, dkind, derive_seed(cfg.seed, 0, 0))
            res = run_samples(view, acfg, sel, targets, cfg.batch_size)
            for k, rr in enumerate(res):
                add(rr.x_adv, sel.labels[k], group="adv", defense=dkind, epsilon=float(eps),
                    source_id=int(sel.ids[k]), target=rr.target, pred=rr.pred, success=rr.success)

    out = data.Dataset(np.stack(clouds), np.array(labels), np.arange(len(clouds)), ds.classes,
                       {"export": list(range(len(clouds)))}, {})
    data.write_dataset(out, path, {"attack": acfg.kind})
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump({"attack": base, "epsilons": [float(e) for e in epsilons], "samples": manifest},
                  f, indent=1, sort_keys=True)
    return manifest


def interactions_run(cfg, grid, pairs=20, subsets=8, n_samples=4, n_points=32, out_dir=None):
    """Interaction profiles for clean, adversarial and IT-defended adversarial clouds.

    The adversarial clouds come from the first attack in ``cfg`` (I-FGM by
    default), run undefended and through IT-Defense. Profiles are averaged
    over the first ``n_samples`` samples; the payoff uses the true label.

    Returns:
        ``{condition: [row, ...]}`` with rows ``ratio, mean, stderr, n_eval``.
    """
    if isinstance(cfg, dict):
        cfg = ExperimentConfig.from_dict(cfg)
    cfg = copy.deepcopy(cfg)
    cfg.sample_limit = n_samples
    ds, params = _load_inputs(cfg)
    targets = assign_targets(ds.labels, ds.ids, params.num_classes)
    base = dict(cfg.attacks[0]) if cfg.attacks else {"kind": "ifgm"}
    acfg = _attack_config(base, cfg.seed)
    clouds = {"clean": ds.points}
    for cond, dkind in (("adv", "none"), ("adv_it", "it")):
        view = defenses.make_view(params, dkind, derive_seed(cfg.seed, 0, 0))
        clouds[cond] = np.stack([r.x_adv for r in run_samples(view, acfg, ds, targets, cfg.batch_size)])

    result = {}
    for cond, cl in clouds.items():
        profs = [
            interactions.interaction_profile(params, cl[k], ds.labels[k], grid, (pairs, subsets),
                                             derive_seed(cfg.seed, int(ds.ids[k])), n_points)
            for k in range(len(ds))
        ]
        means = np.mean([p.means for p in profs], axis=0)
        ses = np.sqrt(np.sum(np.square([p.stderrs for p in profs]), axis=0)) / len(profs)
        n_eval = 4 * pairs * subsets * len(profs)
        result[cond] = [{"ratio": r, "mean": float(m), "stderr": float(s), "n_eval": n_eval}
                        for r, m, s in zip(grid, means, ses)]
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    for cond, rows in result.items():
        with open(os.path.join(out_dir, f"profile_{cond}.csv"), "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["ratio", "mean", "stderr", "n_eval"], lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return result
