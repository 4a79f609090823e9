import csv
import json
import os

import numpy as np
import pytest

from pointguard import data, harness, model
from pointguard.errors import ConfigError, InputError


@pytest.fixture
def base_cfg(small_dataset, small_model, tmp_path):
    return {
        "dataset": small_dataset[0],
        "checkpoint": small_model[0],
        "sample_limit": 8,
        "repeats": 2,
        "seed": 1,
        "out_dir": str(tmp_path / "run"),
        "defenses": [{"kind": "none"}, {"kind": "it"}],
        "attacks": [{"kind": "ifgm", "steps": 5}, {"kind": "pgd", "steps": 3}],
    }


def test_targets_never_equal_labels():
    labels = np.arange(200) % 8
    targets = harness.assign_targets(labels, np.arange(200), 8)
    assert np.all(targets != labels) and targets.min() >= 0 and targets.max() < 8
    assert np.array_equal(targets, harness.assign_targets(labels, np.arange(200), 8))


def test_balanced_prefix_cycles_classes():
    labels = np.repeat(np.arange(4), 5)
    idx = harness.balanced_prefix(labels, 6)
    assert list(idx) == [0, 1, 5, 6, 10, 15]
    assert len(harness.balanced_prefix(labels, 100)) == 20


def test_config_defaults_and_validation(tmp_path):
    cfg = harness.ExperimentConfig.from_dict({"dataset": "d", "checkpoint": "c"})
    assert cfg.repeats == 5 and cfg.defenses == [{"kind": "none"}]
    with pytest.raises(ConfigError):
        harness.ExperimentConfig.from_dict({"repeat": 3})
    with pytest.raises(ConfigError):
        harness.ExperimentConfig(repeats=0)
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 4, "attacks": ["fgm"]}))
    cfg = harness.ExperimentConfig.from_json(path)
    assert cfg.seed == 4 and cfg.attacks == [{"kind": "fgm"}]


def test_missing_paths_fail_before_compute(tmp_path):
    with pytest.raises(ConfigError):
        harness.run_eval({"dataset": str(tmp_path / "nope"), "checkpoint": str(tmp_path / "x"),
                          "out_dir": str(tmp_path / "o")})
    assert not (tmp_path / "o").exists()


def test_run_eval_outputs(base_cfg):
    report = harness.run_eval(base_cfg)
    out = base_cfg["out_dir"]
    records = harness.read_records(os.path.join(out, "records.jsonl"))
    # 2 repeats x 2 defenses x (clean + 2 attacks) x 8 samples
    assert len(records) == 2 * 2 * 3 * 8
    keys = [(r["repeat"], r["sample_id"]) for r in records]
    assert [k[0] for k in keys] == sorted(k[0] for k in keys)
    assert harness.aggregate(records) == report["cells"]
    with open(os.path.join(out, "summary.csv")) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2 * 3
    assert report["config"]["attacks"][0]["epsilon"] == 0.2
    assert set(report["clean_accuracy"]) == {"none", "it"}
    assert report["clean_accuracy"]["none"] == report["clean_accuracy"]["it"]


def test_clean_accuracy_matches_evaluate(base_cfg, small_dataset, small_model):
    cfg = dict(base_cfg, attacks=[{"kind": "none"}], defenses=["none"], repeats=1, sample_limit=None)
    report = harness.run_eval(cfg)
    acc = model.evaluate(small_model[1], small_dataset[1].split("test"))
    assert report["clean_accuracy"]["none"] == pytest.approx(100 * acc)
    assert all("success_mean" not in c for c in report["cells"])


def test_summary_is_recomputable_from_records(base_cfg):
    report = harness.run_eval(base_cfg)
    records = harness.read_records(os.path.join(base_cfg["out_dir"], "records.jsonl"))
    for cell in report["cells"]:
        if cell["attack"] == "none":
            continue
        per_rep = []
        for r in range(base_cfg["repeats"]):
            rows = [x for x in records if x["attack"] == cell["attack"]
                    and x["defense"] == cell["defense"] and x["repeat"] == r]
            per_rep.append(100 * sum(x["success"] for x in rows) / len(rows))
        assert cell["success_mean"] == pytest.approx(np.mean(per_rep))
        assert cell["success_std"] == pytest.approx(np.std(per_rep))


def test_records_are_byte_reproducible(base_cfg, tmp_path):
    harness.run_eval(base_cfg)
    second = dict(base_cfg, out_dir=str(tmp_path / "again"))
    harness.run_eval(second)
    a = open(os.path.join(base_cfg["out_dir"], "records.jsonl"), "rb").read()
    b = open(os.path.join(second["out_dir"], "records.jsonl"), "rb").read()
    assert a == b


def test_deterministic_pipelines_reuse_first_repeat(base_cfg):
    harness.run_eval(dict(base_cfg, repeats=3))
    records = harness.read_records(os.path.join(base_cfg["out_dir"], "records.jsonl"))
    undefended = {}
    for r in records:
        if r["attack"] == "ifgm" and r["defense"] == "none":
            undefended.setdefault(r["sample_id"], set()).add(json.dumps(dict(r, repeat=0), sort_keys=True))
    assert all(len(v) == 1 for v in undefended.values())


def test_sweep_writes_curve(base_cfg, small_dataset, small_model):
    cfg = dict(base_cfg, repeats=1, attacks=[{"kind": "ifgm", "steps": 3}])
    rows = harness.sweep(cfg, "epsilon", [0.0, 0.1])
    assert [r["value"] for r in rows if r["defense"] == "none"] == [0.0, 0.1]
    zero = [r for r in rows if r["value"] == 0.0 and r["defense"] == "none"][0]
    # with no budget the cloud is unchanged, so success means the clean prediction hits the target
    test = small_dataset[1].split("test")
    test = test.subset(harness.balanced_prefix(test.labels, 8))
    pred = model.predict(small_model[1], test.points)
    hits = pred == harness.assign_targets(test.labels, test.ids, 4)
    assert zero["success_mean"] == pytest.approx(100 * hits.mean())
    assert os.path.exists(os.path.join(base_cfg["out_dir"], "sweep_epsilon.csv"))
    with pytest.raises(ConfigError):
        harness.sweep(cfg, "epsilon", [0.2, 0.1])
    with pytest.raises(ConfigError):
        harness.sweep(cfg, "colour", [1])


def test_export_adv_samples(base_cfg, small_dataset, tmp_path):
    _, ds = small_dataset
    ids = [int(i) for i in ds.split("test").ids[:2]]
    out = str(tmp_path / "export")
    manifest = harness.export_adv_samples(dict(base_cfg, attacks=[{"kind": "ifgm", "steps": 4}]),
                                          ids, out, epsilons=[0.1, 0.4])
    back = data.load_dataset(out)
    assert len(back) == len(manifest) == 2 + 2 * 2 * 2
    src = {int(i): k for k, i in enumerate(ds.ids)}
    for entry in manifest:
        cloud = back.points[entry["export_id"]]
        clean = ds.points[src[entry["source_id"]]]
        assert np.max(np.abs(cloud - clean)) <= entry["epsilon"] + 1e-6
    meta = json.load(open(os.path.join(out, "manifest.json")))
    assert meta["epsilons"] == [0.1, 0.4]
    with pytest.raises(InputError):
        harness.export_adv_samples(base_cfg, [999_999], out)


def test_interactions_run_writes_profiles(base_cfg, tmp_path):
    cfg = dict(base_cfg, attacks=[{"kind": "ifgm", "steps": 3}])
    out = str(tmp_path / "inter")
    result = harness.interactions_run(cfg, [0.0, 0.5, 1.0], pairs=4, subsets=2, n_samples=2,
                                      n_points=10, out_dir=out)
    assert set(result) == {"clean", "adv", "adv_it"}
    for cond in result:
        with open(os.path.join(out, f"profile_{cond}.csv")) as f:
            rows = list(csv.DictReader(f))
        assert [float(r["ratio"]) for r in rows] == [0.0, 0.5, 1.0]
        assert all(int(r["n_eval"]) == 4 * 4 * 2 * 2 for r in rows)
