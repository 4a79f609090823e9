import json
import os

import pytest

from pointguard import cli, data, model


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_gen_data_and_train(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"classes": ["sphere", "cube"], "train_per_class": 4,
                                "test_per_class": 2, "n_points": 16}))
    out = str(tmp_path / "ds")
    code, stdout, _ = run(["gen-data", "--spec", str(spec), "--out", out], capsys)
    assert code == 0 and json.loads(stdout)["records"] == 12
    assert len(data.load_dataset(out)) == 12
    ck = str(tmp_path / "m.ckpt")
    code, stdout, _ = run(["train", "--dataset", out, "--out", ck, "--epochs", "2"], capsys)
    assert code == 0
    lines = stdout.strip().splitlines()
    assert json.loads(lines[0])["epoch"] == 1
    assert model.load_checkpoint(ck).num_classes == 2


def test_attack_command(small_dataset, small_model, tmp_path, capsys):
    out = str(tmp_path / "run")
    code, stdout, _ = run(["attack", "--dataset", small_dataset[0], "--checkpoint", small_model[0],
                           "--kind", "ifgm", "--steps", "3", "--defense", "it", "--eot", "2",
                           "--limit", "4", "--repeats", "1", "--out", out], capsys)
    assert code == 0
    assert "ifgm+eot2 vs it" in stdout
    report = json.load(open(os.path.join(out, "report.json")))
    assert report["config"]["attacks"][0]["eot_n"] == 2
    assert report["config"]["defenses"] == [{"kind": "it"}]


def test_eval_with_config_and_env_default(small_dataset, small_model, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("POINTGUARD_OUT", str(tmp_path / "root"))
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"dataset": small_dataset[0], "checkpoint": small_model[0],
                               "sample_limit": 3, "repeats": 1, "attacks": [{"kind": "fgm"}]}))
    code, stdout, _ = run(["eval", "--config", str(cfg), "--defense", "none,sor"], capsys)
    assert code == 0
    assert os.path.exists(tmp_path / "root" / "eval" / "records.jsonl")
    assert "fgm vs sor" in stdout


def test_sweep_and_export(small_dataset, small_model, tmp_path, capsys):
    common = ["--dataset", small_dataset[0], "--checkpoint", small_model[0], "--limit", "3", "--repeats", "1"]
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"attacks": [{"kind": "ifgm", "steps": 2}]}))
    code, stdout, _ = run(["sweep", "--config", str(cfg), *common, "--axis", "epsilon", "--values", "0.05,0.1",
                           "--out", str(tmp_path / "sw")], capsys)
    assert code == 0 and os.path.exists(tmp_path / "sw" / "sweep_epsilon.csv")
    test_id = int(small_dataset[1].split("test").ids[0])
    code, stdout, _ = run(["export", "--config", str(cfg), *common, "--ids", str(test_id),
                           "--epsilons", "0.1", "--out", str(tmp_path / "ex")], capsys)
    assert code == 0 and json.loads(stdout)["records"] == 3


def test_interactions_command(small_dataset, small_model, tmp_path, capsys):
    code, stdout, _ = run(["interactions", "--dataset", small_dataset[0], "--checkpoint", small_model[0],
                           "--grid", "0,1", "--pairs", "2", "--subsets", "2", "--samples", "1",
                           "--points", "8", "--out", str(tmp_path / "ia")], capsys)
    assert code == 0
    assert os.path.exists(tmp_path / "ia" / "profile_adv_it.csv")


def test_errors_are_json_on_stderr(tmp_path, capsys):
    code, _, err = run(["eval", "--dataset", str(tmp_path / "missing"), "--checkpoint", "x",
                        "--out", str(tmp_path / "o")], capsys)
    assert code != 0
    payload = json.loads(err.strip().splitlines()[-1])
    assert payload["error"] == "configuration"
    with pytest.raises(SystemExit):
        cli.main(["attack", "--defense", "dupnet"])
