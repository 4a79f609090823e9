import time

import numpy as np
import pytest

from pointguard import data, model
from pointguard.model import Architecture, ModelParams

# settings for the victim classifier shared by the end-to-end tests
VICTIM_EPOCHS = 12
VICTIM_TRAIN = dict(batch_size=32, learning_rate=0.01, momentum=0.9, seed=0,
                    augment_scale=0.1, augment_shift=0.15, augment_jitter=0.15)

_VERDICTS = []


def record_verdict(name, ok, detail):
    """Print one acceptance line and keep it for the terminal summary."""
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    print(line)
    _VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)

TINY = Architecture((3, 8, 16), (16, 12, 4))


def random_params(seed, arch=TINY, bias_scale=0.1):
    """Init weights plus small random biases so every ReLU regime is exercised."""
    p = model.init_params(arch, seed)
    rng = np.random.default_rng(seed + 1000)
    biases = [rng.normal(0, bias_scale, b.shape) for b in p.biases]
    return ModelParams(arch, p.weights, tuple(biases))


def random_cloud(rng, n=16):
    return rng.random((n, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A small 4-class dataset on disk; returns ``(path, Dataset)``."""
    path = tmp_path_factory.mktemp("small_ds")
    spec = data.DatasetSpec(classes=["sphere", "cube", "cylinder", "torus"],
                            train_per_class=12, test_per_class=6, n_points=32, seed=3)
    return str(path), data.build_dataset(spec, str(path))


@pytest.fixture(scope="session")
def small_model(small_dataset, tmp_path_factory):
    """A briefly trained model for ``small_dataset``; returns ``(path, params)``."""
    _, ds = small_dataset
    arch = Architecture((3, 16, 32), (32, 16, 4))
    params, _ = model.train(model.init_params(arch, 0), ds.split("train"),
                            model.TrainConfig(epochs=15, learning_rate=0.02))
    path = str(tmp_path_factory.mktemp("small_ck") / "model.ckpt")
    model.save_checkpoint(params, path)
    return path, params


@pytest.fixture(scope="session")
def victim(tmp_path_factory):
    """Default synthetic dataset plus the trained victim.

    Returns:
        dict with ``dataset_path``, ``dataset``, ``checkpoint``, ``params``, ``history``, ``train_seconds``.
    """
    root = tmp_path_factory.mktemp("victim")
    ds = data.build_dataset(data.DatasetSpec(), str(root / "dataset"))
    cfg = model.TrainConfig(epochs=VICTIM_EPOCHS, **VICTIM_TRAIN)
    params = model.init_params(Architecture.default(ds.num_classes), cfg.seed)
    start = time.perf_counter()
    params, history = model.train(params, ds.split("train"), cfg, eval_dataset=ds.split("test"))
    seconds = time.perf_counter() - start
    ck = str(root / "victim.ckpt")
    model.save_checkpoint(params, ck)
    return {"dataset_path": str(root / "dataset"), "dataset": ds, "checkpoint": ck,
            "params": params, "history": history, "train_seconds": seconds}
