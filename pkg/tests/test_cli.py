import re

import numpy as np
import pytest
import yaml

from contextflow.cli import load_run_config, run
from contextflow.datasets import load_csv, load_idx, write_csv, write_idx

MOONS = {
    "model": dict(input_shape=[2], blocks=2, sub_blocks=3, width_factor=32, classes=1, components=8,
                  context=[dict(name="rotation", cardinality=8, mapping="one-hot")], context_hidden=32),
    "train": dict(batch_size=128, total_epochs=12, warmup_epochs=2, decay_every=12, lr_init=5e-3,
                  lr_warm_start=5e-4),
    "data": dict(source="two_moons", n=3000, n_contexts=8),
}


def _write(tmp_path, doc, name="run.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(doc))
    return str(p)


def _nll(text):
    return float(re.search(r"^nll\s+(\S+)", text, re.M).group(1))


@pytest.fixture(scope="module")
def moons_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("moons")
    cfg = _write(tmp, {**MOONS, "out": str(tmp / "out")})
    return tmp, cfg


def test_moons_workflow(moons_run, capsys):
    tmp, cfg = moons_run
    assert run(["train-generalist", "--config", cfg]) == 0
    gen_out = capsys.readouterr().out
    gen = str(tmp / "out" / "generalist.ckpt")
    spec_cfg = _write(tmp, {**MOONS, "out": str(tmp / "out"),
                            "train": {**MOONS["train"], "total_epochs": 10, "lr_init": 2e-3, "lr_warm_start": 2e-4,
                                      "warmup_epochs": 1}}, "spec.yaml")
    assert run(["train-specialist", "--config", spec_cfg, "--generalist", gen]) == 0
    capsys.readouterr()
    spec = str(tmp / "out" / "specialist.ckpt")

    assert run(["eval", "--config", cfg, "--checkpoint", gen]) == 0
    g_nll = _nll(capsys.readouterr().out)
    assert run(["eval", "--config", cfg, "--checkpoint", spec, "--generalist", gen]) == 0
    s_nll = _nll(capsys.readouterr().out)
    assert s_nll < g_nll
    assert g_nll == pytest.approx(_nll(gen_out))
    metrics = (tmp / "out" / "metrics.csv").read_text()
    assert "undefined" in metrics

    assert run(["inspect", "--checkpoint", spec]) == 0
    lines = capsys.readouterr().out.splitlines()
    counts = [line.split() for line in lines if line.startswith(("generalist", "specialist"))]
    assert [c[0] for c in counts] == ["generalist", "specialist"]
    assert all(int(c[1]) > 0 for c in counts)

    assert run(["sample", "--config", cfg, "--checkpoint", spec, "--n", "50"]) == 0
    ds = load_csv(tmp / "out" / "samples.csv", data_columns=["x0", "x1"])
    assert ds.data.shape == (50, 2) and np.all(np.isfinite(ds.data))
    assert (tmp / "out" / "effective_config.yaml").exists()
    assert (tmp / "out" / "generalist_log.csv").exists()


def test_specialist_requires_generalist(tmp_path, capsys):
    cfg = _write(tmp_path, MOONS)
    assert run(["train-specialist", "--config", cfg]) == 2
    assert "--generalist" in capsys.readouterr().err


def test_unknown_key_exit_2(tmp_path, capsys):
    cfg = _write(tmp_path, {**MOONS, "train": {"learning_rate": 1.0}})
    assert run(["train-generalist", "--config", cfg]) == 2
    assert "train.learning_rate" in capsys.readouterr().err


def test_bad_override_and_source(tmp_path, capsys):
    cfg = _write(tmp_path, MOONS)
    assert run(["train-generalist", "--config", cfg, "model.blocks"]) == 2
    assert run(["train-generalist", "--config", cfg, "data.source=hdf5"]) == 2
    assert "data.source" in capsys.readouterr().err


def test_missing_checkpoint_exit_3(tmp_path, capsys):
    cfg = _write(tmp_path, MOONS)
    assert run(["eval", "--config", cfg, "--checkpoint", str(tmp_path / "nope.ckpt")]) == 3
    assert "nope.ckpt" in capsys.readouterr().err


def test_numerical_abort_exit_4(tmp_path, capsys):
    write_csv(tmp_path / "bad.csv", {"a": np.full(20, np.nan), "b": np.zeros(20)})
    doc = {"model": dict(input_shape=[2], blocks=1), "train": dict(total_epochs=2, warmup_epochs=0, batch_size=8),
           "data": dict(source="csv", path=str(tmp_path / "bad.csv")), "out": str(tmp_path / "o")}
    assert run(["train-generalist", "--config", _write(tmp_path, doc)]) == 4
    assert "numerical" in capsys.readouterr().err


def test_overrides_and_seed_reflected(tmp_path):
    cfg = load_run_config(_write(tmp_path, MOONS), ["train.lr_init=5e-4", "model.components=2"], seed=7)
    assert cfg["train"].lr_init == 5e-4 and cfg["model"].components == 2
    assert cfg["train"].seed == cfg["model"].seed == cfg["data"]["seed"] == 7


def test_preset_config(tmp_path):
    cfg = load_run_config(_write(tmp_path, {"model": {"preset": "mnist_r", "hidden_channels": 4},
                                            "data": {"source": "idx", "images": "x.idx"}}))
    assert cfg["model"].classes == 10 and cfg["model"].hidden_channels == 4
    with pytest.raises(Exception, match="preset"):
        load_run_config(_write(tmp_path, {"model": {"preset": "imagenet"}, "data": {"source": "idx"}}))


def _idx_run(tmp_path, seed):
    x = np.random.default_rng(0).integers(0, 256, (60, 4, 4)).astype(np.uint8)
    y = np.arange(60) % 2
    write_idx(tmp_path / "x.idx", x)
    write_idx(tmp_path / "y.idx", y)
    out = tmp_path / f"o{seed}"
    doc = {"model": dict(input_shape=[1, 4, 4], blocks=1, sub_blocks=1, net="conv", hidden_channels=4, classes=2,
                         components=1, data_dequantizer="uniform", data_transform="standardize",
                         context=[dict(name="rotation", cardinality=4)]),
           "train": dict(total_epochs=2, warmup_epochs=0, batch_size=16),
           "data": dict(source="idx", images=str(tmp_path / "x.idx"), labels=str(tmp_path / "y.idx"), rotate=4),
           "out": str(out)}
    cfg = _write(tmp_path, doc, f"idx{seed}.yaml")
    assert run(["train-generalist", "--config", cfg, "--seed", str(seed)]) == 0
    assert run(["sample", "--config", cfg, "--checkpoint", str(out / "generalist.ckpt"), "--n", "5",
                "--seed", str(seed)]) == 0
    return load_idx(out / "samples.idx"), yaml.safe_load((out / "effective_config.yaml").read_text())


def test_idx_pipeline_and_seed(tmp_path, capsys):
    a, eff = _idx_run(tmp_path, 1)
    b, _ = _idx_run(tmp_path, 1)
    c, _ = _idx_run(tmp_path, 2)
    assert a.shape == (5, 1, 4, 4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert eff["train"]["seed"] == 1 and eff["data"]["rotate"] == 4
    assert "accuracy" in capsys.readouterr().out


def test_exponent_without_dot_accepted(tmp_path):
    cfg = load_run_config(_write(tmp_path, {**MOONS, "train": {"lr_init": "1e-3", "weight_decay": "1e-5"}}))
    assert cfg["train"].lr_init == 1e-3 and cfg["train"].weight_decay == 1e-5
    with pytest.raises(Exception, match="train.lr_init"):
        load_run_config(_write(tmp_path, {**MOONS, "train": {"lr_init": "fast"}}))
