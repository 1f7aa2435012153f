import hashlib
from pathlib import Path

import pytest

from nargact import cli
from nargact.formats import GridFile, MetricLog

from fakemnist import write_fake_mnist


def tree_digest(run: Path) -> dict:
    """sha256 of every file under a run directory except wall-clock timings."""
    return {
        str(p.relative_to(run)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(run.rglob("*"))
        if p.is_file() and not p.name.startswith("timing")
    }


@pytest.fixture()
def env(tmp_path, monkeypatch):
    data = write_fake_mnist(tmp_path / "mnist")
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(
        f"""
[data]
root = {data}
train_size = 100
val_size = 40
test_size = 40

[model]
widths = 8,8

[optim]
batch_size = 50

[session1]
steps = 100

[session2]
max_epochs = 2
snapshot_resolution = 11

[session3]
max_epochs = 2

[analysis]
xavier_count = 2
grid_resolution = 21
lmax = 4
"""
    )
    monkeypatch.setenv("NARGACT_RUNS_DIR", str(tmp_path / "runs"))
    return tmp_path, cfg


def run(capsys, *argv) -> Path:
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    assert code == 0, err
    return Path(out.strip())


def test_full_chain(env, capsys):
    tmp, cfg = env
    c = ["--config", str(cfg)]
    pre = run(capsys, "pretrain", *c, "--seed", "1")
    assert {"inner.ckpt", "target_map.grid", "target_map.ppm", "resolved_config.ini"} <= {p.name for p in pre.iterdir()}
    tr = run(capsys, "train", *c, "--seed", "1", "--from", str(pre))
    assert len(MetricLog.read(tr / "metrics.csv")) == 2
    assert len(list((tr / "snapshots").glob("*.grid"))) == 2
    re = run(capsys, "retrain", *c, "--seed", "1", "--from", str(tr))
    assert len(set((re / "inner_digests.txt").read_text().split())) == 1
    an = run(capsys, "analyze", *c, "--seed", "1", "--from", str(tr))
    assert (an / "quadfit.csv").exists() and (an / "nonlinearity.ppm").exists()
    sp = run(capsys, "spectrum", *c, "--seed", "1", "--from", str(tr))
    assert (sp / "spectrum.csv").read_text().count("xavier1") == 5
    ex = run(capsys, "export-grid", *c, "--from", str(pre), "--bounds=-1,1;-2,2")
    g = GridFile.read(ex / "nonlinearity.grid")
    assert g.axes == [(-1.0, 1.0, 21), (-2.0, 2.0, 21)]
    rep = run(capsys, "report", *c, str(tr), str(an), str(sp))
    summary = (rep / "summary.csv").read_text().splitlines()
    assert len(summary) == 4 and "fraction_negative" in summary[0]
    assert (rep / "curvature.csv").exists()


def test_baseline_command(env, capsys):
    tmp, cfg = env
    b = run(capsys, "baseline", "--config", str(cfg), "--seed", "2")
    names = {p.name for p in b.iterdir()}
    assert {"metrics_relu.csv", "metrics_1arg.csv", "aligned.csv", "param_counts.csv"} <= names


def test_byte_identical_reruns(env, capsys, monkeypatch):
    tmp, cfg = env
    c = ["--config", str(cfg), "--seed", "3"]
    pres, trees = [], []
    for root in ("a", "b"):
        monkeypatch.setenv("NARGACT_RUNS_DIR", str(tmp / root))
        pres.append(run(capsys, "pretrain", *c))
    assert tree_digest(pres[0]) == tree_digest(pres[1])
    for root in ("c", "d"):
        monkeypatch.setenv("NARGACT_RUNS_DIR", str(tmp / root))
        trees.append(tree_digest(run(capsys, "train", *c, "--from", str(pres[0]))))
    assert trees[0] == trees[1]
    assert any(k.endswith(".ppm") for k in trees[0]) and "model.ckpt" in trees[0]


def test_collision_and_errors(env, capsys):
    tmp, cfg = env
    run(capsys, "pretrain", "--config", str(cfg), "--seed", "4")
    assert cli.main(["pretrain", "--config", str(cfg), "--seed", "4"]) == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("nargact: error: RunExistsError:") and "\n" not in err
    assert cli.main(["pretrain", "--seed", "4", "--set", "model.bogus=1"]) == 1
    assert "ConfigError" in capsys.readouterr().err
    assert cli.main(["train", "--config", str(cfg), "--seed", "4", "--from", str(tmp / "missing")]) == 1
    assert "checkpoint not found" in capsys.readouterr().err


def test_missing_mnist_is_reported(env, capsys, tmp_path):
    _, cfg = env
    pre = run(capsys, "pretrain", "--config", str(cfg), "--seed", "5")
    code = cli.main(["train", "--config", str(cfg), "--seed", "5", "--from", str(pre), "--set", f"data.root={tmp_path}/none"])
    assert code == 1 and "MNIST IDX files not found" in capsys.readouterr().err


def test_seed_required_for_training():
    with pytest.raises(SystemExit):
        cli.main(["pretrain"])
