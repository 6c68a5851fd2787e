import json
import subprocess
import sys

import numpy as np
import pytest

from gevnet.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main
from gevnet.data import load_datasets, write_idx
from gevnet.geometry import load_geometry


@pytest.fixture(scope="module")
def mnist_toy(tmp_path_factory):
    d = tmp_path_factory.mktemp("mnist")
    rng = np.random.default_rng(0)
    for prefix, n in (("train", 40), ("t10k", 20)):
        imgs = (rng.uniform(0, 1, (n, 28, 28)) > 0.8).astype(np.uint8) * 255
        write_idx(d / f"{prefix}-images-idx3-ubyte", imgs)
        write_idx(d / f"{prefix}-labels-idx1-ubyte", (np.arange(n) % 10).astype(np.uint8))
    return d


def test_unknown_flag_exits_2():
    proc = subprocess.run([sys.executable, "-m", "gevnet", "verify", "--bogus"], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE
    assert "usage:" in proc.stderr


def test_missing_subcommand(capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == EXIT_USAGE


def test_verify_pass_and_corrupt(tmp_path, capsys):
    out = tmp_path / "v.json"
    assert main(["verify", "--order", "1", "--samples", "200", "--instances", "2", "--out", str(out)]) == EXIT_OK
    report = json.loads(out.read_text())
    assert report["passed"] and report["schema_version"] == 1
    assert main(["verify", "--order", "1", "--samples", "200", "--instances", "2", "--inject-corrupt-basis"]) == EXIT_FAIL


def test_geometry_cache(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("GEVNET_CACHE_DIR", str(tmp_path))
    assert main(["geometry", "--level", "1"]) == EXIT_OK
    grid, stencil, meta = load_geometry(tmp_path / "geometry_L1.gevc")
    assert grid.num_vertices == 42 and stencil.nbr.shape == (42, 7)


def test_pipeline(tmp_path, mnist_toy, monkeypatch, capsys):
    monkeypatch.delenv("GEVNET_CACHE_DIR", raising=False)
    ds = tmp_path / "d.gevc"
    rc = main(["project-data", "--level", "1", "--regime", "NR", "--mnist-dir", str(mnist_toy),
               "--n-train", "20", "--n-test", "10", "--out", str(ds)])
    assert rc == EXIT_OK
    train_set, test_set, meta = load_datasets(ds)
    assert (len(train_set), len(test_set), meta["regime"]) == (20, 10, "NR")

    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"architecture = gevnet2\nlevel = 1\nN = 11\nbatch_size = 10\nrecalibrate = 20\ndataset = {ds}\n")
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--epochs", "2", "--set", "lr=0.01", "--out-dir", str(run)]) == EXIT_OK
    assert (run / "metrics.csv").read_text().count("\n") == 3

    out = tmp_path / "e.json"
    assert main(["eval", "--checkpoint", str(run / "checkpoint.gevc"), "--dataset", str(ds), "--out", str(out)]) == EXIT_OK
    report = json.loads(out.read_text())
    assert report["samples"] == 10 and np.sum(report["confusion"]) == 10


def test_config_errors_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("epochs = 0\n")
    assert main(["train", "--config", str(cfg)]) == EXIT_USAGE
    assert main(["train", "--set", "nonsense"]) == EXIT_USAGE
    assert main(["train", "--set", "bogus_key=1"]) == EXIT_USAGE
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == EXIT_USAGE
    assert main(["eval", "--checkpoint", str(tmp_path / "none"), "--dataset", str(tmp_path / "none")]) == EXIT_USAGE


def test_cache_q_mismatch_exits_2(tmp_path, mnist_toy, monkeypatch, capsys):
    ds = tmp_path / "d.gevc"
    main(["project-data", "--level", "1", "--regime", "NR", "--mnist-dir", str(mnist_toy),
          "--n-train", "10", "--n-test", "10", "--out", str(ds)])
    monkeypatch.setenv("GEVNET_CACHE_DIR", str(tmp_path))
    assert main(["geometry", "--level", "1", "--Q", "500"]) == EXIT_OK
    rc = main(["train", "--set", "level=1", "--set", "N=11", "--epochs", "1", "--dataset", str(ds),
               "--out-dir", str(tmp_path / "r")])
    assert rc == EXIT_USAGE
    assert "Q" in capsys.readouterr().err


def test_gradcheck_cli(tmp_path, capsys):
    out = tmp_path / "g.json"
    assert main(["gradcheck", "--out", str(out)]) == EXIT_OK
    report = json.loads(out.read_text())
    assert report["max_rel_error"] <= 1e-4
