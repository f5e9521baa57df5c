import json

import numpy as np
import pytest

from siamese_snn.cli import main
from siamese_snn.data import write_idx

from conftest import MNIST_DIR, mnist_available


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    assert main(["train", "--dataset", "toy", "--out-dir", str(out), "--max-epochs", "50"]) == 0
    return out


def test_train_writes_artifacts(toy_run):
    for name in ("checkpoint.npz", "train_log.csv", "manifest.json", "config.json"):
        assert (toy_run / name).exists()
    manifest = json.loads((toy_run / "manifest.json").read_text())
    for key in ("config", "seed", "build", "datasets", "outputs", "timings", "jobs"):
        assert key in manifest
    assert manifest["result"]["epochs_run"] <= 50


def test_manifest_rerun_is_byte_identical(toy_run, tmp_path, capsys):
    code, _, _ = run(capsys, "train", "--from-manifest", str(toy_run / "manifest.json"), "--out-dir", str(tmp_path))
    assert code == 0
    assert (tmp_path / "train_log.csv").read_bytes() == (toy_run / "train_log.csv").read_bytes()


def test_eval_toy_is_perfect(toy_run, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--checkpoint", str(toy_run / "checkpoint.npz"), "--out-dir", str(tmp_path))
    assert code == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["f1"]["macro_f1"] == 1.0
    for name in ("f1.csv", "qn.csv", "latency.csv"):
        assert (tmp_path / name).exists()
    assert summary["latency"]["notes"]


def test_eval_latency_only(toy_run, tmp_path, capsys):
    code, _, _ = run(
        capsys, "eval", "--checkpoint", str(toy_run / "checkpoint.npz"), "--report", "latency", "--out-dir", str(tmp_path)
    )
    assert code == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["latency.csv"]


def test_missing_checkpoint_is_a_file_error(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--checkpoint", str(tmp_path / "nope.npz"))
    assert code == 2 and "not found" in err


def test_incompatible_checkpoint(toy_run, tmp_path, capsys):
    # a toy checkpoint has one input channel; MNIST needs 784
    code, _, err = run(
        capsys, "eval", "--checkpoint", str(toy_run / "checkpoint.npz"), "--dataset", "mnist",
        "--manifest", str(tmp_path / "none.json"), "--data-dir", str(tmp_path),
    )
    assert code == 2 and "incompatible" in err


def test_invalid_scheme_names_valid_ones(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--scheme", "sepia", "--out-dir", str(tmp_path))
    assert code == 1
    assert "black_white" in err and "binary" in err and "grayscale" in err


def test_config_errors_listed_together(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--dataset", "toy", "--out-dir", str(tmp_path), "--alpha", "0", "--K", "-1")
    assert code == 1
    assert "alpha" in err and "K must" in err


def test_config_file_and_overrides(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"alpha": 0.2, "sizes": [1, 3, 2], "max_epochs": 2}))
    out = tmp_path / "run"
    code, _, _ = run(capsys, "train", "--dataset", "toy", "--config", str(cfg), "--max-epochs", "1", "--out-dir", str(out))
    assert code == 0
    saved = json.loads((out / "config.json").read_text())
    assert saved["alpha"] == 0.2 and saved["max_epochs"] == 1 and saved["sizes"] == [1, 3, 2]


def test_unknown_config_field(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"gamma": 1}))
    code, _, err = run(capsys, "train", "--dataset", "toy", "--config", str(cfg), "--out-dir", str(tmp_path))
    assert code == 1 and "gamma" in err


def test_usage_errors_exit_one(capsys):
    for argv in ([], ["train", "--max-epochs", "lots"], ["eval"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 1


def test_unknown_oracle_suite(capsys):
    code, _, err = run(capsys, "oracle", "nonsense")
    assert code == 1 and "emd-grid" in err


def test_oracle_writes_json(tmp_path, capsys):
    path = tmp_path / "r.json"
    code, out, _ = run(capsys, "oracle", "emd-grid", "--json", str(path))
    assert code == 0
    rep = json.loads(path.read_text())
    assert rep["passed"] is True and len(rep["cases"]) == 1000
    assert out.count("PASS") >= 1000


def _fake_mnist(root, n_train=40, n_test=20):
    rng = np.random.default_rng(0)
    for prefix, n in (("train", n_train), ("t10k", n_test)):
        labels = np.arange(n) % 10
        images = rng.integers(0, 256, (n, 28, 28)).astype(np.uint8)
        images[rng.random((n, 28, 28)) < 0.7] = 0
        write_idx(root / f"{prefix}-images-idx3-ubyte", root / f"{prefix}-labels-idx1-ubyte", images, labels)


def test_mnist_pipeline_on_fixture(tmp_path, capsys):
    data = tmp_path / "mnist"
    data.mkdir()
    _fake_mnist(data)
    out = tmp_path / "run"
    code, _, err = run(
        capsys, "train", "--scheme", "binary", "--subset", "20", "--val-size", "10", "--data-dir", str(data),
        "--cache-dir", str(tmp_path / "cache"), "--out-dir", str(out), "--max-epochs", "1", "--batch-size", "20",
        "--sizes", "784,20,10",
    )
    assert code == 0, err
    assert list((tmp_path / "cache").glob("binary-*.bin"))
    code, stdout, err = run(capsys, "eval", "--checkpoint", str(out / "checkpoint.npz"), "--out-dir", str(tmp_path / "ev"))
    assert code == 0, err
    assert "binary" in stdout
    code, stdout, _ = run(capsys, "encode", "--scheme", "grayscale", "--split", "test", "--data-dir", str(data),
                          "--cache-dir", str(tmp_path / "cache"))
    assert code == 0 and "20 test images" in stdout


def test_missing_data_is_a_data_error(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--scheme", "binary", "--data-dir", str(tmp_path), "--out-dir", str(tmp_path / "o"))
    assert code == 2 and "not found" in err


@pytest.mark.skipif(not mnist_available(), reason="MNIST files not present")
def test_binary_subset_smoke(tmp_path, capsys):
    code, _, err = run(
        capsys, "train", "--scheme", "binary", "--subset", "100", "--val-size", "0", "--data-dir", str(MNIST_DIR),
        "--out-dir", str(tmp_path), "--max-epochs", "1",
    )
    assert code == 0, err
    for name in ("checkpoint.npz", "train_log.csv", "manifest.json"):
        assert (tmp_path / name).exists()
