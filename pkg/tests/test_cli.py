import csv
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from modiqa.cli import main
from modiqa.synthetic import make_dataset

CONFIG = """\
seed: {seed}
model:
  preset: tiny
train:
  batch_size: 4
  patches_train: 8
  patches_eval: 8
  epochs: 2
  lr_initial: 0.001
  lr_decay_epoch: 2
  weight_decay: 0.0
data:
  manifest: data/manifest.csv
  name: synth
  fractions: [0.5, 0.25, 0.25]
eval:
  runs: 2
  n_patches: 8
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    make_dataset(root / "data", n_refs=4, levels=(0.5, 1.5, 3.0), size=20, seed=2, prefix="s")
    make_dataset(root / "noise", n_refs=2, distortion="noise", levels=(4, 16, 32), size=20, seed=3, prefix="n")
    (root / "run.yaml").write_text(CONFIG.format(seed=0), encoding="utf-8")
    return root


@pytest.fixture(scope="module")
def trained(workspace):
    out = workspace / "train0"
    assert main(["train", "--config", str(workspace / "run.yaml"), "--output-dir", str(out)]) == 0
    return out


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestTrain:
    def test_outputs(self, trained):
        assert {p.name for p in trained.iterdir()} >= {"history.csv", "split.txt", "best.npz", "last.npz"}
        rows = read_rows(trained / "history.csv")
        assert rows[0] == ["epoch", "train_loss", "val_srocc", "lr"] and len(rows) == 3

    def test_rerun_byte_identical_history(self, workspace, trained):
        out = workspace / "train0b"
        assert main(["train", "--config", str(workspace / "run.yaml"), "--output-dir", str(out)]) == 0
        assert (out / "history.csv").read_bytes() == (trained / "history.csv").read_bytes()

    def test_missing_dataset(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "c.yaml"
        cfg.write_text(CONFIG.format(seed=0).replace("data/manifest.csv", "nowhere.csv"), encoding="utf-8")
        assert main(["train", "--config", str(cfg), "--output-dir", str(tmp_path / "o")]) == 2
        assert "does not exist" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("model:\n  preset: tiny\n  colour: blue\n", encoding="utf-8")
        assert main(["param-count", "--config", str(cfg)]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_code(self, workspace, tmp_path):
        cfg = tmp_path / "c.yaml"
        text = CONFIG.format(seed=0).replace("data/manifest.csv", str(workspace / "data/manifest.csv"))
        cfg.write_text(text.replace("lr_initial: 0.001", "lr_initial: 1.0e+300"), encoding="utf-8")
        assert main(["train", "--config", str(cfg), "--output-dir", str(tmp_path / "o")]) == 3


class TestEval:
    def test_report(self, workspace, trained, capsys):
        args = ["eval", "--config", str(workspace / "run.yaml"), "--checkpoint", str(trained / "best.npz")]
        assert main([*args, "--output-dir", str(workspace / "ev1")]) == 0
        assert main([*args, "--output-dir", str(workspace / "ev2")]) == 0
        first = (workspace / "ev1" / "report.csv").read_bytes()
        assert first == (workspace / "ev2" / "report.csv").read_bytes()
        assert read_rows(workspace / "ev1" / "report.csv")[-1][0] == "mean"
        assert "SROCC" in capsys.readouterr().out

    def test_corrupt_checkpoint(self, workspace, tmp_path):
        bad = tmp_path / "bad.npz"
        bad.write_bytes(b"not a checkpoint")
        assert main(["eval", "--config", str(workspace / "run.yaml"), "--checkpoint", str(bad)]) == 2

    def test_config_mismatch(self, workspace, trained, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("model:\n  preset: toy\n", encoding="utf-8")
        args = ["eval", "--config", str(cfg), "--checkpoint", str(trained / "best.npz"),
                "--manifest", str(workspace / "noise/manifest.csv"), "--cross-db"]
        assert main(args) == 2

    def test_cross_db_refuses_training_data(self, workspace, trained, capsys):
        args = ["eval", "--checkpoint", str(trained / "best.npz"), "--manifest", str(workspace / "data/manifest.csv"),
                "--dataset-name", "synth", "--cross-db", "--runs", "1", "--output-dir", str(workspace / "ev3")]
        assert main(args) == 2
        assert "used in training" in capsys.readouterr().err

    def test_crossdb_matrix(self, workspace, trained):
        out = workspace / "cx"
        args = ["crossdb", "--checkpoint", f"synth={trained / 'best.npz'}", "--dataset", f"noise={workspace / 'noise/manifest.csv'}",
                "--runs", "1", "--n-patches", "8", "--output-dir", str(out)]
        assert main(args) == 0
        rows = read_rows(out / "crossdb_srocc.csv")
        assert rows[0] == ["trained_on", "noise"] and rows[1][0] == "synth"


class TestPredict:
    def test_identical_pair_constant(self, workspace, trained, capsys):
        ckpt = str(trained / "best.npz")
        scores = []
        for name in ("s000.png", "s001.png", "s002.png"):
            path = str(workspace / "data" / name)
            assert main(["predict", "--checkpoint", ckpt, path, path, "--n-patches", "8"]) == 0
            scores.append(capsys.readouterr().out.strip())
        assert len(set(scores)) == 1

    def test_seed_reproducible(self, workspace, trained, capsys):
        args = ["predict", "--checkpoint", str(trained / "best.npz"), str(workspace / "data/s000.png"),
                str(workspace / "data/s000_blur2.png"), "--seed", "7"]
        main(args)
        a = capsys.readouterr().out
        main(args)
        assert capsys.readouterr().out == a

    def test_size_mismatch(self, workspace, trained, tmp_path):
        Image.fromarray(np.zeros((10, 12, 3), dtype=np.uint8)).save(tmp_path / "x.png")
        args = ["predict", "--checkpoint", str(trained / "best.npz"), str(workspace / "data/s000.png"), str(tmp_path / "x.png")]
        assert main(args) == 2


class TestSampleMap:
    def test_files_and_checksum(self, workspace, tmp_path):
        img = str(workspace / "data/s000.png")
        assert main(["sample-map", img, str(workspace / "data/s000_blur2.png"), "--patch-size", "4", "--output-dir", str(tmp_path)]) == 0
        grid = np.loadtxt(tmp_path / "pmap.csv", delimiter=",")
        assert grid.shape == (17, 17) and abs(grid.sum() - 1) < 1e-9
        assert Image.open(tmp_path / "pmap.png").mode == "L"

    def test_flat_map(self, workspace, tmp_path):
        img = str(workspace / "data/s000.png")
        args = ["sample-map", img, str(workspace / "data/s000_blur2.png"), "--patch-size", "4",
                "--beta", "0", "--gamma", "0", "--output-dir", str(tmp_path)]
        assert main(args) == 0
        png = np.asarray(Image.open(tmp_path / "pmap.png"))
        assert np.all(png == 255)

    def test_missing_image(self, tmp_path):
        assert main(["sample-map", str(tmp_path / "a.png"), str(tmp_path / "b.png"), "--output-dir", str(tmp_path)]) == 2


class TestVerification:
    def test_param_count_base(self, capsys):
        assert main(["param-count"]) == 0
        out = capsys.readouterr().out
        assert "43,270,656" in out and "56,644,609" in out

    def test_param_count_tiny(self, capsys):
        assert main(["param-count", "--preset", "tiny"]) == 0
        assert "4,181" in capsys.readouterr().out

    def test_gradcheck_pass(self, capsys):
        assert main(["gradcheck", "--batch-size", "2", "--n-patches", "3"]) == 0
        out = capsys.readouterr().out
        assert out.count("\nok ") + out.startswith("ok ") == 36

    def test_gradcheck_fault(self, capsys):
        assert main(["gradcheck", "--batch-size", "2", "--n-patches", "3", "--inject-fault", "head.head.layers.2.bias"]) == 1
        assert "head.head.layers.2.bias" in capsys.readouterr().err


class TestUsage:
    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as exc:
            main(["param-count", "--bogus"])
        assert exc.value.code == 2

    @pytest.mark.parametrize("cmd", ["train", "eval", "predict", "sample-map", "gradcheck", "param-count", "crossdb"])
    def test_help(self, cmd, capsys):
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
        assert "usage" in capsys.readouterr().out

    def test_console_script(self):
        out = subprocess.run([sys.executable, "-m", "modiqa.cli", "param-count", "--preset", "tiny"],
                             capture_output=True, text=True)
        assert out.returncode == 0 and "total" in out.stdout
