import json
import subprocess
import sys

import numpy as np
import pytest

from lepa.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_USAGE, main, sha256_file
from lepa.data import read_grid, read_ppm, write_grid

TINY_TRAIN = [
    "--set", "img_size=16", "--set", "patch_size=4", "--set", "enc_dim=16", "--set", "enc_heads=2",
    "--set", "enc_depth=1", "--set", "pred_dim=16", "--set", "pred_heads=2", "--set", "pred_depth=1",
    "--set", "epochs=1", "--set", "steps_per_epoch=3", "--set", "batch_size=4",
]  # fmt: skip


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth-data", "--out-dir", str(root / "data"), "--set", "n_images=12", "--set", "img_size=16", "--seed", "1"]) == 0
    assert main(["train", "--data", str(root / "data"), "--out-dir", str(root / "train"), "--seed", "2"] + TINY_TRAIN) == 0
    return root


def _last_line(capsys):
    return capsys.readouterr().out.strip().splitlines()[-1]


class TestCommands:
    def test_synth_data_outputs(self, workspace):
        files = sorted((workspace / "data").glob("img_*.ppm"))
        assert len(files) == 12
        assert read_ppm(files[0]).shape == (3, 16, 16)
        meta = [json.loads(x) for x in (workspace / "data" / "metadata.jsonl").read_text().splitlines()]
        assert meta[0]["file"] == files[0].name and 2 <= len(meta[0]["primitives"]) <= 5

    def test_manifest_checksums(self, workspace):
        m = json.loads((workspace / "train" / "manifest.json").read_text())
        assert m["command"] == "train" and m["seed"] == 2
        assert m["start"] <= m["end"]
        assert len(m["outputs"]) == 4  # config, loss log, two checkpoints
        for path, digest in m["checksums"].items():
            assert sha256_file(path) == digest

    def test_synth_data_replay_same_checksums(self, tmp_path):
        args = ["synth-data", "--set", "n_images=3", "--seed", "9"]
        assert main(args + ["--out-dir", str(tmp_path / "a")]) == 0
        assert main(args + ["--out-dir", str(tmp_path / "b")]) == 0
        ca = json.loads((tmp_path / "a" / "manifest.json").read_text())["checksums"]
        cb = json.loads((tmp_path / "b" / "manifest.json").read_text())["checksums"]
        assert sorted(ca.values()) == sorted(cb.values())

    def test_train_replay_same_checkpoints(self, workspace, tmp_path):
        assert main(["train", "--data", str(workspace / "data"), "--out-dir", str(tmp_path), "--seed", "2"] + TINY_TRAIN) == 0
        for name in ("ckpt_epoch000.lepa", "ckpt_epoch001.lepa", "config.txt"):
            assert sha256_file(tmp_path / name) == sha256_file(workspace / "train" / name)

    def test_eval_oracle_prints_one(self, workspace, capsys):
        ck = str(workspace / "train" / "ckpt_epoch001.lepa")
        code = main(["eval-mrr", "--data", str(workspace / "data"), "--checkpoint", ck, "--predictor", "oracle",
                     "--out-dir", str(workspace / "eval")])  # fmt: skip
        assert code == 0
        assert _last_line(capsys) == "1.0000"

    @pytest.mark.parametrize("predictor", ["random", "nearest", "bilinear", "learned"])
    def test_eval_predictors(self, workspace, capsys, predictor):
        ck = str(workspace / "train" / "ckpt_epoch001.lepa")
        code = main(["eval-mrr", "--data", str(workspace / "data"), "--checkpoint", ck, "--predictor", predictor,
                     "--n-candidates", "8", "--out-dir", str(workspace / "eval")])  # fmt: skip
        assert code == 0
        value = float(_last_line(capsys))
        assert 1 / 8 <= value <= 1.0
        assert (workspace / "eval" / f"mrr_{predictor}.jsonl").exists()

    def test_eval_oracle_without_checkpoint(self, workspace, capsys):
        code = main(["eval-mrr", "--data", str(workspace / "data"), "--predictor", "oracle", "--set", "img_size=16",
                     "--set", "patch_size=4", "--n-images", "3", "--out-dir", str(workspace / "eval2")])  # fmt: skip
        assert code == 0 and _last_line(capsys) == "1.0000"

    def test_finetune(self, workspace):
        ck = str(workspace / "train" / "ckpt_epoch001.lepa")
        code = main(["finetune", "--data", str(workspace / "data"), "--checkpoint", ck, "--out-dir",
                     str(workspace / "ft"), "--set", "steps_per_epoch=2", "--set", "epochs=1", "--set", "batch_size=2"])  # fmt: skip
        assert code == 0
        log = (workspace / "ft" / "loss_log.jsonl").read_text().splitlines()
        assert all(json.loads(x)["objective"] == "finetune" for x in log)

    def test_transform_identity_nearest_is_byte_identical(self, tmp_path):
        g = np.random.default_rng(0).standard_normal((4, 4, 64)).astype(np.float32)
        write_grid(tmp_path / "in.egrd", g)
        code = main(["transform", "--grid", str(tmp_path / "in.egrd"), "--params", "0,0,0,1", "--mode", "nearest",
                     "--out", str(tmp_path / "out.egrd")])  # fmt: skip
        assert code == 0
        assert (tmp_path / "in.egrd").read_bytes() == (tmp_path / "out.egrd").read_bytes()
        assert (tmp_path / "out.egrd.manifest.json").exists()

    def test_encode_then_learned_transform_and_visualize(self, workspace, tmp_path):
        ck = str(workspace / "train" / "ckpt_epoch001.lepa")
        img = str(sorted((workspace / "data").glob("*.ppm"))[0])
        assert main(["encode", "--image", img, "--checkpoint", ck, "--out", str(tmp_path / "g.egrd")]) == 0
        assert read_grid(tmp_path / "g.egrd").shape == (4, 4, 16)
        code = main(["transform", "--grid", str(tmp_path / "g.egrd"), "--params", "0.1,0,0.5,1.2", "--mode", "learned",
                     "--checkpoint", ck, "--out", str(tmp_path / "t.egrd")])  # fmt: skip
        assert code == 0 and read_grid(tmp_path / "t.egrd").shape == (4, 4, 16)
        assert main(["visualize", "--grid", str(tmp_path / "t.egrd"), "--upscale", "2", "--out", str(tmp_path / "v.ppm")]) == 0
        assert read_ppm(tmp_path / "v.ppm").shape == (3, 8, 8)

    def test_gradcheck_micro(self, tmp_path, capsys):
        args = ["gradcheck", "--out-dir", str(tmp_path), "--dtype", "float64", "--set", "img_size=8",
                "--set", "enc_dim=4", "--set", "pred_dim=4", "--set", "cond_mlp_hidden=4"]  # fmt: skip
        assert main(args) == 0
        out = capsys.readouterr().out
        assert "max relative error" in out and "PASS" in out
        assert json.loads((tmp_path / "gradcheck.json").read_text())["results"]["float64"]["passed"]

    def test_env_var_output_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LEPA_OUT_DIR", str(tmp_path / "envout"))
        assert main(["synth-data", "--set", "n_images=1"]) == 0
        assert (tmp_path / "envout" / "manifest.json").exists()


class TestErrors:
    def _check(self, capsys, argv, code, category):
        assert main(argv) == code
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1 and err[0].startswith(f"error[{category}]: ")

    def test_unknown_flag(self, capsys):
        self._check(capsys, ["train", "--bogus"], EXIT_USAGE, "usage")

    def test_unknown_command(self, capsys):
        self._check(capsys, ["frobnicate"], EXIT_USAGE, "usage")

    def test_unknown_config_key(self, capsys, tmp_path):
        self._check(capsys, ["synth-data", "--out-dir", str(tmp_path), "--set", "colour=red"], EXIT_CONFIG, "config")

    def test_config_file_violation(self, capsys, tmp_path):
        (tmp_path / "c.txt").write_text("lr = -1\n")
        self._check(capsys, ["train", "--data", str(tmp_path), "--config", str(tmp_path / "c.txt")], EXIT_CONFIG, "config")

    def test_missing_file(self, capsys, tmp_path):
        self._check(capsys, ["visualize", "--grid", str(tmp_path / "nope.egrd"), "--out", str(tmp_path / "v.ppm")], EXIT_IO, "io")

    def test_corrupt_grid(self, capsys, tmp_path):
        (tmp_path / "bad.egrd").write_bytes(b"EGRD\x01\x00")
        self._check(capsys, ["visualize", "--grid", str(tmp_path / "bad.egrd"), "--out", str(tmp_path / "v.ppm")], EXIT_IO, "io")

    def test_bad_params(self, capsys, tmp_path):
        write_grid(tmp_path / "g.egrd", np.zeros((2, 2, 2), dtype=np.float32))
        self._check(capsys, ["transform", "--grid", str(tmp_path / "g.egrd"), "--params", "0,0,0", "--out", str(tmp_path / "o")], EXIT_USAGE, "usage")
        self._check(capsys, ["transform", "--grid", str(tmp_path / "g.egrd"), "--params", "0,0,0,0", "--out", str(tmp_path / "o")], EXIT_CONFIG, "config")

    def test_learned_needs_checkpoint(self, capsys, tmp_path):
        write_grid(tmp_path / "g.egrd", np.zeros((2, 2, 2), dtype=np.float32))
        self._check(capsys, ["transform", "--grid", str(tmp_path / "g.egrd"), "--params", "0,0,0,1", "--mode", "learned", "--out", str(tmp_path / "o")], EXIT_USAGE, "usage")

    def test_numeric_failure(self, capsys, tmp_path, monkeypatch):
        import lepa.gradcheck

        monkeypatch.setattr(lepa.gradcheck, "lepa_grad_check", lambda *a, **k: 0.5)
        self._check(capsys, ["gradcheck", "--out-dir", str(tmp_path), "--dtype", "float64"], EXIT_NUMERIC, "numeric")


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "lepa.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "eval-mrr" in r.stdout
