import json

import numpy as np
import pytest

from sparseae.checkpoint import load_checkpoint
from sparseae.cli import EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from sparseae.data import parse_point_cloud, parse_strokes

SMALL = ["--grid", "16", "--k", "2", "--batch-size", "4"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-synth", "--style", "polyline", "--n", "6", "--grid", "16", "--seed", "1",
                 "--out", str(root / "clouds")]) == EXIT_OK
    assert main(["gen-synth", "--style", "digits", "--n", "24", "--seed", "2",
                 "--out", str(root / "digits.txt")]) == EXIT_OK
    assert main(["train-ae", "--train-data", str(root / "clouds"), *SMALL, "--steps", "4",
                 "--out", str(root / "ae.ckpt")]) == EXIT_OK
    assert main(["train-ae", "--train-data", str(root / "digits.txt"), *SMALL, "--steps", "3",
                 "--out", str(root / "digits_ae.ckpt")]) == EXIT_OK
    return root


class TestGenSynth:
    def test_files(self, workspace):
        files = sorted((workspace / "clouds").iterdir())
        assert len(files) == 6
        cloud = parse_point_cloud(files[0].read_text())
        assert cloud.d == 2 and len(cloud.labels) == len(cloud.points)
        digits = parse_strokes((workspace / "digits.txt").read_text())
        assert len(digits) == 24


class TestTrainAE:
    def test_log_and_checkpoint(self, workspace):
        lines = (workspace / "ae.ckpt.log").read_text().splitlines()
        assert lines[0].startswith("step=1 ") and "mse=" in lines[0]
        assert lines[-1].startswith("epoch=") and "pattern_acc=" in lines[-1]
        ckpt = load_checkpoint(workspace / "ae.ckpt")
        assert ckpt.meta["kind"] == "autoencoder" and ckpt.meta["step"] == 4

    def test_deterministic(self, workspace, tmp_path):
        for name in ("a", "b"):
            assert main(["train-ae", "--train-data", str(workspace / "clouds"), *SMALL,
                         "--steps", "4", "--out", str(tmp_path / f"{name}.ckpt")]) == EXIT_OK
        assert (tmp_path / "a.ckpt").read_bytes() == (workspace / "ae.ckpt").read_bytes()
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert (tmp_path / "a.ckpt.log").read_bytes() == (tmp_path / "b.ckpt.log").read_bytes()

    def test_seed_changes_result(self, workspace, tmp_path):
        main(["train-ae", "--train-data", str(workspace / "clouds"), *SMALL, "--steps", "4",
              "--seed", "5", "--out", str(tmp_path / "s.ckpt")])
        assert (tmp_path / "s.ckpt").read_bytes() != (workspace / "ae.ckpt").read_bytes()

    def test_config_file(self, workspace, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"# small run\ntrain_data = {workspace / 'clouds'}\ngrid = 16\nk = 2\n"
                       "batch_size = 4\nsteps = 4\n")
        assert main(["train-ae", "--config", str(cfg), "--out", str(tmp_path / "c.ckpt")]) == EXIT_OK
        assert (tmp_path / "c.ckpt").read_bytes() == (workspace / "ae.ckpt").read_bytes()


class TestExitCodes:
    def test_missing_dataset(self, tmp_path):
        out = tmp_path / "x.ckpt"
        assert main(["train-ae", "--train-data", str(tmp_path / "nope"), "--out", str(out)]) == EXIT_DATA
        assert not out.exists()

    def test_bad_data(self, tmp_path):
        (tmp_path / "bad.txt").write_text("7;0,0 1,x\n")
        assert main(["train-ae", "--train-data", str(tmp_path / "bad.txt"),
                     "--out", str(tmp_path / "x.ckpt")]) == EXIT_DATA

    @pytest.mark.parametrize("flags", [["--k", "0"], ["--optimizer", "rmsprop"], ["--lr", "abc"],
                                       ["--grid", "12"], ["--d", "5"]])
    def test_bad_config(self, workspace, tmp_path, flags):
        argv = ["train-ae", "--train-data", str(workspace / "clouds"), *flags,
                "--out", str(tmp_path / "x.ckpt")]
        assert main(argv) == EXIT_CONFIG

    def test_unknown_key_in_file(self, tmp_path):
        (tmp_path / "c.cfg").write_text("colour = red\n")
        assert main(["train-ae", "--config", str(tmp_path / "c.cfg"), "--out", "x"]) == EXIT_CONFIG

    def test_bad_checkpoint(self, workspace, tmp_path):
        (tmp_path / "junk.ckpt").write_bytes(b"garbage")
        argv = ["eval", str(tmp_path / "junk.ckpt"), "--test-data", str(workspace / "clouds")]
        assert main(argv) == EXIT_CHECKPOINT
        data = (workspace / "ae.ckpt").read_bytes()
        (tmp_path / "cut.ckpt").write_bytes(data[:len(data) // 2])
        argv[1] = str(tmp_path / "cut.ckpt")
        assert main(argv) == EXIT_CHECKPOINT


class TestEval:
    def test_report_stable(self, workspace, tmp_path, capsys):
        reports = []
        for name in ("r1.json", "r2.json"):
            assert main(["eval", str(workspace / "ae.ckpt"), *SMALL, "--test-data",
                         str(workspace / "clouds"), "--out", str(tmp_path / name)]) == EXIT_OK
            reports.append((tmp_path / name).read_bytes())
        assert reports[0] == reports[1]
        report = json.loads(reports[0])
        assert report["samples"] == 6 and 0.0 <= report["pattern_acc"] <= 1.0
        assert report["mse"] >= 0
        assert "pattern_acc=" in capsys.readouterr().out


class TestReconstruct:
    def test_dumps_parse(self, workspace, tmp_path):
        out = tmp_path / "rec"
        assert main(["reconstruct", str(workspace / "ae.ckpt"), str(workspace / "clouds"),
                     "--out", str(out)]) == EXIT_OK
        outputs = sorted(out.glob("*_output.txt"))
        assert len(outputs) == 6
        levels = sorted(out.glob("sample0000_level*.txt"))
        assert levels
        for f in outputs[:1] + levels:
            cloud = parse_point_cloud(f.read_text())
            assert set(cloud.labels.tolist()) <= {0, 1, 2}
        # the output dump covers every input site as TP or FN
        truth = parse_point_cloud((workspace / "clouds" / "sample0000.txt").read_text())
        dump = parse_point_cloud(outputs[0].read_text())
        covered = {tuple(p) for p, c in zip(dump.points.tolist(), dump.labels) if c != 1}
        assert covered == {tuple(np.floor(p).tolist()) for p in truth.points}


class TestTrainHead:
    def _head(self, workspace, tmp_path, protocol, name):
        out = tmp_path / name
        argv = ["train-head", "--train-data", str(workspace / "digits.txt"), *SMALL,
                "--head", "linear", "--protocol", protocol, "--steps", "3", "--burn-in", "2",
                "--out", str(out)]
        if protocol == "unsupervised":
            argv += ["--encoder", str(workspace / "digits_ae.ckpt")]
        assert main(argv) == EXIT_OK
        return load_checkpoint(out)

    def test_unsupervised_freezes_encoder(self, workspace, tmp_path):
        head = self._head(workspace, tmp_path, "unsupervised", "u.ckpt")
        ae = load_checkpoint(workspace / "digits_ae.ckpt")
        enc = {k[len("enc."):]: v for k, v in head.tensors.items() if k.startswith("enc.")}
        assert enc
        for key, value in enc.items():
            assert np.array_equal(value, ae.tensors["ae.encoder." + key]), key
        # linear head on a 32-channel latent (k=2, 16x16 input), 10 classes
        assert head.meta["head_parameters"] == 32 * 10 + 10

    def test_untrained_and_supervised(self, workspace, tmp_path):
        u = self._head(workspace, tmp_path, "untrained", "n.ckpt")
        s = self._head(workspace, tmp_path, "supervised", "s.ckpt")
        assert u.meta["protocol"] == "untrained" and s.meta["protocol"] == "supervised"
        # supervised training moves encoder weights, untrained keeps them at init
        first = next(k for k in u.tensors if k.startswith("enc.") and k.endswith("kernel"))
        assert not np.array_equal(u.tensors[first], s.tensors[first])

    def test_eval_head(self, workspace, tmp_path):
        self._head(workspace, tmp_path, "untrained", "n.ckpt")
        assert main(["eval", str(tmp_path / "n.ckpt"), *SMALL, "--test-data",
                     str(workspace / "digits.txt"), "--out", str(tmp_path / "r.json")]) == EXIT_OK
        report = json.loads((tmp_path / "r.json").read_text())
        assert 0.0 <= report["error_pct"] <= 100.0

    def test_unsupervised_needs_encoder(self, workspace, tmp_path):
        assert main(["train-head", "--train-data", str(workspace / "digits.txt"), *SMALL,
                     "--out", str(tmp_path / "h.ckpt")]) == EXIT_CONFIG

    def test_segmentation_head(self, workspace, tmp_path):
        assert main(["train-head", "--train-data", str(workspace / "clouds"), *SMALL,
                     "--head", "unet", "--classes", "2", "--steps", "2",
                     "--out", str(tmp_path / "seg.ckpt")]) == EXIT_OK
        assert main(["eval", str(tmp_path / "seg.ckpt"), *SMALL, "--classes", "2",
                     "--test-data", str(workspace / "clouds"), "--out", str(tmp_path / "r.json")]) == EXIT_OK
        assert 0.0 <= json.loads((tmp_path / "r.json").read_text())["mean_iou"] <= 1.0


class TestConvertStrokes:
    def test_convert(self, tmp_path):
        (tmp_path / "a.tra").write_text('.SEGMENT DIGIT 0 ? "4"\n.PEN_DOWN\n 1 2\n 3 4\n.PEN_UP\n')
        assert main(["convert-strokes", str(tmp_path / "a.tra"), "--out", str(tmp_path / "o.txt")]) == EXIT_OK
        assert (tmp_path / "o.txt").read_text() == "4;1,2 3,4\n"
