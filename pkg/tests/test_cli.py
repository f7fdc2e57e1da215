"""End-to-end CLI behaviour: artifacts, manifests, reproducibility, and
exit codes. Uses tiny configs so the whole module stays fast."""

import filecmp
import json
import os

import numpy as np
import pytest

from cauliflow.cli import main


def run_cli(*argv):
    return main(list(argv))


def tree_bytes(root):
    out = {}
    for dirpath, _dirnames, filenames in os.walk(root):
        for name in sorted(filenames):
            path = os.path.join(dirpath, name)
            rel = os.path.relpath(path, root)
            with open(path, "rb") as fh:
                out[rel] = fh.read()
    return out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny corpus + trained models shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run_cli("gen-data", "--out", str(data), "--seed", "3",
                   "--train", "60", "--dev", "16", "--test", "12") == 0
    dur_dir = root / "dur"
    assert run_cli("train-dur", "--data", str(data), "--out", str(dur_dir),
                   "--seed", "1", "--epochs", "2") == 0
    flow_dir = root / "flow"
    assert run_cli("train-flow", "--data", str(data), "--out", str(flow_dir),
                   "--seed", "2", "--epochs", "2", "--group", "2", "--steps", "2",
                   "--hidden", "8") == 0
    return root, data, dur_dir, flow_dir


class TestGenData:
    def test_same_seed_identical_trees(self, tmp_path):
        for name in ("a", "b"):
            assert run_cli("gen-data", "--out", str(tmp_path / name), "--seed", "7",
                           "--train", "20", "--dev", "5", "--test", "5") == 0
        ta = tree_bytes(tmp_path / "a")
        tb = tree_bytes(tmp_path / "b")
        assert ta == tb

    def test_writes_manifest_and_splits(self, workspace):
        _, data, _, _ = workspace
        manifest = json.loads((data / "manifest.json").read_text())
        assert manifest["command"] == "gen-data"
        for split in ("train", "dev", "test"):
            assert (data / split / "utterances.jsonl").exists()


class TestTrainingAndPredict:
    def test_dur_training_writes_artifacts(self, workspace):
        _, _, dur_dir, _ = workspace
        assert (dur_dir / "model.ckpt").exists()
        curve = json.loads((dur_dir / "curve.json").read_text())
        assert len(curve) == 2

    def test_predict_and_evaluate_roundtrip(self, workspace, tmp_path):
        root, data, dur_dir, _ = workspace
        pred_dir = tmp_path / "pred"
        assert run_cli("predict", "--model", str(dur_dir / "model.ckpt"),
                       "--data", str(data / "test"), "--out", str(pred_dir)) == 0
        eval_dir = tmp_path / "eval"
        assert run_cli("evaluate", "--pred", str(pred_dir / "predictions"),
                       "--target", str(data / "test"), "--out", str(eval_dir)) == 0
        report = json.loads((eval_dir / "report.json").read_text())
        assert 0 <= report["jsd_pause"] <= np.log(2)
        assert (eval_dir / "punct_histogram.csv").exists()

    def test_evaluate_self_comparison_is_perfect(self, workspace, tmp_path):
        _, data, _, _ = workspace
        out = tmp_path / "self"
        assert run_cli("evaluate", "--pred", str(data / "test"),
                       "--target", str(data / "test"), "--out", str(out)) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["jsd_pause"] == 0.0
        assert report["punct_fbeta"] == 100.0
        assert report["percentile_l1"] == 0.0

    def test_flow_predict_temperature_zero_deterministic(self, workspace, tmp_path):
        _, data, _, flow_dir = workspace
        outs = []
        for name in ("p1", "p2"):
            out = tmp_path / name
            assert run_cli("predict", "--model", str(flow_dir / "model.ckpt"),
                           "--data", str(data / "test"), "--out", str(out),
                           "--temperature", "0", "--seed", "9") == 0
            outs.append(tree_bytes(out / "predictions"))
        assert outs[0] == outs[1]


class TestManifestRerun:
    def test_training_rerun_reproduces_checkpoint(self, workspace, tmp_path):
        root, data, dur_dir, _ = workspace
        before = (dur_dir / "model.ckpt").read_bytes()
        assert run_cli("--from-manifest", str(dur_dir / "manifest.json")) == 0
        after = (dur_dir / "model.ckpt").read_bytes()
        assert before == after

    def test_gen_data_rerun_reproduces_corpus(self, workspace):
        _, data, _, _ = workspace
        before = tree_bytes(data)
        assert run_cli("--from-manifest", str(data / "manifest.json")) == 0
        assert tree_bytes(data) == before

    def test_flow_rerun_reproduces_checkpoint(self, workspace):
        _, _, _, flow_dir = workspace
        before = (flow_dir / "model.ckpt").read_bytes()
        assert run_cli("--from-manifest", str(flow_dir / "manifest.json")) == 0
        assert (flow_dir / "model.ckpt").read_bytes() == before


class TestSweeps:
    def test_temperature_sweep_csv(self, workspace, tmp_path):
        _, data, _, flow_dir = workspace
        out = tmp_path / "sweep"
        assert run_cli("sweep-temperature", "--model", str(flow_dir / "model.ckpt"),
                       "--data", str(data / "test"), "--out", str(out),
                       "--values", "0.3,1.0", "--seed", "4") == 0
        lines = (out / "temperature_sweep.csv").read_text().splitlines()
        assert lines[0].startswith("temperature,jsd_pause,jsd_nonpause")
        assert len(lines) == 3

    def test_rate_sweep_zero_request_zero_delta(self, workspace, tmp_path):
        _, data, _, flow_dir = workspace
        out = tmp_path / "rsweep"
        assert run_cli("sweep-rate", "--model", str(flow_dir / "model.ckpt"),
                       "--data", str(data / "test"), "--out", str(out),
                       "--control", "speech", "--values=-0.3,0,0.3",
                       "--seed", "4") == 0
        rows = (out / "rate_sweep_speech.csv").read_text().splitlines()[1:]
        measured = {float(r.split(",")[0]): float(r.split(",")[1]) for r in rows}
        assert measured[0.0] == 0.0


class TestSelftest:
    def test_selftest_passes(self, capsys):
        assert run_cli("selftest") == 0
        out = capsys.readouterr().out
        assert "[PASS]" in out and "[FAIL]" not in out


class TestErrors:
    def test_missing_input_exit_3(self, tmp_path):
        assert run_cli("train-dur", "--data", str(tmp_path / "nope"),
                       "--out", str(tmp_path / "o")) == 3

    def test_mismatched_evaluate_exit_4(self, workspace, tmp_path):
        _, data, _, _ = workspace
        assert run_cli("evaluate", "--pred", str(data / "dev"),
                       "--target", str(data / "test"), "--out", str(tmp_path / "e")) == 4

    def test_unknown_flag_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("gen-data", "--bogus", "x")
        assert exc.value.code == 2

    def test_no_command_shows_help(self, capsys):
        assert run_cli() == 2

    def test_durp_predict_without_phrasing_exit_4(self, workspace, tmp_path):
        root, data, _, _ = workspace
        durp_dir = root / "durp"
        assert run_cli("train-durp", "--data", str(data), "--out", str(durp_dir),
                       "--seed", "1", "--epochs", "1") == 0
        assert run_cli("predict", "--model", str(durp_dir / "model.ckpt"),
                       "--data", str(data / "test"), "--out", str(tmp_path / "p")) == 4
