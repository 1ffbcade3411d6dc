import json
import subprocess
import sys

import numpy as np
import pytest

from rfpresence import cli, streamio
from rfpresence.detector import DetectionTimeline


def run_cli(args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "sim"
    rc = run_cli(["simulate", "--out", out, "--scenes", 2, "--windows", 3,
                  "--windows-per-run", 2, "--seed", 3, "--noise-std", 0.02])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def trained(sim_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_model") / "model.rfpm"
    rc = run_cli(["train", "--data", sim_dir, "--out", out,
                  "--epochs", 2, "--batch", 8, "--seed", 5])
    assert rc == 0
    return out


class TestSimulate:
    def test_writes_files_and_manifest(self, sim_dir):
        files = sorted(sim_dir.glob("*.csi"))
        assert [f.name for f in files] == ["day00.csi", "day01.csi"]
        manifest = json.loads((sim_dir / "manifest.json").read_text())
        assert manifest["command"] == "simulate"
        assert manifest["args"]["seed"] == 3
        assert manifest["files"] == ["day00.csi", "day01.csi"]

    def test_replay_is_byte_identical(self, sim_dir, tmp_path):
        out2 = tmp_path / "sim2"
        rc = run_cli(["simulate", "--out", out2, "--scenes", 2, "--windows", 3,
                      "--windows-per-run", 2, "--seed", 3, "--noise-std", 0.02])
        assert rc == 0
        for f in sorted(sim_dir.glob("*.csi")):
            assert f.read_bytes() == (out2 / f.name).read_bytes()

    def test_missing_parent_dir_fails_cleanly(self, capsys):
        rc = run_cli(["simulate", "--out", "/nonexistent/deep/dir", "--scenes", 1,
                      "--windows", 1])
        assert rc == 2
        assert "error:" in capsys.readouterr().err

    def test_config_file_applies(self, tmp_path):
        cfgfile = tmp_path / "sim.cfg"
        cfgfile.write_text("noise_std = 0.0\npaths = 3\n")
        out = tmp_path / "nz"
        rc = run_cli(["simulate", "--out", out, "--scenes", 1, "--windows", 1,
                      "--seed", 1, "--config", cfgfile])
        assert rc == 0
        seg = streamio.read_stream_file(sorted(out.glob("*.csi"))[0])[0]
        # zero noise and zero motion: a label-0 run has constant |h|
        mags = np.abs(seg.h)
        assert np.allclose(mags, mags[0], rtol=1e-5)


class TestImport:
    def test_jsonl_round_trip(self, tmp_path):
        jsonl = tmp_path / "in.jsonl"
        lines = [json.dumps({"n_sc": 14, "n_r": 3, "n_t": 3, "label": 1, "day_id": "j0"})]
        rng = np.random.default_rng(0)
        for i in range(3):
            coeffs = rng.standard_normal((14 * 3 * 3, 2)).round(3)
            lines.append(json.dumps({"timestamp_us": i * 10000, "h": coeffs.tolist()}))
        jsonl.write_text("\n".join(lines) + "\n")
        out = tmp_path / "out.csi"
        assert run_cli(["import", "--jsonl", jsonl, "--out", out]) == 0
        (seg,) = streamio.read_stream_file(out)
        assert seg.header.label == 1
        assert seg.n_frames == 3
        assert (tmp_path / "out.csi.manifest.json").exists()


class TestTrainEvalDetect:
    def test_train_artifacts(self, trained):
        assert trained.exists()
        assert trained.with_suffix(".rfpm.report.txt").exists()
        report_lines = trained.with_suffix(".rfpm.report.jsonl").read_text().splitlines()
        kinds = {json.loads(l)["kind"] for l in report_lines}
        assert kinds == {"epoch", "test_day", "summary"}
        manifest = json.loads(trained.with_suffix(".rfpm.manifest.json").read_text())
        assert manifest["splits"]["test"] == ["day01"]

    def test_train_replay_is_byte_identical(self, sim_dir, trained):
        first = trained.read_bytes()
        rc = run_cli(["train", "--data", sim_dir, "--out", trained,
                      "--epochs", 2, "--batch", 8, "--seed", 5])
        assert rc == 0
        assert trained.read_bytes() == first

    def test_eval_runs_and_writes_table(self, sim_dir, trained, tmp_path, capsys):
        table = tmp_path / "eval.txt"
        rc = run_cli(["eval", "--model", trained, "--data", sim_dir, "--out", table])
        assert rc == 0
        text = table.read_text()
        assert "day00" in text and "overall" in text

    def test_eval_dump_inputs(self, sim_dir, trained, tmp_path):
        dump = tmp_path / "inputs.bin"
        rc = run_cli(["eval", "--model", trained, "--data", sim_dir,
                      "--dump-inputs", dump])
        assert rc == 0
        tensors = streamio.load_tensors(dump)
        assert len(tensors) == 2  # one per branch
        assert tensors[0].shape[1:] == (50, 14, 9)
        assert tensors[1].shape[1:] == (50, 14, 6)

    def test_eval_variant_mismatch(self, sim_dir, trained, capsys):
        rc = run_cli(["eval", "--model", trained, "--data", sim_dir,
                      "--variant", "no-dft"])
        assert rc == 2
        assert "variant" in capsys.readouterr().err

    def test_detect_file_mode(self, sim_dir, trained, tmp_path):
        stream = sorted(sim_dir.glob("*.csi"))[0]
        out = tmp_path / "timeline.csv"
        rc = run_cli(["detect", "--model", trained, "--stream", stream, "--out", out])
        assert rc == 0
        lines = out.read_text().splitlines()
        assert lines[0].startswith("# rfpresence detect")
        tl = DetectionTimeline.from_lines(lines)
        assert tl.verify(cli.DetectorConfig())

    def test_detect_replay_is_byte_identical(self, sim_dir, trained, tmp_path):
        stream = sorted(sim_dir.glob("*.csi"))[0]
        out = tmp_path / "t1.csv"
        assert run_cli(["detect", "--model", trained, "--stream", stream, "--out", out]) == 0
        first = out.read_bytes()
        assert run_cli(["detect", "--model", trained, "--stream", stream, "--out", out]) == 0
        assert out.read_bytes() == first

    def test_detect_stdin_matches_file(self, sim_dir, trained, tmp_path):
        stream = sorted(sim_dir.glob("*.csi"))[0]
        out_file = tmp_path / "file.csv"
        assert run_cli(["detect", "--model", trained, "--stream", stream,
                        "--out", out_file]) == 0
        proc = subprocess.run(
            [sys.executable, "-m", "rfpresence.cli", "detect", "--model", str(trained),
             "--stdin", "--out", str(tmp_path / "stdin.csv")],
            stdin=open(stream, "rb"), capture_output=True, timeout=300,
        )
        assert proc.returncode == 0, proc.stderr.decode()
        file_lines = out_file.read_text().splitlines()[1:]
        stdin_lines = (tmp_path / "stdin.csv").read_text().splitlines()[1:]
        assert file_lines == stdin_lines

    def test_detect_requires_source(self, trained, capsys):
        with pytest.raises(SystemExit):
            run_cli(["detect", "--model", trained])
