"""Command-line behaviour: exit codes, run layout and reports."""

import json
import os
import subprocess
import sys

import pytest

from qsim_lab.cli import main, parse_int_list

SMALL = """
env: climbing
variant: QSIM
seeds: [1, 2]
step_max: 12
eval_interval: 4
eval_episodes: 2
batch_size: 4
network: {agent_hidden: [8], mixer_embed: 4, hypernet_hidden: 8, ae_hidden: 8, embed_dim: 4}
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text(SMALL)
    return path


class TestParseIntList:
    def test_forms(self):
        assert parse_int_list("1..5") == [1, 2, 3, 4, 5]
        assert parse_int_list("2,4") == [2, 4]
        assert parse_int_list("3") == [3]

    @pytest.mark.parametrize("bad", ["0", "a", "3..1", "-1..2"])
    def test_rejects(self, bad):
        import argparse

        with pytest.raises(argparse.ArgumentTypeError):
            parse_int_list(bad)


class TestTrain:
    def test_seed_directories(self, config_file, tmp_path):
        out = tmp_path / "runs"
        assert main(["-q", "train", str(config_file), "--output-dir", str(out)]) == 0
        assert sorted(p.name for p in out.iterdir() if p.is_dir()) == ["seed_1", "seed_2"]
        for d in out.iterdir():
            assert {p.name for p in d.iterdir()} >= {"metrics.csv", "manifest.json", "checkpoint.bin"}
            assert len((d / "metrics.csv").read_text().splitlines()) == 1 + 12 // 4 + 1

    def test_rerun_byte_identical(self, config_file, tmp_path):
        main(["-q", "train", str(config_file), "--output-dir", str(tmp_path / "a"), "--seeds", "1"])
        main(["-q", "train", str(config_file), "--output-dir", str(tmp_path / "b"), "--seeds", "1"])
        assert (tmp_path / "a/seed_1/metrics.csv").read_bytes() == (tmp_path / "b/seed_1/metrics.csv").read_bytes()

    def test_parallel_workers_match_serial(self, config_file, tmp_path, monkeypatch):
        monkeypatch.setenv("QSIM_LAB_THREADS", "1")
        main(["-q", "train", str(config_file), "--output-dir", str(tmp_path / "s")])
        monkeypatch.setenv("QSIM_LAB_THREADS", "2")
        main(["-q", "train", str(config_file), "--output-dir", str(tmp_path / "p")])
        for seed in (1, 2):
            f = f"seed_{seed}/metrics.csv"
            assert (tmp_path / "s" / f).read_bytes() == (tmp_path / "p" / f).read_bytes()

    def test_unwritable_output(self, config_file, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["train", str(config_file), "--output-dir", str(blocker / "sub")]) == 2
        assert str(blocker / "sub") in capsys.readouterr().err

    def test_missing_config(self, tmp_path, capsys):
        assert main(["train", str(tmp_path / "none.yaml")]) == 2
        assert "none.yaml" in capsys.readouterr().err

    def test_invalid_config(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text("env: climbing\nvariant: QSIM\nseeds: [1]\ngamma: 1.5\n")
        assert main(["train", str(path)]) == 2
        assert "gamma" in capsys.readouterr().err


class TestAnalyzeBias:
    def test_five_rows(self, tmp_path):
        out = tmp_path / "bias.csv"
        assert main(["-q", "analyze-bias", "--agents", "1..5", "--actions", "5", "--sigma", "1",
                     "--trials", "2000", "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 6 and lines[0].startswith("N,A,sigma")

    def test_agents_zero(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["analyze-bias", "--agents", "0"])
        assert exc.value.code == 2

    def test_sigma_zero(self, tmp_path):
        out = tmp_path / "bias.csv"
        main(["-q", "analyze-bias", "--agents", "1..3", "--sigma", "0", "--trials", "10", "--out", str(out)])
        for line in out.read_text().splitlines()[1:]:
            cols = line.split(",")
            assert float(cols[4]) == 0.0 and float(cols[6]) == 0.0

    def test_cap_message(self, tmp_path, capsys):
        assert main(["analyze-bias", "--agents", "9", "--actions", "10", "--out", str(tmp_path / "x.csv")]) == 2
        assert "cap" in capsys.readouterr().err


class TestVerify:
    def test_clean_run(self, tmp_path):
        out = tmp_path / "report.json"
        code = main(["-q", "verify", "--samples", "200", "--grad-draws", "2", "--mono-draws", "50",
                     "--igm-draws", "20", "--out", str(out)])
        report = json.loads(out.read_text())
        assert code == 0 and report["violations"] == 0
        assert set(report["suites"]) == {"theorem2", "gradient_check", "qmix_monotonicity", "igm_vdn"}

    def test_single_sample(self, capsys):
        assert main(["-q", "verify", "--samples", "1", "--skip-suites"]) == 0
        assert json.loads(capsys.readouterr().out)["samples"] == 1

    def test_injected_fault(self, capsys):
        assert main(["-q", "verify", "--samples", "300", "--skip-suites", "--inject-fault"]) == 1
        report = json.loads(capsys.readouterr().out)
        assert report["violations"] > 0 and report["suites"]["theorem2"]["counterexamples"]


class TestCompareDeltaQ:
    def test_round_trip(self, config_file, tmp_path, capsys):
        main(["-q", "train", str(config_file), "--output-dir", str(tmp_path / "r")])
        runs = [str(tmp_path / "r" / f"seed_{s}") for s in (1, 2)]
        out = tmp_path / "cmp.csv"
        assert main(["-q", "compare-delta-q", "--baseline", *runs, "--qsim", *runs, "--out", str(out)]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["final_gap"] == 0.0
        assert len(out.read_text().splitlines()) == 1 + 4

    def test_missing_runs(self, tmp_path):
        assert main(["compare-delta-q", "--baseline", str(tmp_path), "--qsim", str(tmp_path)]) == 2


def test_console_script_progress_on_stderr(config_file, tmp_path):
    env = dict(os.environ, QSIM_LAB_THREADS="1")
    proc = subprocess.run(
        [sys.executable, "-m", "qsim_lab.cli", "train", str(config_file), "--output-dir", str(tmp_path / "o"), "--seeds", "1"],
        capture_output=True, text=True, env=env,
    )
    assert proc.returncode == 0
    assert proc.stdout == "" and "seed 1" in proc.stderr
