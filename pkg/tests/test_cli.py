import json
import subprocess
import sys

import numpy as np
import pytest

from udebias.cli import main, resolve_threads
from udebias.simlab import GaussianShiftModel, sample_with_cutoff


def write_sample_csv(path, sample):
    cols = [f"x{i}" for i in range(sample.x.shape[1])] + ["y"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row, y in zip(sample.x, sample.y):
            fh.write(",".join(f"{v:.12g}" for v in row) + f",{y:.12g}\n")


@pytest.fixture(scope="module")
def sample_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    rng = np.random.default_rng(0)
    null_model = GaussianShiftModel.lowdim(alternative=False)
    alt_model = GaussianShiftModel.lowdim(alternative=True)
    ref = sample_with_cutoff(null_model, 1500, rng, shifted=False)
    ref2 = sample_with_cutoff(null_model, 1500, rng, shifted=False)
    shifted_null = sample_with_cutoff(null_model, 1500, rng, shifted=True)
    shifted_alt = sample_with_cutoff(alt_model, 1500, rng, shifted=True)
    files = {}
    for name, sample in (("ref", ref), ("ref2", ref2),
                         ("g_null", shifted_null), ("g_alt", shifted_alt)):
        files[name] = root / f"{name}.csv"
        write_sample_csv(files[name], sample)
    return files


class TestValidation:
    def test_zero_trials_exit_2(self, tmp_path, capsys):
        code = main(["simulate", "--setting", "lowdim", "--n", "100",
                     "--trials", "0", "--out", str(tmp_path)])
        assert code == 2
        assert "trials" in capsys.readouterr().err

    def test_missing_response_column_exit_2(self, sample_files, tmp_path, capsys):
        code = main(["test", "--sample-f", str(sample_files["ref"]),
                     "--sample-g", str(sample_files["g_null"]),
                     "--response", "pressure", "--out", str(tmp_path)])
        assert code == 2
        assert "pressure" in capsys.readouterr().err

    def test_covariate_kind_needs_column(self, sample_files, tmp_path, capsys):
        code = main(["partition-test", "--data", str(sample_files["ref"]),
                     "--kind", "covariate", "--response", "y",
                     "--out", str(tmp_path)])
        assert code == 2

    def test_unknown_flag_exit_2(self):
        assert main(["simulate", "--bogus"]) == 2

    def test_threads_resolution(self, monkeypatch):
        assert resolve_threads(3) == 3
        monkeypatch.setenv("UDEBIAS_THREADS", "5")
        assert resolve_threads(None) == 5
        monkeypatch.delenv("UDEBIAS_THREADS")
        assert resolve_threads(None) >= 1


class TestSimulateCommand:
    def test_same_seed_byte_identical(self, tmp_path):
        args = ["simulate", "--setting", "lowdim", "--n", "120", "--trials", "4",
                "--method", "debiased", "--seed", "7"]
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(args + ["--out", str(out1), "--threads", "2"]) == 0
        assert main(args + ["--out", str(out2), "--threads", "1"]) == 0
        assert (out1 / "summary.csv").read_bytes() == (out2 / "summary.csv").read_bytes()
        assert (out1 / "trials.csv").read_bytes() == (out2 / "trials.csv").read_bytes()

    def test_manifest_rerun_reproduces(self, tmp_path):
        out1 = tmp_path / "first"
        assert main(["simulate", "--setting", "lowdim", "--n", "120", "--trials", "3",
                     "--seed", "9", "--out", str(out1), "--threads", "2"]) == 0
        manifest = json.loads((out1 / "manifest.json").read_text())
        assert manifest["command"] == "simulate"
        out2 = tmp_path / "second"
        assert main(["rerun", "--manifest", str(out1 / "manifest.json"),
                     "--out", str(out2), "--threads", "1"]) == 0
        assert (out1 / "summary.csv").read_bytes() == (out2 / "summary.csv").read_bytes()
        assert (out1 / "trials.csv").read_bytes() == (out2 / "trials.csv").read_bytes()

    def test_oracle_flag(self, tmp_path):
        assert main(["simulate", "--setting", "lowdim", "--n", "150", "--trials", "2",
                     "--oracle", "--seed", "3", "--out", str(tmp_path)]) == 0
        summary = (tmp_path / "summary.csv").read_text()
        assert "debiased" in summary


class TestTestCommand:
    def test_report_written(self, sample_files, tmp_path):
        out = tmp_path / "rep"
        code = main(["test", "--sample-f", str(sample_files["ref"]),
                     "--sample-g", str(sample_files["g_null"]),
                     "--response", "y", "--seed", "4", "--out", str(out)])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        for key in ("theta_hat", "t_stat", "p_value", "reject", "lambda"):
            assert key in report
        assert report["m"] == 500 and report["n"] == 500

    def test_null_rejection_rate_over_seeds(self, sample_files, tmp_path):
        # identically distributed files: the level should hold
        rejections = 0
        n_seeds = 60
        out = tmp_path / "loop"
        for seed in range(n_seeds):
            code = main(["test", "--sample-f", str(sample_files["ref"]),
                         "--sample-g", str(sample_files["ref2"]),
                         "--response", "y", "--seed", str(seed), "--out", str(out)])
            assert code == 0
            report = json.loads((out / "report.json").read_text())
            rejections += report["reject"]
        # 99% binomial band around 0.05 with 60 draws
        assert rejections / n_seeds <= 0.05 + 2.576 * (0.05 * 0.95 / n_seeds) ** 0.5

    def test_alternative_power_over_seeds(self, sample_files, tmp_path):
        hits = 0
        n_seeds = 40
        out = tmp_path / "loop2"
        for seed in range(n_seeds):
            main(["test", "--sample-f", str(sample_files["ref"]),
                  "--sample-g", str(sample_files["g_alt"]),
                  "--response", "y", "--seed", str(seed), "--out", str(out)])
            report = json.loads((out / "report.json").read_text())
            hits += report["p_value"] < 0.05
        assert hits / n_seeds >= 0.80


class TestPartitionCommand:
    def test_random_partition_run(self, sample_files, tmp_path):
        out = tmp_path / "part"
        code = main(["partition-test", "--data", str(sample_files["ref"]),
                     "--kind", "random", "--response", "y", "--reps", "4",
                     "--seed", "2", "--out", str(out), "--threads", "2"])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert 0.3 < report["mean_theta"] < 0.7
        reps = (out / "reps.csv").read_text().strip().splitlines()
        assert len(reps) == 5

    def test_rerun_partition(self, sample_files, tmp_path):
        out1 = tmp_path / "p1"
        main(["partition-test", "--data", str(sample_files["ref"]),
              "--kind", "response", "--response", "y", "--reps", "3",
              "--seed", "5", "--out", str(out1), "--threads", "1"])
        out2 = tmp_path / "p2"
        assert main(["rerun", "--manifest", str(out1 / "manifest.json"),
                     "--out", str(out2), "--threads", "2"]) == 0
        assert (out1 / "report.json").read_bytes() == (out2 / "report.json").read_bytes()
        assert (out1 / "reps.csv").read_bytes() == (out2 / "reps.csv").read_bytes()


def test_console_script_version():
    proc = subprocess.run([sys.executable, "-m", "udebias.cli", "--version"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
