"""Command-line interface tests, run through the real entry point."""

import csv
import json
import subprocess
import sys
import time
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent

TINY_SCENARIO = """\
m = 12
cluster_sizes = 2, 3
true_betas = -1, 1, 0.5
sigma_b = 1
true_family = normal
fitted_families = normal
n_replications = 2
base_seed = 99
covariate_scheme = within_between
quad_points = 15
"""

TINY_LIMIT = """\
n = 3
true_betas = -1, 0.5, 0.5
sigma_b = 1
true_family = normal
assumed_family = normal
quad_points = 25
"""


def run_cli(*args, cwd=None):
    return subprocess.run(
        [sys.executable, "-m", "glmmlab", *args],
        capture_output=True,
        text=True,
        cwd=cwd,
    )


@pytest.fixture(scope="module")
def demo_data(tmp_path_factory):
    """A small synthetic dataset CSV plus a saved fit for predict tests."""
    from glmmlab.config import parse_scenario_config
    from glmmlab.dataio import write_dataset_csv
    from glmmlab.simlab import gen_dataset

    out = tmp_path_factory.mktemp("cli_demo")
    config = parse_scenario_config(
        TINY_SCENARIO.replace("m = 12", "m = 60").replace(
            "cluster_sizes = 2, 3", "cluster_sizes = 4"
        )
    )
    dataset = gen_dataset(config, 4, 0)
    data_path = out / "data.csv"
    write_dataset_csv(dataset, data_path, include_truth=True)
    fit_path = out / "fit.csv"
    result = run_cli(
        "fit", "--data", str(data_path), "--model", "bernoulli",
        "--ranef", "normal", "--out", str(fit_path),
    )
    assert result.returncode == 0, result.stderr
    return data_path, fit_path


class TestMoments:
    def test_tukey_values_and_runtime(self):
        started = time.time()
        result = run_cli("moments", "--family", "tukey(g=0.5,h=0.1)")
        elapsed = time.time() - started
        assert result.returncode == 0
        lines = {l.split()[0]: float(l.split()[1]) for l in result.stdout.splitlines()}
        assert round(lines["mean"], 2) == 0.31
        assert round(lines["variance"], 2) == 2.27
        assert round(lines["skewness"], 2) == 3.41
        assert round(lines["kurtosis"], 2) == 44.24
        assert "raw" in result.stdout
        assert elapsed < 5.0  # generous; the work itself is milliseconds

    def test_normal_kurtosis_under_raw_convention(self):
        result = run_cli("moments", "--family", "normal")
        values = [float(l.split()[1]) for l in result.stdout.splitlines()]
        assert values == [0.0, 1.0, 0.0, 3.0]

    def test_heavy_tail_moment_error(self):
        result = run_cli("moments", "--family", "tukey(g=0, h=0.6)")
        assert result.returncode == 2
        assert "order 2" in result.stderr

    def test_parse_error(self):
        result = run_cli("moments", "--family", "triangle")
        assert result.returncode == 2


class TestFitCommand:
    def test_two_families_same_data(self, demo_data, tmp_path):
        data_path, _ = demo_data
        logliks = {}
        within = {}
        for ranef in ("normal", "exp"):
            out = tmp_path / f"fit_{ranef}.csv"
            result = run_cli(
                "fit", "--data", str(data_path), "--model", "bernoulli",
                "--ranef", ranef, "--out", str(out),
            )
            assert result.returncode == 0, result.stderr
            status = json.loads(out.read_text().splitlines()[-1])
            logliks[ranef] = status["loglik"]
            for line in out.read_text().splitlines():
                if line.startswith("beta_within,"):
                    within[ranef] = float(line.split(",")[1])
        assert logliks["normal"] != logliks["exp"]
        assert abs(within["normal"] - within["exp"]) < 0.1

    def test_missing_covariate_column(self, demo_data):
        data_path, _ = demo_data
        result = run_cli(
            "fit", "--data", str(data_path), "--model", "bernoulli:slope=visit",
            "--ranef", "bvnormal",
        )
        assert result.returncode == 2
        assert "missing covariate column: visit" in result.stderr

    def test_missing_file_is_io_error(self):
        result = run_cli(
            "fit", "--data", "no_such.csv", "--model", "bernoulli", "--ranef", "normal"
        )
        assert result.returncode == 3

    def test_unknown_flag_rejected(self):
        result = run_cli("moments", "--family", "normal", "--frobnicate")
        assert result.returncode == 2


class TestPredictCommand:
    def test_mode_predictions_csv(self, demo_data, tmp_path):
        data_path, fit_path = demo_data
        pred_path = tmp_path / "pred.csv"
        hist_path = tmp_path / "hist.csv"
        result = run_cli(
            "predict", "--data", str(data_path), "--fit", str(fit_path),
            "--method", "mode", "--out", str(pred_path), "--hist", str(hist_path),
        )
        assert result.returncode == 0, result.stderr
        with open(pred_path) as handle:
            rows = list(csv.DictReader(handle))
        assert len(rows) == 60
        assert set(rows[0]) == {"cluster", "b_hat", "b_true"}
        hist_rows = list(csv.DictReader(open(hist_path)))
        assert len(hist_rows) == 20
        assert sum(int(r["count"]) for r in hist_rows) == 60


class TestSimulateCommand:
    def test_outputs_and_reproducibility(self, tmp_path):
        config = tmp_path / "tiny.cfg"
        config.write_text(TINY_SCENARIO)
        first = run_cli(
            "simulate", "--config", str(config), "--workers", "1",
            "--out", str(tmp_path / "a"), "--tidy",
        )
        assert first.returncode == 0, first.stderr
        out_a = Path(first.stdout.strip().splitlines()[-1])
        second = run_cli(
            "simulate", "--config", str(config), "--workers", "2",
            "--out", str(tmp_path / "b"),
        )
        out_b = Path(second.stdout.strip().splitlines()[-1])
        assert out_a.name == out_b.name  # content-hash naming
        for name in ("summary.csv", "replications.csv"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()
        assert (out_a / "summary_tidy.csv").exists()
        header = (out_a / "summary.csv").read_text().splitlines()[0]
        assert header.startswith("cluster_size,fitted_family,parameter")

    def test_empty_config(self, tmp_path):
        config = tmp_path / "empty.cfg"
        config.write_text("")
        result = run_cli("simulate", "--config", str(config))
        assert result.returncode == 2
        assert "missing key: m" in result.stderr

    def test_config_error_carries_line_number(self, tmp_path):
        config = tmp_path / "bad.cfg"
        config.write_text(TINY_SCENARIO + "m_extra = oops\n")
        result = run_cli("simulate", "--config", str(config))
        assert result.returncode == 2
        assert "line 11" in result.stderr


class TestAsymptoticsCommand:
    def test_theta_star_output(self, tmp_path):
        config = tmp_path / "limit.cfg"
        config.write_text(TINY_LIMIT)
        result = run_cli("asymptotics", "--config", str(config), "--out", str(tmp_path))
        assert result.returncode == 0, result.stderr
        out_dir = Path(result.stdout.strip().splitlines()[-1])
        rows = list(csv.DictReader(open(out_dir / "theta_star.csv")))
        assert [r["parameter"] for r in rows] == [
            "beta0", "beta_between", "beta_within", "log_sigma_b",
        ]
        # well specified: the limit reproduces the truth
        for row in rows:
            assert float(row["abs_bias"]) < 1e-3
