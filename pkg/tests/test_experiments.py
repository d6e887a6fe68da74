"""
Tests for the Experiment Runners.

The cheap experiments run at toy scale on every invocation; the sweeps
that train aligners and generators are marked slow.
"""

import csv
import json

import pytest

from repgan.config.settings import load_run_config
from repgan.core import experiments
from repgan.core.experiments import ABLATION_ARMS, EXPERIMENTS, run_experiment
from repgan.models.reports import ExperimentReport
from repgan.utils.validation import ConfigError, NumericDivergenceError


class TestGradNorm:
    """Test cases for the gradient-norm probe."""

    def test_report_shape(self, tiny_config):
        report = run_experiment("grad-norm", tiny_config)
        assert report.name == "grad-norm"
        assert report.seeds == [0, 1]
        assert len(report.records) == 2 * 3
        for variant in ("vanilla", "layer_norm", "fully_normalized"):
            assert len(report.series[variant]) == tiny_config.probe_batches
            assert report.summary[f"median_mean_norm.{variant}"] > 0
        assert "fully_normalized>layer_norm>vanilla" in report.verdicts

    def test_reproducible(self, tiny_config):
        first = run_experiment("grad-norm", tiny_config)
        second = run_experiment("grad-norm", tiny_config)
        assert first.summary == second.summary

    @pytest.mark.slow
    def test_normalized_cells_have_larger_gradients(self):
        """At desk scale the last-layer gradients order fully normalized > layer norm > vanilla."""
        report = run_experiment("grad-norm", load_run_config("desk"))
        assert report.verdicts["fully_normalized>layer_norm>vanilla"] is True


class TestLcrSensitivity:
    """Test cases for the corruption sweep."""

    def test_uncorrupted_set_covers_itself(self, tiny_config):
        report = run_experiment("lcr-sensitivity", tiny_config)
        assert report.series["p"] == [0.0, 0.05, 0.1]
        for seed in tiny_config.sensitivity_seeds:
            assert report.series[f"lcr.seed{seed}"][0] == 1.0
            assert report.series[f"fed.seed{seed}"][0] == pytest.approx(0.0, abs=1e-6)
        assert len(report.records) == 2 * 3
        assert {"lcr_non_increasing", "lcr_drop_at_least_30pct"} <= set(report.verdicts)

    def test_coverage_falls_with_corruption(self, tiny_config):
        config = tiny_config.model_copy(update={
            "corruption_rates": [0.0, 0.25, 0.5, 0.75],
            "sensitivity_size": 100,
            "sensitivity_seeds": [0, 1, 2],
            "hash_dim": 256,
        })
        report = run_experiment("lcr-sensitivity", config)
        assert report.series["lcr_median"][0] == 1.0
        assert report.verdicts["lcr_non_increasing"] is True
        assert report.verdicts["lcr_drop_at_least_30pct"] is True
        assert report.summary["lcr_relative_drop"] >= 0.3


class TestOutputGate:
    """Test cases for the output-gate comparison."""

    def test_normalized_output_survives_closed_gate(self, tiny_config):
        report = run_experiment("output-gate", tiny_config)
        assert report.verdicts["fully_normalized>vanilla"]
        assert report.summary["ratio"] > 1.0

    def test_layer_norm_factor_tracks_inverse_sigma(self, tiny_config):
        report = run_experiment("output-gate", tiny_config)
        assert report.verdicts["ln_factor_tracks_inverse_sigma"]
        for factor, inverse in zip(report.series["ln_factor"], report.series["inverse_sigma"]):
            assert factor == pytest.approx(inverse, rel=0.05)


@pytest.mark.slow
class TestTrainingSweeps:
    """Test cases for sweeps that train models."""

    def test_dropout_sweep(self, tiny_config):
        report = run_experiment("dropout-sweep", tiny_config)
        assert report.series["rho"] == [0.0, 0.5]
        assert len(report.series["fed"]) == 2
        assert report.summary["best_rho"] in (0.0, 0.5)
        assert all("invalid_sampling" in row for row in report.records)
        # a two-point sweep has no interior rate
        assert report.verdicts["best_fed_at_interior_rho"] is False

    def test_ablation_arms(self, tiny_config):
        report = run_experiment("ablation", tiny_config)
        assert {row["arm"] for row in report.records} == set(ABLATION_ARMS)
        assert {"full_ge_single_ablations", "single_ge_double_ablation"} <= set(report.verdicts)

    def test_balance_error(self, tiny_config):
        report = run_experiment("balance-error", tiny_config)
        assert report.summary["expected_count"] == tiny_config.n_interp / 2
        for row in report.records:
            assert 0 <= row["balance_error"] <= tiny_config.n_interp
            assert 0 <= row["decode_consistency"] <= 1
        assert "penalty_lowers_balance_error" in report.verdicts

    def test_aligner_objective(self, tiny_config):
        report = run_experiment("aligner-objective", tiny_config)
        assert {row["objective"] for row in report.records} == {"variance_penalized", "cross_entropy"}
        assert "variance_penalized_lower_fed" in report.verdicts


class TestFailedCells:
    """Test cases for sweeps that carry on past numeric failures."""

    @pytest.mark.slow
    def test_divergent_cell_is_recorded(self, tiny_config, monkeypatch):
        original = experiments._adversarial_cell

        def flaky(config, *args, **kwargs):
            if config.sampling_dropout == 0.5:
                raise NumericDivergenceError("generator diverged", site="gan.generator")
            return original(config, *args, **kwargs)

        monkeypatch.setattr(experiments, "_adversarial_cell", flaky)
        report = run_experiment("dropout-sweep", tiny_config)
        assert report.series["rho"] == [0.0]
        assert len(report.cell_errors) == 1
        error = report.cell_errors[0]
        assert error.cell == "rho=0.5"
        assert error.error_type == "NumericDivergenceError"
        assert error.site == "gan.generator"
        assert "cell_errors=1" in report.summary_text()

    def test_unknown_experiment(self, tiny_config):
        with pytest.raises(ConfigError):
            run_experiment("table-9", tiny_config)

    def test_registry_names(self):
        assert set(EXPERIMENTS) == {
            "grad-norm", "dropout-sweep", "lcr-sensitivity", "ablation",
            "balance-error", "aligner-objective", "corollary", "output-gate",
        }
        assert EXPERIMENTS["corollary"] is EXPERIMENTS["output-gate"]


class TestReportFiles:
    """Test cases for report rendering."""

    @pytest.fixture
    def report(self) -> ExperimentReport:
        report = ExperimentReport(name="demo", config={"seed": 0}, seeds=[0, 1])
        report.add_record(seed=0, fed=1.5)
        report.add_record(seed=1, fed=2.5, note="late")
        report.series = {"a": [1.0, 2.0, 3.0], "b": [4.0]}
        report.summary = {"median_fed": 2.0}
        report.verdicts = {"ok": True}
        return report

    def test_write_with_csv(self, tmp_path, report):
        paths = report.write(tmp_path, write_csv=True)
        assert [p.name for p in paths] == ["report.json", "records.jsonl", "summary.txt", "records.csv", "series.csv"]
        assert ExperimentReport.model_validate_json(paths[0].read_text()) == report
        rows = [json.loads(line) for line in paths[1].read_text().splitlines()]
        assert rows[1]["note"] == "late"
        with open(paths[3], newline="") as f:
            records = list(csv.DictReader(f))
        assert records[0]["note"] == ""
        with open(paths[4], newline="") as f:
            series = list(csv.reader(f))
        assert series[0] == ["index", "a", "b"]
        assert series[3] == ["2", "3.0", ""]

    def test_summary_text(self, report):
        lines = report.summary_text().splitlines()
        assert lines == sorted(lines)
        assert "experiment=demo" in lines
        assert "seeds=0,1" in lines
        assert "summary.median_fed=2.0" in lines
        assert "verdict.ok=true" in lines
        assert "cell_errors=0" in lines

    def test_without_csv(self, tmp_path, report):
        assert len(report.write(tmp_path)) == 3
        assert not (tmp_path / "records.csv").exists()
