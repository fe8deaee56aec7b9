"""
Command line tests
Drive the click commands end to end on small configs written to a temp dir.
"""
import textwrap

import pytest
from click.testing import CliRunner

from cli.app import EXIT_CHECK_FAILED, EXIT_ERROR, EXIT_PASS, cli
from cli.experiments import EXPERIMENTS
from core.utilities import SummaryUtilities

LINEAR_CONFIG = """\
experiment: converge
seeds: [0]
model:
  kind: linear_test
  a: 0.5
inputs:
  sampler:
    dist: std_normal
weights:
  gamma: 1.5
run:
  n_paths: 512
  tol: 0.001
  dump_paths: 16
checks:
  fit_q_max: {q_max}
"""


@pytest.fixture
def runner():
    return CliRunner()


def write_config(tmp_path, text, name="config.yaml"):
    path = tmp_path / name
    path.write_text(textwrap.dedent(text))
    return path


def read_summary(out_dir):
    return SummaryUtilities.parse((out_dir / "summary.txt").read_text())


class TestListExperiments:
    def test_lists_every_experiment_in_order(self, runner):
        result = runner.invoke(cli, ["list-experiments"])
        assert result.exit_code == 0
        names = [line.split()[0] for line in result.output.splitlines()]
        assert names == sorted(EXPERIMENTS)
        assert len(names) == 6
        assert "esn_gap" in names

    def test_shows_required_sections(self, runner):
        result = runner.invoke(cli, ["list-experiments"])
        line = next(line for line in result.output.splitlines() if line.startswith("counterexample_d"))
        assert "experiment, counterexample" in line


class TestRun:
    def test_counterexample_run_writes_artifacts(self, runner, tmp_path):
        config = write_config(tmp_path, """\
            experiment: counterexample_d
            counterexample:
              alpha: 0.4
              gamma: 2.6
              p: 2
              horizon: 24
            """)
        out = tmp_path / "out"
        result = runner.invoke(cli, ["run", "--config", str(config), "--out", str(out)])
        assert result.exit_code == EXIT_PASS, result.output
        assert "counterexample_d: pass" in result.output
        header = (out / "trace.csv").read_text().splitlines()[0]
        assert header == "T,term,partial_sum"
        summary = read_summary(out)
        assert summary["pass"] == "true"
        assert summary["experiment"] == "counterexample_d"
        assert len(summary["config_hash"]) == 64

    def test_linear_converge_run(self, runner, tmp_path):
        config = write_config(tmp_path, LINEAR_CONFIG.format(q_max=0.8))
        out = tmp_path / "out"
        result = runner.invoke(cli, ["run", "--config", str(config), "--out", str(out), "--threads", "2"])
        assert result.exit_code == EXIT_PASS, result.output
        summary = read_summary(out)
        assert summary["converged"] == "true"
        assert float(summary["fitted_q"]) <= 0.8
        assert summary["threads"] == "2"
        assert summary["model.kind"] == "linear_test"
        assert summary["model.a"] == "0.5"
        assert summary["ot_rejected"] == "0"
        trace = (out / "trace.csv").read_text().splitlines()
        assert len(trace) > 2
        fixed_point = (out / "fixedpoint.csv").read_text().splitlines()
        assert fixed_point[0] == "path,t,component,value"
        assert {line.split(",")[0] for line in fixed_point[1:]} == {str(i) for i in range(16)}

    def test_csv_output_is_identical_across_thread_counts(self, runner, tmp_path, monkeypatch):
        from core.settings import settings
        monkeypatch.setitem(settings.config['parallel'], 'path_chunk', 64)
        monkeypatch.setitem(settings.config['parallel'], 'cost_block', 16)
        config = write_config(tmp_path, LINEAR_CONFIG.format(q_max=0.8))
        outputs = {}
        for threads in ("1", "4"):
            out = tmp_path / f"out{threads}"
            result = runner.invoke(cli, ["run", "--config", str(config), "--out", str(out), "--threads", threads])
            assert result.exit_code == EXIT_PASS, result.output
            outputs[threads] = out
        for name in ("trace.csv", "fixedpoint.csv"):
            assert (outputs["1"] / name).read_bytes() == (outputs["4"] / name).read_bytes()
        single, pooled = read_summary(outputs["1"]), read_summary(outputs["4"])
        assert single.pop("threads") == "1"
        assert pooled.pop("threads") == "4"
        assert single == pooled

    def test_failed_check_exits_with_two(self, runner, tmp_path):
        config = write_config(tmp_path, LINEAR_CONFIG.format(q_max=0.1))
        out = tmp_path / "out"
        result = runner.invoke(cli, ["run", "--config", str(config), "--out", str(out)])
        assert result.exit_code == EXIT_CHECK_FAILED
        assert "FAIL" in result.output
        assert read_summary(out)["check.fit_q.pass"] == "false"

    def test_seed_override(self, runner, tmp_path):
        config = write_config(tmp_path, LINEAR_CONFIG.format(q_max=0.8))
        out = tmp_path / "out"
        result = runner.invoke(cli, ["run", "--config", str(config), "--out", str(out), "--seed", "11"])
        assert result.exit_code == EXIT_PASS, result.output
        assert read_summary(out)["seeds"] == "[11]"

    def test_unknown_key_reports_its_line(self, runner, tmp_path):
        config = write_config(tmp_path, LINEAR_CONFIG.format(q_max=0.8).replace("  n_paths: 512", "  n_path: 512"))
        result = runner.invoke(cli, ["run", "--config", str(config), "--out", str(tmp_path / "out")])
        assert result.exit_code == EXIT_ERROR
        assert "line 12" in result.output
        assert "run.n_path" in result.output

    def test_yaml_syntax_error_reports_its_line(self, runner, tmp_path):
        config = write_config(tmp_path, """\
            experiment: converge
            model: [linear_test
            weights:
              gamma: 1.5
            """)
        result = runner.invoke(cli, ["run", "--config", str(config)])
        assert result.exit_code == EXIT_ERROR
        assert "YAML syntax error" in result.output
        assert "line " in result.output

    def test_missing_section(self, runner, tmp_path):
        config = write_config(tmp_path, """\
            experiment: converge
            model:
              kind: linear_test
              a: 0.5
            """)
        result = runner.invoke(cli, ["run", "--config", str(config)])
        assert result.exit_code == EXIT_ERROR
        assert "requires a 'inputs' section" in result.output
        assert "requires a 'weights' section" in result.output

    def test_rank_deficient_esn_is_a_config_error(self, runner, tmp_path):
        config = write_config(tmp_path, """\
            experiment: converge
            model:
              kind: esn
              A: [[0.2, 0.0], [0.0, 0.2]]
              C: [[1.0, 1.0], [1.0, 1.0]]
            inputs:
              sampler:
                dist: std_normal
                dim: 2
            weights:
              gamma: 1.5
            run:
              n_paths: 64
            """)
        result = runner.invoke(cli, ["run", "--config", str(config), "--out", str(tmp_path / "out")])
        assert result.exit_code == EXIT_ERROR
        assert "config describes an invalid system" in result.output
        assert "full rank" in result.output
        assert "error: " not in result.output

    def test_missing_file(self, runner, tmp_path):
        result = runner.invoke(cli, ["run", "--config", str(tmp_path / "absent.yaml")])
        assert result.exit_code == EXIT_ERROR
        assert "cannot read config file" in result.output

    def test_invalid_option_value(self, runner, tmp_path):
        config = write_config(tmp_path, LINEAR_CONFIG.format(q_max=0.8))
        result = runner.invoke(cli, ["run", "--config", str(config), "--ot", "simplex"])
        assert result.exit_code != EXIT_PASS


class TestCertify:
    def test_prints_a_certificate_table(self, runner, tmp_path):
        config = write_config(tmp_path, LINEAR_CONFIG.format(q_max=0.8) + textwrap.dedent("""\
            certify:
              lipschitz: true
              n_state_pairs: 8
              n_samples: 2000
            """))
        out = tmp_path / "out"
        result = runner.invoke(cli, ["certify", "--config", str(config), "--out", str(out)])
        assert result.exit_code == EXIT_PASS, result.output
        assert "certificate" in result.output
        assert "contractivity" in result.output
        assert "theorem" in result.output
        summary = read_summary(out)
        assert summary["experiment"] == "certify"
        assert summary["certificate.theorem.pass"] == "true"

    def test_filter_with_memory_is_not_certified(self, runner, tmp_path):
        config = write_config(tmp_path, """\
            experiment: certify
            model:
              kind: linear_test
              a: 0.5
            inputs:
              filter:
                kind: time_scale
                start: 0.5
                end: 1.0
            weights:
              gamma: 1.5
            certify:
              n_state_pairs: 8
              n_samples: 1000
            run:
              n_paths: 256
            """)
        out = tmp_path / "out"
        result = runner.invoke(cli, ["certify", "--config", str(config), "--out", str(out)])
        assert result.exit_code == EXIT_CHECK_FAILED
        summary = read_summary(out)
        assert summary["certificate.contractivity.status"] == "not certified"
        assert summary["certificate.theorem.status"] == "not certified"
