import json

import yaml
from click.testing import CliRunner

from charqa.cli import main

from conftest import pipeline_workspace


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


# ---------------------------------------------------------------------------
# ingest

def test_ingest_prints_stats(workspace):
    result = invoke("ingest", "--config", workspace())
    assert result.exit_code == 0, result.output
    payload = json.loads(result.output)
    assert payload["num_books"] == 2
    assert payload["num_samples"] == 3
    assert payload["avg_characters_per_book"] == 1.5


def test_ingest_rejects_broken_corpus(workspace):
    config_path = workspace()
    (config_path.parent / "books.jsonl").write_text('{"id": "b1"}\n')
    result = invoke("ingest", "--config", config_path)
    assert result.exit_code == 1
    assert "error:" in result.stderr


def test_bad_config_exits_one(workspace):
    result = invoke("ingest", "--config", workspace(strategy="bogus"))
    assert result.exit_code == 1
    assert "error:" in result.stderr


def test_missing_config_is_usage_error(tmp_path):
    result = invoke("ingest", "--config", tmp_path / "nope.yaml")
    assert result.exit_code == 2  # click rejects the path before we run


def test_os_failure_exits_three(workspace):
    config_path = workspace()
    (config_path.parent / "out").write_text("in the way")
    result = invoke("ingest", "--config", config_path)
    assert result.exit_code == 3
    assert "fatal:" in result.stderr


# ---------------------------------------------------------------------------
# run

def test_run_reports_counts(workspace):
    config_path = workspace()
    result = invoke("run", "--config", config_path)
    assert result.exit_code == 0, result.output
    assert "lead/no_trace: 3 completed, 0 skipped, 0 failed ->" in result.output

    again = invoke("run", "--config", config_path)
    assert again.exit_code == 0
    assert "0 completed, 3 skipped, 0 failed" in again.output


def test_run_force_flag(workspace):
    config_path = workspace()
    invoke("run", "--config", config_path)
    result = invoke("run", "--config", config_path, "--force")
    assert result.exit_code == 0
    assert "3 completed, 0 skipped" in result.output


def test_run_partial_failure_exits_two(workspace):
    config_path = workspace()
    gen_script = config_path.parent / "mocks" / "generator.yaml"
    rules = yaml.safe_load(gen_script.read_text())
    rules = [rule for rule in rules if "Cap" not in rule["pattern"]]
    gen_script.write_text(yaml.safe_dump(rules, sort_keys=False))

    result = invoke("run", "--config", config_path)
    assert result.exit_code == 2
    assert "2 completed, 0 skipped, 1 failed" in result.output
    assert "failed lead/seed-0/t2" in result.stderr


def test_run_seed_and_strategy_overrides(workspace):
    config_path = workspace()
    result = invoke("run", "--config", config_path,
                    "--seeds", "5", "--strategy", "no_context")
    assert result.exit_code == 0, result.output
    assert "no_context/no_trace:" in result.output
    out_dir = config_path.parent / "out" / "no_context" / "seed-5"
    assert (out_dir / "descriptions" / "t1.json").is_file()


def test_run_mode_override_writes_traces(workspace):
    config_path = workspace()
    result = invoke("run", "--config", config_path, "--mode", "guided_qa")
    assert result.exit_code == 0, result.output
    assert (config_path.parent / "out" / "lead" / "seed-0" / "traces" / "t1.json").is_file()


def test_run_rejects_malformed_seeds(workspace):
    result = invoke("run", "--config", workspace(), "--seeds", "0,x")
    assert result.exit_code == 1
    assert "--seeds" in result.stderr


# ---------------------------------------------------------------------------
# evaluate / report / significance

def test_evaluate_prints_means(workspace):
    config_path = workspace()
    invoke("run", "--config", config_path)
    result = invoke("evaluate", "--config", config_path)
    assert result.exit_code == 0, result.output
    line = result.output.splitlines()[0]
    assert line.startswith("lead: ")
    for fragment in ("prisma=100.00", "qa=100.00", "nli=100.00",
                     "entmention=100.00", "rouge_l=100.00"):
        assert fragment in line
    assert "2 evaluated, 1 skipped, 0 failed" in result.output


def test_evaluate_before_run_exits_one(workspace):
    result = invoke("evaluate", "--config", workspace())
    assert result.exit_code == 1
    assert "nothing to evaluate" in result.stderr


def test_report_renders_table(workspace):
    config_path = workspace()
    invoke("run", "--config", config_path)
    invoke("evaluate", "--config", config_path)
    result = invoke("report", "--config", config_path)
    assert result.exit_code == 0
    assert result.output.splitlines()[0].split()[:2] == ["strategy", "mode"]
    assert "lead" in result.output


def test_report_without_evaluation_exits_one(workspace):
    result = invoke("report", "--config", workspace())
    assert result.exit_code == 1
    assert "no evaluation reports" in result.stderr


def test_significance_requires_baseline(workspace):
    result = invoke("significance", "--config", workspace())
    assert result.exit_code == 2  # click usage error for the missing option
    assert "--baseline" in result.stderr


def test_significance_identical_runs(tmp_path):
    config_a = pipeline_workspace(tmp_path / "a")
    config_b = pipeline_workspace(tmp_path / "b")
    for path in (config_a, config_b):
        invoke("run", "--config", path)
        invoke("evaluate", "--config", path)
    result = invoke("significance", "--config", config_a,
                    "--baseline", config_b.parent / "out")
    assert result.exit_code == 0, result.output
    assert "prisma: p=1.0000 diff=0.0000" in result.output
    assert "†" not in result.output


def test_evaluate_with_baseline_records_significance(tmp_path):
    config_a = pipeline_workspace(tmp_path / "a")
    config_b = pipeline_workspace(tmp_path / "b")
    for path in (config_a, config_b):
        invoke("run", "--config", path)
    invoke("evaluate", "--config", config_b)
    result = invoke("evaluate", "--config", config_a,
                    "--baseline", config_b.parent / "out")
    assert result.exit_code == 0, result.output
    summary = json.loads(
        (config_a.parent / "out" / "reports" / "lead" / "summary.json").read_text()
    )
    assert summary["significance"]["prisma"]["p_value"] == 1.0


# ---------------------------------------------------------------------------
# reward-serve validation

def test_reward_serve_needs_judge(workspace):
    config_path = workspace(backends={
        "generator": {"kind": "mock", "model_name": "generator",
                      "script_path": "mocks/generator.yaml"},
    })
    result = invoke("reward-serve", "--config", config_path)
    assert result.exit_code == 1
    assert "backends.judge" in result.stderr


def test_reward_serve_needs_reference_store(workspace):
    result = invoke("reward-serve", "--config", workspace())
    assert result.exit_code == 1
    assert "reward.reference_store" in result.stderr
