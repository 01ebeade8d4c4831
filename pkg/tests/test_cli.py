import json
import subprocess
import sys

import pytest
from click.testing import CliRunner

from promptopt.cli import main
from promptopt.core import load_trace
from promptopt.synth import (
    CMA_SHAPED_SPEC,
    SynthTaskSpec,
    enumerate_predictions,
    generate_task,
    rubric_prompt,
    seed_prompt_for,
    synth_spec_to_dict,
)
from promptopt.metrics import cohen_kappa

from test_synth import FROZEN_TRAJECTORY

SMALL_SPEC = SynthTaskSpec(
    n_classes=3, n_rows=30, class_balance=(16, 7, 7),
    confusable_pairs=((1, 0),), rng_seed=5,
)

FINISH_REPLY = json.dumps(
    {"thinking": "nothing to improve", "tool": "finish", "args": {"reason": "stub brain"}}
)


def _invoke(args):
    return CliRunner().invoke(main, args)


def _err(result) -> str:
    try:
        return result.output + result.stderr
    except ValueError:
        return result.output


def _write_spec(tmp_path, spec):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(synth_spec_to_dict(spec)))
    return str(path)


def _bundle(tmp_path, spec):
    out = tmp_path / "bundle"
    result = _invoke(["synth", "--spec-file", _write_spec(tmp_path, spec),
                      "--out-dir", str(out)])
    assert result.exit_code == 0, _err(result)
    return out


def _optimize_args(bundle, out_dir, **extra):
    args = [
        "optimize",
        "--config", str(bundle / "config.json"),
        "--data", str(bundle / "dataset.csv"),
        "--registry", str(bundle / "registry.json"),
        "--seed-prompt", str(bundle / "seed_prompt.txt"),
        "--brain", f"scripted:{bundle / 'brain_program.json'}",
        "--out-dir", str(out_dir),
        "--clock", "logical",
    ]
    for flag, value in extra.items():
        args += [f"--{flag.replace('_', '-')}", str(value)]
    return args


BUNDLE_FILES = ("dataset.csv", "config.json", "stub_model.json", "registry.json",
                "seed_prompt.txt", "brain_program.json")


class TestSynthCommand:
    def test_writes_bundle(self, tmp_path):
        bundle = _bundle(tmp_path, CMA_SHAPED_SPEC)
        for name in BUNDLE_FILES:
            assert (bundle / name).exists(), name
        lines = (bundle / "dataset.csv").read_text().splitlines()
        assert len(lines) == 126  # header + 125 rows
        assert lines[0] == "rid,transcript,label"
        labels = {line.rsplit(",", 1)[-1] for line in lines[1:]}
        assert len(labels) == 5

    def test_identical_bytes_on_rerun(self, tmp_path):
        spec_path = _write_spec(tmp_path, CMA_SHAPED_SPEC)
        for name in ("a", "b"):
            result = _invoke(["synth", "--spec-file", spec_path,
                              "--out-dir", str(tmp_path / name)])
            assert result.exit_code == 0
        for name in BUNDLE_FILES:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_infeasible_spec_exits_2(self, tmp_path):
        raw = synth_spec_to_dict(SMALL_SPEC)
        raw["class_balance"] = [16, 7, 8]
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(raw))
        result = _invoke(["synth", "--spec-file", str(path), "--out-dir", str(tmp_path / "o")])
        assert result.exit_code == 2
        assert "sums to" in _err(result)

    def test_missing_spec_file_exits_2(self, tmp_path):
        result = _invoke(["synth", "--spec-file", str(tmp_path / "nope.json"),
                          "--out-dir", str(tmp_path / "o")])
        assert result.exit_code == 2


class TestOptimizeCommand:
    def test_scripted_smoke(self, tmp_path):
        bundle = _bundle(tmp_path, SMALL_SPEC)
        result = _invoke(_optimize_args(bundle, tmp_path / "out"))
        assert result.exit_code == 0, _err(result)
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        run0 = summary["runs"][0]
        assert run0["best_primary"] >= run0["seed_primary"]
        assert "best of 1" in result.output

    def test_packaged_bundle_reaches_full_kappa(self, tmp_path):
        bundle = _bundle(tmp_path, CMA_SHAPED_SPEC)
        result = _invoke(_optimize_args(bundle, tmp_path / "out"))
        assert result.exit_code == 0, _err(result)
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert summary["best_primary"] == 1.0
        run_result = json.loads((tmp_path / "out" / "run_00" / "result.json").read_text())
        assert [p for _, p in run_result["eval_trajectory"]] == FROZEN_TRAJECTORY

    def test_three_run_rerun_byte_identical(self, tmp_path):
        bundle = _bundle(tmp_path, SMALL_SPEC)
        for name in ("x", "y"):
            result = _invoke(_optimize_args(bundle, tmp_path / name,
                                            n_runs=3, seeds="1,2,3"))
            assert result.exit_code == 0, _err(result)
        assert (tmp_path / "x" / "summary.json").read_bytes() == \
            (tmp_path / "y" / "summary.json").read_bytes()
        for i in range(3):
            for artifact in ("trace.jsonl", "result.json", "trajectory.csv"):
                assert (tmp_path / "x" / f"run_{i:02d}" / artifact).read_bytes() == \
                    (tmp_path / "y" / f"run_{i:02d}" / artifact).read_bytes()

    def test_llm_brain_with_stub_agent(self, tmp_path):
        bundle = _bundle(tmp_path, SMALL_SPEC)
        registry = {
            "task_model": {"kind": "stub", "spec_file": "stub_model.json"},
            "agent_model": {"kind": "stub", "spec": {"default_output": FINISH_REPLY}},
        }
        (bundle / "registry.json").write_text(json.dumps(registry))
        args = _optimize_args(bundle, tmp_path / "out")
        args[args.index("--brain") + 1] = "llm"
        result = _invoke(args)
        assert result.exit_code == 0, _err(result)
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert summary["runs"][0]["stop_reason"] == "finish_called"
        events = load_trace(str(tmp_path / "out" / "run_00" / "trace.jsonl"))
        brain_calls = [e for e in events if e.kind == "llm_call"
                       and e.payload.get("role") == "brain"]
        assert brain_calls

    def test_llm_brain_missing_credentials_exits_2(self, tmp_path, monkeypatch):
        monkeypatch.delenv("PROMPTOPT_TEST_KEY", raising=False)
        bundle = _bundle(tmp_path, SMALL_SPEC)
        registry = {
            "task_model": {"kind": "stub", "spec_file": "stub_model.json"},
            "agent_model": {
                "kind": "openai_chat",
                "endpoint": "https://example.invalid/v1/chat/completions",
                "model": "some-model",
                "api_key_env": "PROMPTOPT_TEST_KEY",
            },
        }
        (bundle / "registry.json").write_text(json.dumps(registry))
        args = _optimize_args(bundle, tmp_path / "out")
        args[args.index("--brain") + 1] = "llm"
        result = _invoke(args)
        assert result.exit_code == 2
        assert "credential environment variable 'PROMPTOPT_TEST_KEY'" in _err(result)

    def test_missing_dataset_exits_2(self, tmp_path):
        bundle = _bundle(tmp_path, SMALL_SPEC)
        args = _optimize_args(bundle, tmp_path / "out")
        args[args.index("--data") + 1] = str(tmp_path / "missing.csv")
        result = _invoke(args)
        assert result.exit_code == 2
        assert "dataset file not found" in _err(result)

    def test_unknown_brain_exits_2(self, tmp_path):
        bundle = _bundle(tmp_path, SMALL_SPEC)
        args = _optimize_args(bundle, tmp_path / "out")
        args[args.index("--brain") + 1] = "psychic"
        result = _invoke(args)
        assert result.exit_code == 2

    def test_missing_brain_program_exits_2(self, tmp_path):
        bundle = _bundle(tmp_path, SMALL_SPEC)
        args = _optimize_args(bundle, tmp_path / "out")
        args[args.index("--brain") + 1] = f"scripted:{tmp_path / 'nope.json'}"
        result = _invoke(args)
        assert result.exit_code == 2
        assert "not found" in _err(result)

    def test_bad_seeds_exit_2(self, tmp_path):
        bundle = _bundle(tmp_path, SMALL_SPEC)
        result = _invoke(_optimize_args(bundle, tmp_path / "out", seeds="a,b"))
        assert result.exit_code == 2
        result = _invoke(_optimize_args(bundle, tmp_path / "out", seeds="1,2"))
        assert result.exit_code == 2  # count mismatch with --n-runs 1

    def test_missing_registry_alias_exits_2(self, tmp_path):
        bundle = _bundle(tmp_path, SMALL_SPEC)
        (bundle / "registry.json").write_text(json.dumps(
            {"task_model": {"kind": "stub", "spec_file": "stub_model.json"}}
        ))
        result = _invoke(_optimize_args(bundle, tmp_path / "out"))
        assert result.exit_code == 2
        assert "agent_model" in _err(result)

    def test_all_runs_aborted_exits_3(self, tmp_path):
        bundle = _bundle(tmp_path, SMALL_SPEC)
        out = tmp_path / "out"
        out.mkdir()
        (out / "run_00").write_text("in the way")  # a file where the run dir must go
        result = _invoke(_optimize_args(bundle, out))
        assert result.exit_code == 3
        assert "all runs aborted" in _err(result)
        assert "aborted" in result.output


class TestEvaluateCommand:
    def _args(self, bundle, prompt_path, *extra):
        return [
            "evaluate",
            "--config", str(bundle / "config.json"),
            "--data", str(bundle / "dataset.csv"),
            "--registry", str(bundle / "registry.json"),
            "--prompt-file", str(prompt_path),
            "--clock", "logical",
            *extra,
        ]

    def test_seed_prompt_matches_enumeration(self, tmp_path):
        bundle = _bundle(tmp_path, CMA_SHAPED_SPEC)
        result = _invoke(self._args(bundle, bundle / "seed_prompt.txt"))
        assert result.exit_code == 0, _err(result)
        assert f"kappa on valid: {FROZEN_TRAJECTORY[0]:.4f}" in result.output
        assert "(50 rows, 0 failed)" in result.output
        assert "confusion matrix" in result.output

    def test_oracle_prompt_full_marks_with_ci(self, tmp_path):
        bundle = _bundle(tmp_path, CMA_SHAPED_SPEC)
        oracle = tmp_path / "oracle.txt"
        oracle.write_text(rubric_prompt(CMA_SHAPED_SPEC, CMA_SHAPED_SPEC.confusable_pairs))
        result = _invoke(self._args(bundle, oracle, "--ci"))
        assert result.exit_code == 0, _err(result)
        assert "kappa on valid: 1.0000" in result.output
        assert "[1.0000, 1.0000]" in result.output
        assert "1000 resamples" in result.output

    def test_split_selection(self, tmp_path):
        bundle = _bundle(tmp_path, CMA_SHAPED_SPEC)
        train, valid, config, _ = generate_task(CMA_SHAPED_SPEC)
        seed = seed_prompt_for(CMA_SHAPED_SPEC)
        for split_name, split in (("train", train), ("valid", valid)):
            expected, parsed = enumerate_predictions(CMA_SHAPED_SPEC, seed, split.rows, config)
            want = cohen_kappa(expected, parsed).value
            result = _invoke(self._args(bundle, bundle / "seed_prompt.txt",
                                        "--split", split_name))
            assert result.exit_code == 0
            assert f"kappa on {split_name}: {want:.4f}" in result.output

    def test_missing_prompt_file_exits_2(self, tmp_path):
        bundle = _bundle(tmp_path, SMALL_SPEC)
        result = _invoke(self._args(bundle, tmp_path / "absent.txt"))
        assert result.exit_code == 2
        assert "prompt file not found" in _err(result)


class TestReportCommand:
    def _batch(self, tmp_path, spec=SMALL_SPEC, n=3):
        bundle = _bundle(tmp_path, spec)
        out = tmp_path / "runs"
        seeds = ",".join(str(i + 1) for i in range(n))
        result = _invoke(_optimize_args(bundle, out, n_runs=n, seeds=seeds))
        assert result.exit_code == 0, _err(result)
        return out

    def test_single_run_dir_one_row(self, tmp_path):
        out = self._batch(tmp_path, n=1)
        result = _invoke(["report", "--run-dir", str(out / "run_00")])
        assert result.exit_code == 0, _err(result)
        rows = [l for l in result.output.splitlines() if l.startswith("run_00")]
        assert len(rows) == 1
        assert "finish_called" in rows[0]

    def test_batch_table_and_matched_configs(self, tmp_path):
        out = self._batch(tmp_path, n=3)
        result = _invoke(["report", "--run-dir", str(out)])
        assert result.exit_code == 0, _err(result)
        assert "runs: 3 tot. / 3 matched config" in result.output
        for i in range(3):
            assert f"run_{i:02d}" in result.output

    def test_totals_reconcile_with_traces(self, tmp_path):
        out = self._batch(tmp_path, n=2)
        result = _invoke(["report", "--run-dir", str(out)])
        assert result.exit_code == 0
        totals_line = next(l for l in result.output.splitlines() if l.startswith("totals:"))
        printed = dict(part.split("=") for part in totals_line.split()[1:])
        counted = {"budget_charges": 0, "full_evals": 0, "llm_calls": 0,
                   "prompt_tokens": 0, "output_tokens": 0}
        for i in range(2):
            for event in load_trace(str(out / f"run_{i:02d}" / "trace.jsonl")):
                if event.kind == "budget_charge":
                    counted["budget_charges"] += 1
                elif event.kind == "eval_result" and event.payload.get("full"):
                    counted["full_evals"] += 1
                elif event.kind == "llm_call":
                    counted["llm_calls"] += 1
                    counted["prompt_tokens"] += event.payload.get("prompt_tokens") or 0
                    counted["output_tokens"] += event.payload.get("output_tokens") or 0
        assert {k: int(v) for k, v in printed.items()} == counted
        assert counted["budget_charges"] > 0

    def test_trajectory_mode(self, tmp_path):
        out = self._batch(tmp_path, spec=CMA_SHAPED_SPEC, n=1)
        result = _invoke(["report", "--run-dir", str(out), "--format", "trajectory"])
        assert result.exit_code == 0, _err(result)
        lines = [l.split() for l in result.output.splitlines()
                 if l.strip() and l.lstrip()[0].isdigit()]
        assert len(lines) == len(FROZEN_TRAJECTORY)
        best = [float(cols[2]) for cols in lines]
        assert best == sorted(best)
        primaries = [float(cols[1]) for cols in lines]
        assert primaries == [pytest.approx(k, abs=5e-5) for k in FROZEN_TRAJECTORY]

    def test_two_eval_run_two_points(self, tmp_path):
        out = self._batch(tmp_path, spec=SMALL_SPEC, n=1)
        result = _invoke(["report", "--run-dir", str(out), "--format", "trajectory"])
        points = [l for l in result.output.splitlines()
                  if l.strip() and l.lstrip()[0].isdigit()]
        assert len(points) == 2  # seed eval plus the single-pair unlock

    def test_corrupt_trace_exits_3_naming_file(self, tmp_path):
        out = self._batch(tmp_path, n=1)
        trace_path = out / "run_00" / "trace.jsonl"
        with open(trace_path, "a", encoding="utf-8") as fh:
            fh.write("{not json\n")
        result = _invoke(["report", "--run-dir", str(out)])
        assert result.exit_code == 3
        assert str(trace_path) in _err(result)

    def test_missing_dir_exits_2(self, tmp_path):
        result = _invoke(["report", "--run-dir", str(tmp_path / "ghost")])
        assert result.exit_code == 2

    def test_empty_dir_exits_2(self, tmp_path):
        (tmp_path / "empty").mkdir()
        result = _invoke(["report", "--run-dir", str(tmp_path / "empty")])
        assert result.exit_code == 2
        assert "no run artifacts" in _err(result)


class TestEntryPoint:
    def test_module_help(self):
        proc = subprocess.run(
            [sys.executable, "-m", "promptopt.cli", "--help"],
            capture_output=True, text=True, timeout=60,
        )
        assert proc.returncode == 0
        for command in ("optimize", "evaluate", "report", "synth"):
            assert command in proc.stdout
