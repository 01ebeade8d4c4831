"""Command-line driver: run optimizations, evaluate prompts, render reports
from archived run directories, and generate synthetic task bundles.

Exit codes: 0 success, 2 configuration error (bad flags, files, credentials),
3 run aborted (every run failed, or a run artifact is corrupt).
"""
from __future__ import annotations

import functools
import json
import os
import sys
from collections import Counter

import click

from .brain import LLMBrain, ScriptedBrain
from .core import (
    ConfigurationError,
    EvaluationError,
    GenerationError,
    LogicalClock,
    MetricError,
    SplitError,
    SystemClock,
    TraceError,
    check_dataset_columns,
    load_dataset,
    load_task_config,
    load_trace,
    save_task_config,
    split_dataset,
    write_dataset,
)
from .engine import best_of_n
from .evaluator import evaluate_prompt, recover_failed_rows
from .gateway import load_registry, stub_spec_to_dict
from .synth import generate_task, load_synth_spec, packaged_brain_program, seed_prompt_for

EXIT_CONFIG_ERROR = 2
EXIT_RUN_ABORTED = 3

CI_RESAMPLES = 1000
CI_CONFIDENCE = 0.95


def _with_exit_codes(fn):
    """Map the package's error types onto the CLI exit-code contract."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigurationError, SplitError, GenerationError, MetricError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_CONFIG_ERROR)
        except (EvaluationError, TraceError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_RUN_ABORTED)

    return wrapper


def _make_clock(name: str):
    return LogicalClock() if name == "logical" else SystemClock()


def _read_text(path: str, what: str) -> str:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return fh.read()
    except FileNotFoundError as exc:
        raise ConfigurationError(f"{what} file not found: {path}") from exc


def _load_world(config_path: str, data_path: str):
    config = load_task_config(config_path)
    rows = load_dataset(data_path)
    check_dataset_columns(config, rows)
    train, valid = split_dataset(rows, config.split_spec)
    return config, train, valid


def _check_aliases(gateway, config) -> None:
    for alias in (config.task_model_alias, config.agent_model_alias):
        if alias not in gateway.registry:
            raise ConfigurationError(f"registry does not define model alias {alias!r}")


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


@click.group()
def main():
    """Metric-guarded, budget-bounded prompt optimization for tabular judge tasks."""


# ── optimize ─────────────────────────────────────────────────────────────────


@main.command()
@click.option("--config", "config_path", required=True, help="task config JSON")
@click.option("--data", "data_path", required=True, help="dataset CSV (header row required)")
@click.option("--registry", "registry_path", required=True, help="model registry JSON")
@click.option("--seed-prompt", "seed_prompt_path", required=True, help="seed prompt text file")
@click.option("--brain", "brain_spec", default="llm", show_default=True,
              help="'llm' or 'scripted:<program.json>'")
@click.option("--n-runs", default=1, show_default=True, type=int)
@click.option("--seeds", "seeds_text", default=None,
              help="comma-separated run seeds; defaults to 0..n-1")
@click.option("--out-dir", required=True)
@click.option("--clock", "clock_name", type=click.Choice(["system", "logical"]),
              default="system", show_default=True,
              help="'logical' freezes wall time for byte-reproducible stub runs")
@_with_exit_codes
def optimize(config_path, data_path, registry_path, seed_prompt_path, brain_spec,
             n_runs, seeds_text, out_dir, clock_name):
    """Best-of-N optimization; archives per-run traces, results, and a summary."""
    config, train, valid = _load_world(config_path, data_path)
    seed_prompt = _read_text(seed_prompt_path, "seed prompt")
    if seeds_text:
        try:
            seeds = [int(s) for s in seeds_text.split(",")]
        except ValueError as exc:
            raise ConfigurationError(f"--seeds must be comma-separated integers: {exc}") from exc
    else:
        seeds = list(range(n_runs))
    run_clock = _make_clock(clock_name)

    # eager probe so credential and registry mistakes exit 2 instead of
    # surfacing as aborted runs
    _check_aliases(load_registry(registry_path, clock=run_clock), config)

    gateways: dict = {}

    def gateway_for(seed):
        if seed not in gateways:
            gateways[seed] = load_registry(registry_path, clock=run_clock)
        return gateways[seed]

    if brain_spec == "llm":
        def brain_factory(seed):
            return LLMBrain(gateway_for(seed), config)
    elif brain_spec.startswith("scripted:"):
        program_path = brain_spec[len("scripted:"):]
        try:
            ScriptedBrain.from_file(program_path)
        except FileNotFoundError as exc:
            raise ConfigurationError(f"scripted brain file not found: {program_path}") from exc

        def brain_factory(seed):
            return ScriptedBrain.from_file(program_path)
    else:
        raise ConfigurationError(
            f"--brain must be 'llm' or 'scripted:<file>', got {brain_spec!r}"
        )

    summary = best_of_n(config, seed_prompt, brain_factory, n_runs, seeds,
                        train, valid, gateway_for, out_dir, clock=run_clock)

    for entry in summary["runs"]:
        if "error" in entry:
            click.echo(f"{entry['run']} (seed {entry['seed']}): aborted: {entry['error']}")
        else:
            click.echo(
                f"{entry['run']} (seed {entry['seed']}): best {config.metric_name} "
                f"{entry['best_primary']:.4f} (seed prompt {entry['seed_primary']:.4f}, "
                f"{entry['stop_reason']}, budget {entry['budget_used']})"
            )
    if summary["best_run_index"] is None:
        click.echo("error: all runs aborted", err=True)
        sys.exit(EXIT_RUN_ABORTED)
    best_name = summary["runs"][summary["best_run_index"]]["run"]
    click.echo(
        f"best of {n_runs}: {best_name} with {config.metric_name} "
        f"{summary['best_primary']:.4f} (mean {summary['mean_best']:.4f}, "
        f"stddev {summary['stddev_best']:.4f})"
    )
    click.echo(f"summary written to {os.path.join(out_dir, 'summary.json')}")


# ── evaluate ─────────────────────────────────────────────────────────────────


@main.command()
@click.option("--config", "config_path", required=True)
@click.option("--data", "data_path", required=True)
@click.option("--registry", "registry_path", required=True)
@click.option("--prompt-file", "prompt_path", required=True)
@click.option("--split", "split_name", type=click.Choice(["train", "valid"]),
              default="valid", show_default=True)
@click.option("--ci", is_flag=True, help="print a 95% bootstrap CI (1000 per-row resamples)")
@click.option("--clock", "clock_name", type=click.Choice(["system", "logical"]),
              default="system", show_default=True)
@_with_exit_codes
def evaluate(config_path, data_path, registry_path, prompt_path, split_name, ci, clock_name):
    """Evaluate one prompt on one split, with fault recovery, and print metrics."""
    config, train, valid = _load_world(config_path, data_path)
    prompt = _read_text(prompt_path, "prompt")
    clock = _make_clock(clock_name)
    gateway = load_registry(registry_path, clock=clock)
    _check_aliases(gateway, config)
    split = train if split_name == "train" else valid
    table = evaluate_prompt(prompt, split, None, config, gateway, clock=clock)
    table = recover_failed_rows(table, split, config, gateway, clock=clock)
    failed = len(table.failed_rows())
    click.echo(
        f"{config.metric_name} on {split_name}: {table.primary_metric.value:.4f}  "
        f"({len(table.rows)} rows, {failed} failed)"
    )
    if table.guard_metric is not None:
        click.echo(f"guard {table.guard_metric.name}: {table.guard_metric.value:.4f}")
    if ci:
        lo, hi = table.bootstrap_ci(resamples=CI_RESAMPLES, confidence=CI_CONFIDENCE)
        click.echo(
            f"{int(CI_CONFIDENCE * 100)}% bootstrap CI ({CI_RESAMPLES} resamples): "
            f"[{lo:.4f}, {hi:.4f}]"
        )
    click.echo("confusion matrix (rows expected, columns parsed):")
    click.echo(table.confusion().render())


# ── report ───────────────────────────────────────────────────────────────────


def _collect_runs(run_dir: str) -> list:
    """Returns (name, seed, path) triples for a single run dir or a batch dir."""
    if os.path.exists(os.path.join(run_dir, "result.json")):
        return [(os.path.basename(os.path.normpath(run_dir)) or "run", None, run_dir)]
    seeds = {}
    summary_path = os.path.join(run_dir, "summary.json")
    if os.path.exists(summary_path):
        try:
            with open(summary_path, "r", encoding="utf-8") as fh:
                for entry in json.load(fh).get("runs", []):
                    seeds[entry.get("run")] = entry.get("seed")
        except (json.JSONDecodeError, AttributeError) as exc:
            raise TraceError(f"{summary_path}: corrupt summary ({exc})") from exc
    found = sorted(
        name for name in os.listdir(run_dir)
        if os.path.exists(os.path.join(run_dir, name, "result.json"))
    )
    if not found:
        raise ConfigurationError(f"no run artifacts under {run_dir}")
    return [(name, seeds.get(name), os.path.join(run_dir, name)) for name in found]


def _load_run_artifacts(path: str):
    result_path = os.path.join(path, "result.json")
    try:
        with open(result_path, "r", encoding="utf-8") as fh:
            result = json.load(fh)
    except json.JSONDecodeError as exc:
        raise TraceError(f"{result_path}: corrupt result ({exc})") from exc
    trace_path = os.path.join(path, "trace.jsonl")
    if not os.path.exists(trace_path):
        raise TraceError(f"{trace_path}: trace file missing")
    return result, load_trace(trace_path)


@main.command()
@click.option("--run-dir", "run_dir", required=True)
@click.option("--format", "fmt", type=click.Choice(["table", "trajectory"]),
              default="table", show_default=True)
@_with_exit_codes
def report(run_dir, fmt):
    """Render archived runs: per-run table or (budget_used, primary) series."""
    if not os.path.isdir(run_dir):
        raise ConfigurationError(f"run directory not found: {run_dir}")
    entries = _collect_runs(run_dir)
    loaded = [(name, seed, *_load_run_artifacts(path)) for name, seed, path in entries]

    if fmt == "trajectory":
        for name, _seed, result, _events in loaded:
            click.echo(f"{name}:")
            click.echo("  budget_used  primary  best")
            best = None
            for budget_used, primary in result["eval_trajectory"]:
                best = primary if best is None else max(best, primary)
                click.echo(f"  {budget_used:<11d}  {primary:.4f}   {best:.4f}")
        return

    click.echo(f"{'run':<10} {'seed':>4}  {'config':<12} {'seed_metric':>11} "
               f"{'best':>7} {'delta':>7}  stop_reason")
    digests = []
    totals = Counter()
    for name, seed, result, events in loaded:
        digest = result.get("config_digest", "-")
        digests.append(digest)
        delta = result["best_primary"] - result["seed_primary"]
        click.echo(
            f"{name:<10} {('-' if seed is None else str(seed)):>4}  {digest:<12} "
            f"{result['seed_primary']:>11.4f} {result['best_primary']:>7.4f} "
            f"{delta:>+7.4f}  {result['stop_reason']}"
        )
        for event in events:
            if event.kind == "budget_charge":
                totals["budget_charges"] += 1
            elif event.kind == "eval_result" and event.payload.get("full"):
                totals["full_evals"] += 1
            elif event.kind == "llm_call":
                totals["llm_calls"] += 1
                totals["prompt_tokens"] += event.payload.get("prompt_tokens") or 0
                totals["output_tokens"] += event.payload.get("output_tokens") or 0
    modal_digest, matched = Counter(digests).most_common(1)[0]
    click.echo(f"runs: {len(loaded)} tot. / {matched} matched config {modal_digest}")
    click.echo(
        f"totals: budget_charges={totals['budget_charges']} "
        f"full_evals={totals['full_evals']} llm_calls={totals['llm_calls']} "
        f"prompt_tokens={totals['prompt_tokens']} output_tokens={totals['output_tokens']}"
    )


# ── synth ────────────────────────────────────────────────────────────────────


@main.command()
@click.option("--spec-file", "spec_path", required=True)
@click.option("--out-dir", required=True)
@_with_exit_codes
def synth(spec_path, out_dir):
    """Generate a synthetic task bundle ready to run under `optimize`."""
    spec = load_synth_spec(spec_path)
    train, valid, config, stub = generate_task(spec)
    os.makedirs(out_dir, exist_ok=True)
    rows = sorted(list(train.rows) + list(valid.rows), key=lambda r: r["rid"])
    write_dataset(rows, os.path.join(out_dir, "dataset.csv"),
                  columns=["rid", "transcript", "label"])
    save_task_config(config, os.path.join(out_dir, "config.json"))
    _write_json(os.path.join(out_dir, "stub_model.json"), stub_spec_to_dict(stub))
    _write_json(os.path.join(out_dir, "registry.json"), {
        alias: {"kind": "stub", "spec_file": "stub_model.json"}
        for alias in (config.task_model_alias, config.agent_model_alias)
    })
    with open(os.path.join(out_dir, "seed_prompt.txt"), "w", encoding="utf-8") as fh:
        fh.write(seed_prompt_for(spec) + "\n")
    _write_json(os.path.join(out_dir, "brain_program.json"),
                {"actions": packaged_brain_program(spec)})
    click.echo(
        f"wrote {len(rows)}-row dataset ({spec.n_classes} classes) and task bundle to {out_dir}"
    )
    click.echo("files: dataset.csv config.json stub_model.json registry.json "
               "seed_prompt.txt brain_program.json")


if __name__ == "__main__":
    main()
