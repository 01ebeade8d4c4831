"""The guarded optimization loop.

A run starts with a forced full validation evaluation of the seed prompt, which
sets the rollback floor (and, with an AUTO guard, the guard floor). The brain
then acts one tool call per step until it calls finish, the evaluation budget
is spent, or the step cap is hit. Full validation evaluations that regress the
primary metric, or sink a configured guard metric below its floor, roll the
current prompt back to the best one seen.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import statistics
from dataclasses import dataclass, field
from typing import Callable, Optional

from .brain import BrainContext, HistoryPair, trim_history
from .core import (
    AUTO,
    ConfigurationError,
    DatasetSplit,
    EvaluationError,
    RunTrace,
    SystemClock,
    TaskConfig,
    task_config_to_dict,
)
from .evaluator import EvalTable, evaluate_prompt, recover_failed_rows
from .gateway import ModelGateway, ModelRequest
from .sandbox import SandboxPolicy, build_namespace, execute

STOP_REASONS = ("finish_called", "budget_exhausted", "steps_exhausted")
DECISIONS = ("accepted_best", "primary_rollback", "guard_rollback", "no_state_change")


@dataclass
class PromptState:
    current_prompt: str
    best_prompt: str
    best_primary: float = -math.inf
    guard_floor_resolved: Optional[float] = None


@dataclass
class AgentState:
    budget_used: int = 0
    steps_used: int = 0
    finished: bool = False
    finish_reason: str = ""
    eval_history: list = field(default_factory=list)  # (step, split, is_full, primary, guard)


@dataclass
class RunResult:
    best_prompt: str
    best_primary: float
    seed_primary: float
    eval_trajectory: list  # (budget_used, primary) pairs, full valid evals only
    stop_reason: str
    budget_used: int
    steps_used: int
    finish_reason: str = ""


def apply_eval_outcome(prompt_state: PromptState, table: EvalTable) -> str:
    """The four-way decision of the loop body. Total: every table maps to one.

    Only full validation evaluations move best-prompt state; full train and
    sampled evaluations are diagnostics.
    """
    if not (table.is_full_split and table.split_role == "valid"):
        return "no_state_change"
    primary = table.primary_metric.value
    if primary < prompt_state.best_primary:
        prompt_state.current_prompt = prompt_state.best_prompt
        return "primary_rollback"
    if (
        prompt_state.guard_floor_resolved is not None
        and table.guard_metric is not None
        and table.guard_metric.value < prompt_state.guard_floor_resolved
    ):
        prompt_state.current_prompt = prompt_state.best_prompt
        return "guard_rollback"
    prompt_state.best_prompt = prompt_state.current_prompt
    if primary > prompt_state.best_primary:
        prompt_state.best_primary = primary
    return "accepted_best"


def charge_budget(agent_state: AgentState, tool: str, is_full_eval: bool) -> int:
    """Every action costs a step; only full-split evaluations cost budget.

    Returns the budget delta (0 or 1).
    """
    agent_state.steps_used += 1
    if tool == "evaluate" and is_full_eval:
        agent_state.budget_used += 1
        return 1
    return 0


def _format_eval_summary(table: EvalTable, decision: Optional[str], agent_state: AgentState,
                         max_eval_calls: int) -> str:
    kind = "full" if table.is_full_split else f"subset n={len(table.rows)}"
    parts = [
        f"{table.split_role} {kind} eval: "
        f"{table.primary_metric.name}={table.primary_metric.value:.4f}"
    ]
    if table.guard_metric is not None:
        parts.append(f"guard {table.guard_metric.name}={table.guard_metric.value:.4f}")
    failed = len(table.failed_rows())
    if failed:
        parts.append(f"failed_rows={failed}")
    if decision is not None:
        parts.append(f"decision={decision}")
    parts.append(f"budget {agent_state.budget_used}/{max_eval_calls}")
    return "; ".join(parts)


def _format_script_result(result) -> str:
    lines = [f"script outcome: {result.outcome}"]
    if result.stdout:
        lines.append("stdout:")
        lines.append(result.stdout.rstrip("\n"))
    if result.outcome != "ok" and result.stderr:
        lines.append("stderr:")
        lines.append(result.stderr.rstrip("\n"))
    return "\n".join(lines)


def run(
    config: TaskConfig,
    seed_prompt: str,
    brain,
    train: DatasetSplit,
    valid: DatasetSplit,
    gateway: ModelGateway,
    run_dir: str,
    clock=None,
) -> RunResult:
    """One full optimization run; artifacts land in run_dir.

    Writes trace.jsonl as it goes, then result.json and trajectory.csv at the
    end. Evaluator configuration failures for the forced initial evaluation
    propagate; brain protocol failures and bad evaluate arguments only consume
    their step.
    """
    clock = clock if clock is not None else SystemClock()
    os.makedirs(run_dir, exist_ok=True)
    workspace = os.path.join(run_dir, "workspace")
    os.makedirs(workspace, exist_ok=True)
    trace = RunTrace(os.path.join(run_dir, "trace.jsonl"), clock=clock)
    if getattr(brain, "trace", False) is None:
        brain.trace = trace  # LLM brains log their calls into the run trace

    budgets = config.budgets
    max_b = budgets.max_eval_calls
    max_s = budgets.max_steps
    script_available = "NO_PYTHON" not in config.brain_variant
    policy = SandboxPolicy.from_config(config)

    prompt_state = PromptState(current_prompt=seed_prompt, best_prompt=seed_prompt)
    agent_state = AgentState()
    history: list = []
    trajectory: list = []
    last_primary: Optional[float] = None
    last_summary = "none yet"
    latest_tables = {"train": None, "valid": None}

    def full_eval(split_name: str, prompt: str, subset=None) -> EvalTable:
        split = valid if split_name == "valid" else train
        table = evaluate_prompt(prompt, split, subset, config, gateway, clock=clock)
        if subset is None:
            table = recover_failed_rows(table, split, config, gateway, clock=clock)
        return table

    def llm_handler_for(step_index: int):
        def handler(system_text, user_text, model, max_tokens, temperature):
            alias = model if model else config.task_model_alias
            request = ModelRequest(
                model_alias=alias,
                system_text=system_text,
                user_text=user_text,
                temperature=temperature,
                max_tokens=max_tokens,
            )
            response = gateway.complete_with_retry(request, max_retries=budgets.max_retries)
            trace.record(step_index, "llm_call", {
                "role": "script",
                "model_alias": alias,
                "prompt_tokens": response.prompt_tokens,
                "output_tokens": response.output_tokens,
            })
            if response.provider_error:
                return ("error", response.provider_error)
            return ("ok", response.content)

        return handler

    # forced initial evaluation: always full valid, always accepted as best
    init_table = full_eval("valid", seed_prompt)
    agent_state.budget_used = 1
    trace.record(0, "budget_charge", {"split": "valid", "budget_used": 1})
    seed_primary = init_table.primary_metric.value
    prompt_state.best_primary = seed_primary
    prompt_state.best_prompt = seed_prompt
    if config.guard is not None:
        if config.guard.floor_tau == AUTO:
            prompt_state.guard_floor_resolved = init_table.guard_metric.value
        else:
            prompt_state.guard_floor_resolved = float(config.guard.floor_tau)
    trace.record(0, "eval_result", {
        "split": "valid", "full": True, "decision": "accepted_best",
        "primary": seed_primary,
        "guard": None if init_table.guard_metric is None else init_table.guard_metric.value,
        "budget_used": 1, "rows": len(init_table.rows),
    })
    trace.record(0, "accept_best", {"primary": seed_primary, "seed": True})
    latest_tables["valid"] = init_table
    trajectory.append((1, seed_primary))
    last_primary = seed_primary
    agent_state.eval_history.append((0, "valid", True, seed_primary,
                                     None if init_table.guard_metric is None
                                     else init_table.guard_metric.value))
    last_summary = _format_eval_summary(init_table, "accepted_best", agent_state, max_b)
    history.append(HistoryPair("[forced initial evaluation of the seed prompt]",
                               last_summary, is_eval_result=True))

    while True:
        if agent_state.finished:
            stop_reason = "finish_called"
            break
        if agent_state.budget_used >= max_b:
            stop_reason = "budget_exhausted"
            break
        if agent_state.steps_used >= max_s:
            stop_reason = "steps_exhausted"
            break

        step = agent_state.steps_used + 1
        trimmed = trim_history(history, config.history_token_budget, config.chars_per_token)
        status_line = (
            f"Step {step}/{max_s}. Evaluation budget used "
            f"{agent_state.budget_used}/{max_b}. Best {config.metric_name} so far: "
            f"{prompt_state.best_primary:.4f}. Last eval: {last_summary}"
        )
        context = BrainContext(
            status_line=status_line,
            current_prompt=prompt_state.current_prompt,
            history=trimmed,
            last_primary=last_primary,
            step_index=step,
            history_dropped=max(0, len(history) - len(trimmed)),
        )
        action = brain.next_action(context)
        if action is None:
            charge_budget(agent_state, "forfeit", False)
            reason = getattr(brain, "last_failure", None) or "brain returned no action"
            trace.record(step, "protocol_forfeit", {"reason": reason})
            history.append(HistoryPair("[no valid tool call]", f"step forfeited: {reason}"))
            continue

        trace.record(step, "tool_call", {
            "tool": action.tool, "args": action.args, "thinking": action.thinking,
        })
        call_text = json.dumps(
            {"thinking": action.thinking, "tool": action.tool, "args": action.args},
            sort_keys=True,
        )

        if action.tool == "evaluate":
            subset = action.args.get("row_indices")
            is_full = subset is None
            try:
                table = full_eval(action.args["split"], prompt_state.current_prompt,
                                  subset=None if is_full else tuple(subset))
            except EvaluationError as exc:
                # bad row_indices from the brain: the step is spent, no charge
                charge_budget(agent_state, "evaluate", False)
                history.append(HistoryPair(call_text, f"evaluate error: {exc}"))
                continue
            charge_budget(agent_state, "evaluate", is_full)
            if is_full:
                trace.record(step, "budget_charge", {
                    "split": action.args["split"], "budget_used": agent_state.budget_used,
                })
            decision = apply_eval_outcome(prompt_state, table)
            primary = table.primary_metric.value
            guard_value = None if table.guard_metric is None else table.guard_metric.value
            trace.record(step, "eval_result", {
                "split": table.split_role, "full": is_full, "decision": decision,
                "primary": primary, "guard": guard_value,
                "budget_used": agent_state.budget_used, "rows": len(table.rows),
            })
            if decision == "accepted_best":
                trace.record(step, "accept_best", {"primary": primary, "seed": False})
            elif decision == "primary_rollback":
                trace.record(step, "rollback", {
                    "primary": primary, "best_primary": prompt_state.best_primary,
                })
            elif decision == "guard_rollback":
                trace.record(step, "guard_rollback", {
                    "guard": guard_value, "floor": prompt_state.guard_floor_resolved,
                })
            latest_tables[table.split_role] = table
            if is_full and table.split_role == "valid":
                trajectory.append((agent_state.budget_used, primary))
            last_primary = primary
            agent_state.eval_history.append((step, table.split_role, is_full, primary, guard_value))
            last_summary = _format_eval_summary(table, decision, agent_state, max_b)
            history.append(HistoryPair(call_text, last_summary, is_eval_result=True))

        elif action.tool == "script":
            charge_budget(agent_state, "script", False)
            if not script_available:
                history.append(HistoryPair(
                    call_text, "tool error: the script tool is not available in this run"))
                continue
            namespace = build_namespace(
                latest_tables["train"], latest_tables["valid"], train, valid,
                prompt_state.current_prompt, config, workspace,
            )
            result = execute(action.args["code"], namespace, policy,
                             llm_handler=llm_handler_for(step))
            history.append(HistoryPair(call_text, _format_script_result(result)))

        elif action.tool == "set_prompt":
            charge_budget(agent_state, "set_prompt", False)
            prompt_state.current_prompt = action.args["content"]
            history.append(HistoryPair(
                call_text,
                f"prompt replaced ({len(action.args['content'])} chars); "
                "takes effect at the next evaluation",
            ))

        elif action.tool == "finish":
            charge_budget(agent_state, "finish", False)
            agent_state.finished = True
            agent_state.finish_reason = action.args.get("reason", "")
            trace.record(step, "finish", {"reason": agent_state.finish_reason})
            history.append(HistoryPair(call_text, "run finished"))

        else:  # unreachable with a conforming brain; keep the loop total
            charge_budget(agent_state, action.tool, False)
            history.append(HistoryPair(call_text, f"tool error: unknown tool {action.tool!r}"))

    trace.close()
    result = RunResult(
        best_prompt=prompt_state.best_prompt,
        best_primary=prompt_state.best_primary,
        seed_primary=seed_primary,
        eval_trajectory=trajectory,
        stop_reason=stop_reason,
        budget_used=agent_state.budget_used,
        steps_used=agent_state.steps_used,
        finish_reason=agent_state.finish_reason,
    )
    save_run_result(result, run_dir, config)
    return result


def config_digest(config: TaskConfig) -> str:
    """Short stable hash of the resolved config; reports use it to flag
    whether runs being compared actually ran the same configuration.

    eval_workers is excluded: worker-pool width is required not to affect any
    artifact, so two runs differing only in it count as the same config.
    """
    d = task_config_to_dict(config)
    d["budgets"] = {k: v for k, v in d["budgets"].items() if k != "eval_workers"}
    blob = json.dumps(d, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def save_run_result(result: RunResult, run_dir: str, config: TaskConfig) -> None:
    payload = {
        "task_name": config.task_name,
        "metric_name": config.metric_name,
        "config_digest": config_digest(config),
        "best_prompt": result.best_prompt,
        "best_primary": result.best_primary,
        "seed_primary": result.seed_primary,
        "stop_reason": result.stop_reason,
        "budget_used": result.budget_used,
        "steps_used": result.steps_used,
        "finish_reason": result.finish_reason,
        "eval_trajectory": [list(point) for point in result.eval_trajectory],
    }
    with open(os.path.join(run_dir, "result.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(os.path.join(run_dir, "trajectory.csv"), "w", encoding="utf-8") as fh:
        fh.write("budget_used,primary\n")
        for budget_used, primary in result.eval_trajectory:
            fh.write(f"{budget_used},{primary!r}\n")


def load_run_result(run_dir: str) -> dict:
    with open(os.path.join(run_dir, "result.json"), "r", encoding="utf-8") as fh:
        return json.load(fh)


def best_of_n(
    config: TaskConfig,
    seed_prompt: str,
    brain_factory: Callable[[int], object],
    n: int,
    seeds: list,
    train: DatasetSplit,
    valid: DatasetSplit,
    gateway_factory: Callable[[int], ModelGateway],
    out_dir: str,
    clock=None,
) -> dict:
    """n independent sequential runs, each with its own gateway, workspace and
    trace; the summary keeps every run for variance reporting and selects the
    max best_primary. A run that raises is recorded as an error and excluded.
    """
    if n < 1:
        raise ConfigurationError("best_of_n requires n >= 1")
    if len(seeds) != n:
        raise ConfigurationError(f"need exactly {n} seeds, got {len(seeds)}")
    os.makedirs(out_dir, exist_ok=True)
    runs = []
    for i, seed in enumerate(seeds):
        run_name = f"run_{i:02d}"
        run_dir = os.path.join(out_dir, run_name)
        try:
            result = run(
                config, seed_prompt, brain_factory(seed), train, valid,
                gateway_factory(seed), run_dir, clock=clock,
            )
        except Exception as exc:  # noqa: BLE001 - a failed run must not sink the batch
            runs.append({"run": run_name, "seed": seed, "error": f"{type(exc).__name__}: {exc}"})
            continue
        runs.append({
            "run": run_name,
            "seed": seed,
            "best_primary": result.best_primary,
            "seed_primary": result.seed_primary,
            "stop_reason": result.stop_reason,
            "budget_used": result.budget_used,
            "steps_used": result.steps_used,
        })
    scored = [(r["best_primary"], i) for i, r in enumerate(runs) if "error" not in r]
    summary = {
        "task_name": config.task_name,
        "metric_name": config.metric_name,
        "n_runs": n,
        "seeds": list(seeds),
        "runs": runs,
        "best_run_index": None,
        "best_primary": None,
        "mean_best": None,
        "stddev_best": None,
    }
    if scored:
        best_value, best_index = max(scored, key=lambda pair: pair[0])
        values = [v for v, _ in scored]
        summary["best_run_index"] = best_index
        summary["best_primary"] = best_value
        summary["mean_best"] = statistics.fmean(values)
        summary["stddev_best"] = statistics.pstdev(values)
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return summary
