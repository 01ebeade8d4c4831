"""Deciding the next tool call.

Renders the agent's controlling system prompt, keeps the conversation history
under a token budget, parses the one-action-per-step JSON wire message, and
provides two brain implementations: an LLM-backed one and a deterministic
scripted one for tests and synthetic runs.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from typing import Optional

from .core import ConfigurationError, ProtocolError, RenderError, TaskConfig
from .gateway import ModelRequest

CANONICAL_TOOLS = ("evaluate", "script", "set_prompt", "finish")
HISTORY_TRUNCATION_MARKER = "\n[tool result truncated to fit the history budget]"


@dataclass
class ToolCall:
    tool: str
    args: dict = field(default_factory=dict)
    thinking: str = ""


@dataclass(frozen=True)
class HistoryPair:
    call_text: str
    result_text: str
    is_eval_result: bool = False


@dataclass
class BrainContext:
    status_line: str
    current_prompt: str
    history: list = field(default_factory=list)  # trimmed HistoryPair list, oldest first
    system_prompt: str = ""
    last_primary: Optional[float] = None
    step_index: int = 0
    history_dropped: int = 0


def render_template(template: str, values: dict) -> str:
    """Single-brace placeholder substitution with doubled-brace escapes.

    Unlike str.format this reports unresolved placeholders by name instead of
    raising KeyError, and never interprets format specs.
    """
    out = []
    i = 0
    n = len(template)
    while i < n:
        ch = template[i]
        if ch == "{":
            if template[i + 1 : i + 2] == "{":
                out.append("{")
                i += 2
                continue
            j = template.find("}", i)
            if j < 0:
                raise RenderError("unbalanced '{' in template")
            name = template[i + 1 : j]
            if name not in values:
                raise RenderError(f"unresolved placeholder {{{name}}}")
            out.append(str(values[name]))
            i = j + 1
        elif ch == "}":
            if template[i + 1 : i + 2] == "}":
                out.append("}")
                i += 2
                continue
            raise RenderError("unbalanced '}' in template")
        else:
            out.append(ch)
            i += 1
    return "".join(out)


_BASE_TEMPLATE = """\
You are an expert prompt engineer. Improve the judge prompt for the labeling task
below until its {metric_name} on the validation split is as high as you can get
within budget (target: {target_metric}).

Task: {task_name}
{context_block}Inputs per row: {input_columns}. Expected output field: {gt_column}.
Model outputs are parsed by a fixed parser; the prompt must keep answers in the
required output format or they score as parse failures.

Budget: {max_eval_calls} evaluations, {max_steps} steps

Reply to every message with exactly ONE JSON object, no markdown fences:
{{"thinking": "<brief reasoning>", "tool": "<tool name>", "args": {{ ... }}}}

Tools (call ONE per step):
- evaluate: args {{"split": "train" or "valid", "row_indices": [<ints>] (optional)}}.
  Runs the current prompt over the chosen split. A full-split evaluation consumes
  one unit of the evaluation budget; a sampled evaluation (row_indices given) is
  free but does NOT update best-metric tracking.
{script_section}- set_prompt: args {{"content": "<the complete new prompt text>"}}. Replaces the
  current prompt. Free. Takes effect at the next evaluation.
- finish: args {{"reason": "<short reason>"}}. Ends the run; the best prompt seen
  so far is what gets returned.

Rules:
- A full validation evaluation that scores below the best seen rolls your prompt
  back to the best one automatically. When a guard metric is configured, rewrites
  whose guard score sinks below the floor are rolled back even if the primary
  metric improved.
{notes_rule}{train_only_rule}"""

_SCRIPT_SECTION = """\
- {script_tool_name}: args {{"code": "<python source>"}}. Runs analysis code in a
  sandbox. Bound names: train_df (raw train rows), valid_df (validation labels
  only, never inputs), train_eval_df (full per-row eval table), valid_eval_df
  (validation results redacted to EXPECTED_OUTPUT/PARSED_OUTPUT/IS_CORRECT),
  current_prompt, config, workspace_dir, llm(system, user), plus pd/np/json/re.
  Imports outside pandas/numpy/json/re/collections/itertools/math/statistics/
  textwrap are blocked; file access is confined to workspace_dir; wall clock
  {sandbox_wall_clock}s. stdout is returned as the tool result. Free: never
  consumes evaluation budget.
"""

_NOTES_RULE_WITH_SCRIPT = """\
- Conversation history gets trimmed when it grows long. Your analysis will be
  LOST unless you persist it: write notes to files under workspace_dir from a
  {script_tool_name} step, and read them back later.
- Prefer cheap diagnostics (sampled evaluations, {script_tool_name} analysis of
  the eval tables) before spending full evaluations.
"""

_NOTES_RULE_NO_SCRIPT = """\
- Conversation history gets trimmed when it grows long. Your analysis will be
  LOST, so keep each reply self-contained.
- Prefer sampled evaluations as cheap diagnostics before spending full ones.
"""

_TRAIN_ONLY_RULE = """\
- Use only the "train" split for your own evaluations; the validation split is
  reserved for the automatic scoring of the run.
"""


def render_brain_prompt(config: TaskConfig, variant: Optional[str] = None) -> str:
    variant = config.brain_variant if variant is None else variant
    if variant not in ("FULL", "TRAIN_ONLY", "NO_PYTHON", "TRAIN_ONLY_NO_PYTHON"):
        raise RenderError(f"unknown brain prompt variant {variant!r}")
    no_python = "NO_PYTHON" in variant
    train_only = "TRAIN_ONLY" in variant

    context_lines = []
    if config.task_description:
        context_lines.append(f"Description: {config.task_description}")
    if config.policy_context:
        context_lines.append(f"Policy context: {config.policy_context}")
    context_block = "".join(line + "\n" for line in context_lines)

    values = {
        "task_name": config.task_name,
        "metric_name": config.metric_name,
        "target_metric": f"{config.target_metric:g}",
        "input_columns": ", ".join(config.input_columns),
        "gt_column": config.gt_column,
        "max_eval_calls": config.budgets.max_eval_calls,
        "max_steps": config.budgets.max_steps,
        "script_tool_name": config.script_tool_name,
        "sandbox_wall_clock": f"{config.budgets.sandbox_wall_clock:g}",
        "context_block": context_block,
        "script_section": "" if no_python else render_template(_SCRIPT_SECTION, {
            "script_tool_name": config.script_tool_name,
            "sandbox_wall_clock": f"{config.budgets.sandbox_wall_clock:g}",
        }),
        "notes_rule": _NOTES_RULE_NO_SCRIPT if no_python else render_template(
            _NOTES_RULE_WITH_SCRIPT, {"script_tool_name": config.script_tool_name}
        ),
        "train_only_rule": _TRAIN_ONLY_RULE if train_only else "",
    }
    return render_template(_BASE_TEMPLATE, values)


_FENCE_RE = re.compile(r"\A```[A-Za-z0-9_-]*[ \t]*\n(.*?)\n?```\s*\Z", re.DOTALL)


def parse_tool_call(raw: str, script_tool_name: str = "script") -> ToolCall:
    """Strict single-object parse of a brain reply.

    One markdown fence pair is stripped as a documented repair; anything else
    non-conforming raises ProtocolError with a reason the brain can act on.
    """
    if not isinstance(raw, str) or not raw.strip():
        raise ProtocolError("empty reply; expected one JSON object")
    text = raw.strip()
    fenced = _FENCE_RE.match(text)
    if fenced:
        text = fenced.group(1).strip()
    try:
        obj, end = json.JSONDecoder().raw_decode(text)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"reply is not a JSON object: {exc.msg} (char {exc.pos})")
    if text[end:].strip():
        raise ProtocolError("trailing content after the JSON object; send exactly one object")
    if not isinstance(obj, dict):
        raise ProtocolError("top-level JSON value must be an object")

    tool = obj.get("tool")
    allowed = ("evaluate", script_tool_name, "set_prompt", "finish")
    if tool not in allowed:
        raise ProtocolError(f"unknown tool {tool!r}; expected one of {list(allowed)}")
    thinking = obj.get("thinking", "")
    if not isinstance(thinking, str):
        raise ProtocolError("thinking must be a string")
    args = obj.get("args", {})
    if not isinstance(args, dict):
        raise ProtocolError("args must be an object")

    canonical = "script" if tool == script_tool_name else tool
    if canonical == "evaluate":
        split = args.get("split")
        if split not in ("train", "valid"):
            raise ProtocolError('evaluate args.split must be "train" or "valid"')
        indices = args.get("row_indices")
        if indices is not None:
            if not isinstance(indices, list) or not indices or any(
                isinstance(i, bool) or not isinstance(i, int) for i in indices
            ):
                raise ProtocolError("evaluate args.row_indices must be a non-empty list of integers")
        clean = {"split": split}
        if indices is not None:
            clean["row_indices"] = list(indices)
    elif canonical == "script":
        code = args.get("code")
        if not isinstance(code, str):
            raise ProtocolError(f"{tool} args.code must be a string")
        clean = {"code": code}
    elif canonical == "set_prompt":
        content = args.get("content")
        if not isinstance(content, str):
            raise ProtocolError("set_prompt args.content must be a string")
        clean = {"content": content}
    else:
        reason = args.get("reason", "")
        if not isinstance(reason, str):
            raise ProtocolError("finish args.reason must be a string")
        clean = {"reason": reason}
    return ToolCall(tool=canonical, args=clean, thinking=thinking)


def estimate_tokens(text: str, chars_per_token: float = 4.0) -> int:
    if not text:
        return 0
    return int(math.ceil(len(text) / chars_per_token))


def trim_history(history, token_budget: int, chars_per_token: float = 4.0):
    """Drop oldest pairs until the estimate fits.

    The most recent eval-result pair survives any trim even if that leaves the
    estimate over budget; if the single newest pair alone exceeds the budget its
    result payload gets truncated with a marker instead.
    """
    history = list(history)
    if not history:
        return []

    def cost(pair: HistoryPair) -> int:
        return estimate_tokens(pair.call_text, chars_per_token) + estimate_tokens(
            pair.result_text, chars_per_token
        )

    newest = history[-1]
    if cost(newest) > token_budget:
        keep_chars = max(0, int(token_budget * chars_per_token) - len(newest.call_text))
        clipped = replace(
            newest, result_text=newest.result_text[:keep_chars] + HISTORY_TRUNCATION_MARKER
        )
        return [clipped]

    total = 0
    start = len(history)
    for i in range(len(history) - 1, -1, -1):
        pair_cost = cost(history[i])
        if total + pair_cost > token_budget:
            break
        total += pair_cost
        start = i
    kept = history[start:]

    last_eval = None
    for i in range(len(history) - 1, -1, -1):
        if history[i].is_eval_result:
            last_eval = i
            break
    if last_eval is not None and last_eval < start:
        kept = [history[last_eval]] + kept
    return kept


class ScriptedBrain:
    """Replays a fixed, optionally metric-conditional tool-call program.

    Program entries are JSON-friendly dicts: either a plain call
    {"tool": ..., "args": {...}, "thinking": ...} or a conditional
    {"if_last_primary_lt": x, "then": [entries], "else": [entries]} resolved
    against the last observed full-eval primary at the moment it is reached.
    An exhausted program yields finish.
    """

    def __init__(self, program):
        _validate_program(program, path="program")
        self._stack = [iter(list(program))]
        self.last_failure: Optional[str] = None

    @classmethod
    def from_file(cls, path: str) -> "ScriptedBrain":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        if isinstance(raw, dict):
            raw = raw.get("actions")
        if not isinstance(raw, list):
            raise ConfigurationError(
                f"{path}: scripted brain file must be a JSON list or an object with 'actions'"
            )
        return cls(raw)

    def next_action(self, context: BrainContext) -> Optional[ToolCall]:
        while self._stack:
            try:
                entry = next(self._stack[-1])
            except StopIteration:
                self._stack.pop()
                continue
            if "if_last_primary_lt" in entry:
                threshold = float(entry["if_last_primary_lt"])
                last = context.last_primary
                taken = entry.get("then", []) if (last is not None and last < threshold) else entry.get("else", [])
                self._stack.append(iter(list(taken)))
                continue
            return ToolCall(
                tool=entry["tool"],
                args=dict(entry.get("args", {})),
                thinking=entry.get("thinking", ""),
            )
        return ToolCall(tool="finish", args={"reason": "scripted program exhausted"})


def _validate_program(entries, path: str) -> None:
    if not isinstance(entries, list):
        raise ConfigurationError(f"{path}: expected a list of program entries")
    for pos, entry in enumerate(entries):
        where = f"{path}[{pos}]"
        if not isinstance(entry, dict):
            raise ConfigurationError(f"{where}: entry must be an object")
        if "if_last_primary_lt" in entry:
            try:
                float(entry["if_last_primary_lt"])
            except (TypeError, ValueError):
                raise ConfigurationError(f"{where}: if_last_primary_lt must be a number")
            for branch in ("then", "else"):
                if branch in entry:
                    _validate_program(entry[branch], f"{where}.{branch}")
            continue
        tool = entry.get("tool")
        if tool not in CANONICAL_TOOLS:
            raise ConfigurationError(f"{where}: unknown tool {tool!r}")
        if "args" in entry and not isinstance(entry["args"], dict):
            raise ConfigurationError(f"{where}: args must be an object")


class LLMBrain:
    """Asks the agent model for the next action.

    One protocol-error retry per step: the parse failure is echoed back as if it
    were a tool result, and a second failure forfeits the step (returns None
    with last_failure set).
    """

    def __init__(self, gateway, config: TaskConfig, trace=None):
        self.gateway = gateway
        self.config = config
        self.trace = trace
        self.system_prompt = render_brain_prompt(config)
        self.last_failure: Optional[str] = None

    def _render_user(self, context: BrainContext, reminder: Optional[str]) -> str:
        parts = ["Current prompt:\n<<<\n" + context.current_prompt + "\n>>>", context.status_line]
        if context.history_dropped:
            parts.append(f"[{context.history_dropped} earlier steps trimmed from history]")
        for pair in context.history:
            parts.append("ACTION: " + pair.call_text)
            parts.append("RESULT: " + pair.result_text)
        if reminder:
            parts.append("RESULT: " + reminder)
        parts.append("Reply with exactly one JSON object choosing one tool.")
        return "\n\n".join(parts)

    def next_action(self, context: BrainContext) -> Optional[ToolCall]:
        self.last_failure = None
        reminder = None
        last_error = None
        for _attempt in range(2):
            request = ModelRequest(
                model_alias=self.config.agent_model_alias,
                system_text=self.system_prompt,
                user_text=self._render_user(context, reminder),
                temperature=self.config.agent_temperature,
                max_tokens=self.config.agent_max_tokens,
            )
            response = self.gateway.complete_with_retry(
                request, max_retries=self.config.budgets.max_retries
            )
            if self.trace is not None:
                self.trace.record(context.step_index, "llm_call", {
                    "role": "brain",
                    "model_alias": self.config.agent_model_alias,
                    "prompt_tokens": response.prompt_tokens,
                    "output_tokens": response.output_tokens,
                })
            if response.provider_error:
                self.last_failure = f"brain model error: {response.provider_error}"
                return None
            try:
                return parse_tool_call(response.content, self.config.script_tool_name)
            except ProtocolError as exc:
                last_error = str(exc)
                reminder = (
                    f"Protocol error: {last_error} "
                    "Reply again with exactly one JSON object and nothing else."
                )
        self.last_failure = f"protocol error after retry: {last_error}"
        return None
