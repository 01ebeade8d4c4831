"""Resource-capped execution of agent-authored analysis scripts.

Scripts run in a forked child process with a static import whitelist checked
up front and enforced again at runtime, a data-segment memory cap, a parent-
enforced wall clock, file I/O confined to the per-run workspace directory, and
validation-split views redacted to structural columns. The sandbox is
cooperative, not adversarial-grade: it exists to stop accidents, not attackers.
"""
from __future__ import annotations

import ast
import builtins
import io
import multiprocessing
import os
import posixpath
import resource
import sys
import time
import traceback
from dataclasses import dataclass
from typing import Optional

import pandas as pd

from .core import TaskConfig
from .evaluator import EvalTable

ALLOWED_IMPORTS = frozenset(
    {"pandas", "numpy", "json", "re", "collections", "itertools", "math", "statistics", "textwrap"}
)
BLOCKED_NAMES = frozenset(
    {"eval", "exec", "compile", "__import__", "globals", "vars", "breakpoint", "input", "exit", "quit"}
)
DEFAULT_STDOUT_CAP = 64 * 1024
_SUPERVISOR_POLL = 0.02


@dataclass(frozen=True)
class SandboxPolicy:
    allowed_imports: frozenset = ALLOWED_IMPORTS
    blocked_names: frozenset = BLOCKED_NAMES
    wall_clock_cap: float = 60.0
    memory_cap: int = 512 * 1024 * 1024
    stdout_cap: int = DEFAULT_STDOUT_CAP

    @classmethod
    def from_config(cls, config: TaskConfig) -> "SandboxPolicy":
        return cls(
            wall_clock_cap=config.budgets.sandbox_wall_clock,
            memory_cap=config.budgets.sandbox_memory_cap,
        )


@dataclass
class SandboxNamespace:
    """Everything a script may see. Valid-split input content is never present:
    valid_labels_view carries label columns only and valid_eval_view exactly
    the three structural columns."""

    train_raw: pd.DataFrame
    valid_labels_view: pd.DataFrame
    current_prompt: str
    config_view: dict
    workspace_dir: str
    train_table: Optional[pd.DataFrame] = None
    valid_eval_view: Optional[pd.DataFrame] = None


@dataclass
class ScriptResult:
    stdout: str
    stderr: str
    outcome: str  # ok | static_violation | runtime_error | timeout | memory_exceeded
    duration: float


def validate_script(script: str, policy: SandboxPolicy) -> list:
    """Static scan. Returns a list of violation strings; empty means ok."""
    try:
        tree = ast.parse(script)
    except SyntaxError as exc:
        return [f"line {exc.lineno}: syntax error: {exc.msg}"]
    violations = []
    for node in ast.walk(tree):
        if isinstance(node, ast.Import):
            for alias in node.names:
                top = alias.name.split(".")[0]
                if top not in policy.allowed_imports:
                    violations.append(f"line {node.lineno}: import of {alias.name!r} is not allowed")
        elif isinstance(node, ast.ImportFrom):
            if node.level and node.level > 0:
                violations.append(f"line {node.lineno}: relative imports are not allowed")
                continue
            top = (node.module or "").split(".")[0]
            if top not in policy.allowed_imports:
                violations.append(f"line {node.lineno}: import from {node.module!r} is not allowed")
        elif isinstance(node, ast.Name) and node.id in policy.blocked_names:
            violations.append(f"line {node.lineno}: use of {node.id!r} is not allowed")
    return violations


def build_namespace(
    train_eval: Optional[EvalTable],
    valid_eval: Optional[EvalTable],
    train_split,
    valid_split,
    prompt: str,
    config: TaskConfig,
    workspace: str,
) -> SandboxNamespace:
    """Fresh snapshots every call; script mutations can never leak back.

    Eval views are absent (None) until the corresponding evaluate has run.
    """
    workspace = os.path.abspath(workspace)
    train_raw = pd.DataFrame(list(train_split.rows))
    label_cols = [config.gt_column] + ([config.gt_reason_column] if config.gt_reason_column else [])
    if config.valid_labels_mode == "histogram":
        counts = pd.DataFrame(list(valid_split.rows))[config.gt_column].value_counts()
        valid_labels = (
            counts.rename_axis(config.gt_column).reset_index(name="count")
            .sort_values(config.gt_column).reset_index(drop=True)
        )
    else:
        valid_labels = pd.DataFrame(list(valid_split.rows))[label_cols].copy()
    config_view = {
        "task_name": config.task_name,
        "input_columns": list(config.input_columns),
        "gt_column": config.gt_column,
        "gt_reason_column": config.gt_reason_column,
        "metric_name": config.metric_name,
        "target_metric": config.target_metric,
        "task_description": config.task_description,
        "policy_context": config.policy_context,
    }
    return SandboxNamespace(
        train_raw=train_raw,
        valid_labels_view=valid_labels,
        current_prompt=prompt,
        config_view=config_view,
        workspace_dir=workspace,
        train_table=(
            train_eval.to_frame("full", input_columns=config.input_columns)
            if train_eval is not None else None
        ),
        valid_eval_view=valid_eval.to_frame("redacted") if valid_eval is not None else None,
    )


class _CappedWriter(io.TextIOBase):
    """Write-through file writer with a byte cap and an explicit truncation marker.

    Flushes every write so a killed child still leaves its partial output behind.
    """

    def __init__(self, path: str, cap: int):
        self._fh = open(path, "w", encoding="utf-8", errors="replace")
        self._cap = cap
        self._written = 0
        self._truncated = False

    def writable(self) -> bool:
        return True

    def write(self, s: str) -> int:
        if self._truncated:
            return len(s)
        data = s.encode("utf-8", "replace")
        room = self._cap - self._written
        if len(data) > room:
            kept = data[:room].decode("utf-8", "ignore")
            self._fh.write(kept)
            self._fh.write(f"\n[stdout truncated at {self._cap} bytes]")
            self._truncated = True
        else:
            self._fh.write(s)
            self._written += len(data)
        self._fh.flush()
        return len(s)

    def flush(self) -> None:
        if not self._fh.closed:
            self._fh.flush()

    def close(self) -> None:
        try:
            self._fh.close()
        finally:
            super().close()


def _make_llm(conn):
    def llm(system: str, user: str, model: str = None, max_tokens: int = 4000,
            temperature: float = 0.2) -> str:
        """Call a model through the parent gateway. Free: never charges eval budget."""
        conn.send(("llm", system, user, model, max_tokens, temperature))
        status, payload = conn.recv()
        if status == "error":
            raise RuntimeError(f"llm call failed: {payload}")
        return payload

    return llm


def _child_main(conn, script: str, namespace: SandboxNamespace, policy: SandboxPolicy,
                stdout_path: str) -> None:
    # resolve before chdir: a relative workspace path would resolve against
    # itself afterwards
    workspace_real = os.path.realpath(namespace.workspace_dir)
    os.chdir(workspace_real)
    real_open = builtins.open
    real_import = builtins.__import__

    def guarded_open(file, mode="r", *args, **kwargs):
        if isinstance(file, int):
            raise PermissionError("opening file descriptors is not allowed in the sandbox")
        path = os.path.realpath(os.fspath(file))
        if path != workspace_real and not path.startswith(workspace_real + os.sep):
            raise PermissionError(f"path outside workspace_dir: {file!r}")
        return real_open(path, mode, *args, **kwargs)

    def guarded_import(name, globals=None, locals=None, fromlist=(), level=0):
        top = name.split(".")[0]
        if level != 0 or top not in policy.allowed_imports:
            raise ImportError(f"import of {name!r} is not allowed in the sandbox")
        return real_import(name, globals, locals, fromlist, level)

    import collections as _collections
    import json as _json
    import re as _re
    import textwrap as _textwrap

    import numpy as _np

    sandbox_builtins = {k: v for k, v in builtins.__dict__.items()
                        if k not in policy.blocked_names}
    sandbox_builtins["open"] = guarded_open
    sandbox_builtins["__import__"] = guarded_import

    script_globals = {
        "__builtins__": sandbox_builtins,
        "__name__": "__main__",
        "train_df": namespace.train_raw,
        "valid_df": namespace.valid_labels_view,
        "train_eval_df": namespace.train_table,
        "valid_eval_df": namespace.valid_eval_view,
        "current_prompt": namespace.current_prompt,
        "config": dict(namespace.config_view),
        "workspace_dir": namespace.workspace_dir,
        "llm": _make_llm(conn),
        "pd": pd,
        "np": _np,
        "json": _json,
        "re": _re,
        "collections": _collections,
        "os_path": posixpath,
        "textwrap": _textwrap,
    }

    writer = _CappedWriter(stdout_path, policy.stdout_cap)
    err_buffer = io.StringIO()
    sys.stdout = writer
    sys.stderr = err_buffer

    outcome, harness_error = "ok", ""
    soft, hard = resource.getrlimit(resource.RLIMIT_DATA)
    try:
        code = compile(script, "<script>", "exec")
        cap = policy.memory_cap
        if hard != resource.RLIM_INFINITY:
            cap = min(cap, hard)
        resource.setrlimit(resource.RLIMIT_DATA, (cap, hard))
        try:
            exec(code, script_globals)
        finally:
            # lift the cap again so result reporting cannot hit it
            resource.setrlimit(resource.RLIMIT_DATA, (soft, hard))
    except MemoryError:
        outcome = "memory_exceeded"
        harness_error = f"memory cap of {policy.memory_cap} bytes exceeded"
    except BaseException:
        outcome = "runtime_error"
        harness_error = traceback.format_exc()
    finally:
        writer.close()
        sys.stdout = sys.__stdout__
        sys.stderr = sys.__stderr__
    stderr_text = err_buffer.getvalue()
    if harness_error:
        stderr_text = (stderr_text + "\n" if stderr_text else "") + harness_error
    conn.send(("done", outcome, stderr_text))
    conn.close()


def execute(script: str, namespace: SandboxNamespace, policy: SandboxPolicy,
            llm_handler=None) -> ScriptResult:
    """Run a validated script under the policy caps.

    llm_handler(system, user, model, max_tokens, temperature) -> ("ok", text)
    or ("error", message); it runs in the parent, so gateway calls and trace
    logging happen outside the capped child.
    """
    violations = validate_script(script, policy)
    if violations:
        return ScriptResult(stdout="", stderr="\n".join(violations),
                            outcome="static_violation", duration=0.0)
    os.makedirs(namespace.workspace_dir, exist_ok=True)
    stdout_path = os.path.join(namespace.workspace_dir, ".script_stdout")
    ctx = multiprocessing.get_context("fork")
    parent_conn, child_conn = ctx.Pipe(duplex=True)
    proc = ctx.Process(
        target=_child_main,
        args=(child_conn, script, namespace, policy, stdout_path),
        daemon=True,
    )
    started = time.monotonic()
    proc.start()
    child_conn.close()

    deadline = started + policy.wall_clock_cap
    outcome: Optional[str] = None
    stderr_text = ""
    while outcome is None:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            proc.kill()
            proc.join(5.0)
            outcome = "timeout"
            stderr_text = f"killed after exceeding the {policy.wall_clock_cap}s wall clock"
            break
        if parent_conn.poll(min(remaining, _SUPERVISOR_POLL)):
            try:
                message = parent_conn.recv()
            except EOFError:
                proc.join(5.0)
                outcome = "runtime_error"
                stderr_text = f"sandbox child crashed (exit code {proc.exitcode})"
                break
            if message[0] == "llm":
                _, sys_text, usr_text, model, max_tokens, temperature = message
                if llm_handler is None:
                    parent_conn.send(("error", "no llm handler bound"))
                else:
                    try:
                        parent_conn.send(llm_handler(sys_text, usr_text, model, max_tokens, temperature))
                    except Exception as exc:
                        parent_conn.send(("error", str(exc)))
            else:
                _, outcome, stderr_text = message
    proc.join(5.0)
    if proc.is_alive():
        proc.kill()
        proc.join(5.0)
    parent_conn.close()

    stdout_text = ""
    try:
        with open(stdout_path, "r", encoding="utf-8", errors="replace") as fh:
            stdout_text = fh.read()
        os.remove(stdout_path)
    except OSError:
        pass
    return ScriptResult(
        stdout=stdout_text,
        stderr=stderr_text,
        outcome=outcome,
        duration=time.monotonic() - started,
    )
