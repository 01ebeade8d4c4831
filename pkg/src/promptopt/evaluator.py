"""Prompt scoring harness: bounded-concurrency per-row inference, strict success
predicate, per-row wall-clock caps, parse-failure accounting, and rate-limit
recovery passes."""
from __future__ import annotations

import csv
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import pandas as pd

from . import metrics
from .core import (
    PARSE_FAILURE,
    DatasetSplit,
    EvaluationError,
    ParserSpec,
    SystemClock,
    TaskConfig,
)
from .gateway import ModelGateway, ModelRequest, ModelResponse

TASK_MODEL_MAX_TOKENS = 4000

# re-exported for callers that treat parsing as part of the evaluator surface
__all__ = [
    "EvalRow",
    "EvalTable",
    "ParserSpec",
    "evaluate_prompt",
    "parse_prediction",
    "recover_failed_rows",
    "success_predicate",
    "read_eval_table",
]


@dataclass
class EvalRow:
    """One scored row. EXPECTED_OUTPUT and PARSED_OUTPUT are stored normalized;
    RAW_OUTPUT keeps the model text verbatim."""

    row_index: int
    input_snapshot: dict
    EXPECTED_OUTPUT: str
    PARSED_OUTPUT: str
    IS_CORRECT: bool
    RAW_OUTPUT: str
    INFERENCE_ERROR: Optional[str] = None
    row_latency: float = 0.0


@dataclass
class EvalTable:
    rows: list
    split_role: str
    subset: Optional[Tuple[int, ...]]
    primary_metric: metrics.MetricValue
    guard_metric: Optional[metrics.MetricValue]
    is_full_split: bool
    prompt: str = ""  # the prompt this table was produced for

    def expected_labels(self) -> list:
        return [r.EXPECTED_OUTPUT for r in self.rows]

    def parsed_labels(self) -> list:
        return [r.PARSED_OUTPUT for r in self.rows]

    def failed_rows(self) -> list:
        """Rows eligible for recovery: a recorded inference error, or empty raw text."""
        return [
            r for r in self.rows
            if (r.INFERENCE_ERROR is not None and r.INFERENCE_ERROR != "") or not r.RAW_OUTPUT.strip()
        ]

    def confusion(self) -> metrics.ConfusionMatrix:
        return metrics.confusion_matrix(self.expected_labels(), self.parsed_labels())

    def bootstrap_ci(self, metric_name=None, resamples=1000, confidence=0.95,
                     rng_seed=0, positive_class=None):
        name = metric_name if metric_name is not None else self.primary_metric.name
        return metrics.bootstrap_ci(
            self.expected_labels(), self.parsed_labels(), name,
            resamples=resamples, confidence=confidence, rng_seed=rng_seed,
            positive_class=positive_class,
        )

    def to_frame(self, view: str, input_columns: Sequence[str] = ()) -> pd.DataFrame:
        """Sandbox-facing snapshots. 'full' = inputs + the four structural columns;
        'redacted' = exactly EXPECTED_OUTPUT / PARSED_OUTPUT / IS_CORRECT."""
        index = [r.row_index for r in self.rows]
        if view == "redacted":
            data = {
                "EXPECTED_OUTPUT": self.expected_labels(),
                "PARSED_OUTPUT": self.parsed_labels(),
                "IS_CORRECT": [r.IS_CORRECT for r in self.rows],
            }
            return pd.DataFrame(data, index=index)
        if view == "full":
            data = {col: [r.input_snapshot.get(col, "") for r in self.rows] for col in input_columns}
            data["EXPECTED_OUTPUT"] = self.expected_labels()
            data["PARSED_OUTPUT"] = self.parsed_labels()
            data["IS_CORRECT"] = [r.IS_CORRECT for r in self.rows]
            data["RAW_OUTPUT"] = [r.RAW_OUTPUT for r in self.rows]
            return pd.DataFrame(data, index=index)
        raise ValueError(f"unknown view {view!r}")

    def export_csv(self, path: str, input_columns: Sequence[str] = ()) -> None:
        cols = ["row_index"] + list(input_columns) + [
            "EXPECTED_OUTPUT", "PARSED_OUTPUT", "IS_CORRECT",
            "RAW_OUTPUT", "INFERENCE_ERROR", "row_latency",
        ]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for r in self.rows:
                rec = {c: r.input_snapshot.get(c, "") for c in input_columns}
                rec.update(
                    row_index=r.row_index,
                    EXPECTED_OUTPUT=r.EXPECTED_OUTPUT,
                    PARSED_OUTPUT=r.PARSED_OUTPUT,
                    IS_CORRECT="true" if r.IS_CORRECT else "false",
                    RAW_OUTPUT=r.RAW_OUTPUT,
                    INFERENCE_ERROR=r.INFERENCE_ERROR or "",
                    row_latency=repr(r.row_latency),
                )
                writer.writerow(rec)


def normalize_label(text: str, mode: str) -> str:
    if mode == "none":
        return text
    if mode == "trim":
        return text.strip()
    return text.strip().casefold()


def parse_prediction(raw: str, spec: ParserSpec) -> str:
    """Total function from raw model text to a label; sentinel on any failure.

    regex_capture takes the first match, tag_extract the last, exact_line the
    first non-empty line (optionally required to fully match the pattern).
    """
    if raw is None:
        return PARSE_FAILURE
    if spec.kind in ("regex_capture", "tag_extract"):
        found = list(re.finditer(spec.pattern, raw))
        if not found:
            return PARSE_FAILURE
        match = found[0] if spec.kind == "regex_capture" else found[-1]
        out = match.group(1) if match.re.groups else match.group(0)
    else:
        lines = [line.strip() for line in raw.splitlines() if line.strip()]
        if not lines:
            return PARSE_FAILURE
        out = lines[0]
        if spec.pattern and re.fullmatch(spec.pattern, out) is None:
            return PARSE_FAILURE
    out = normalize_label(out, spec.normalize)
    return out if out else PARSE_FAILURE


def success_predicate(response: ModelResponse) -> bool:
    """True iff no provider error and content is non-empty after trimming."""
    return response.provider_error is None and response.content.strip() != ""


def render_row_user_text(row: dict, config: TaskConfig) -> str:
    """One 'name: value' line per configured input column, in order."""
    return "\n".join(f"{col}: {row[col]}" for col in config.input_columns)


def _call_with_cap(gateway: ModelGateway, request: ModelRequest, config: TaskConfig):
    """Run the (retrying) model call on a throwaway daemon thread and abandon it
    at the per-row cap. Returns None on timeout."""
    holder: list = []

    def work():
        holder.append(
            gateway.complete_with_retry(
                request, config.budgets.max_retries, config.budgets.retry_base_delay
            )
        )

    thread = threading.Thread(target=work, daemon=True)
    thread.start()
    thread.join(config.budgets.per_row_timeout)
    return holder[0] if holder else None


def _score_row(prompt, row_index, row, config, gateway, clock) -> EvalRow:
    started = clock.now()
    request = ModelRequest(
        model_alias=config.task_model_alias,
        system_text=prompt,
        user_text=render_row_user_text(row, config),
        temperature=0.0,
        max_tokens=TASK_MODEL_MAX_TOKENS,
    )
    response = _call_with_cap(gateway, request, config)
    expected = normalize_label(row[config.gt_column], config.parser_spec.normalize)
    snapshot = {col: row[col] for col in config.input_columns}
    if response is None:
        return EvalRow(
            row_index=row_index,
            input_snapshot=snapshot,
            EXPECTED_OUTPUT=expected,
            PARSED_OUTPUT=PARSE_FAILURE,
            IS_CORRECT=False,
            RAW_OUTPUT="",
            INFERENCE_ERROR=f"per_row_timeout after {config.budgets.per_row_timeout}s",
            row_latency=clock.now() - started,
        )
    if success_predicate(response):
        parsed = parse_prediction(response.content, config.parser_spec)
    else:
        parsed = PARSE_FAILURE
    return EvalRow(
        row_index=row_index,
        input_snapshot=snapshot,
        EXPECTED_OUTPUT=expected,
        PARSED_OUTPUT=parsed,
        IS_CORRECT=parsed == expected,
        RAW_OUTPUT=response.content,
        INFERENCE_ERROR=response.provider_error,
        row_latency=clock.now() - started,
    )


def _table_metrics(rows: list, config: TaskConfig):
    expected = [r.EXPECTED_OUTPUT for r in rows]
    parsed = [r.PARSED_OUTPUT for r in rows]
    primary = metrics.compute_metric(config.metric_name, expected, parsed)
    guard = None
    if config.guard is not None:
        guard = metrics.compute_metric(
            config.guard.guard_metric_name, expected, parsed,
            positive_class=config.guard.positive_class,
        )
    return primary, guard


def evaluate_prompt(
    prompt: str,
    split: DatasetSplit,
    subset: Optional[Sequence[int]],
    config: TaskConfig,
    gateway: ModelGateway,
    clock=None,
) -> EvalTable:
    """One EvalRow per included row, fanned out over the worker pool.

    Output is independent of worker scheduling: rows are keyed and sorted by
    their index within the split.
    """
    clock = clock if clock is not None else SystemClock()
    if len(split) == 0:
        raise EvaluationError(f"{split.role} split is empty")
    if subset is not None:
        indices = list(subset)
        if len(set(indices)) != len(indices):
            raise EvaluationError("subset indices must be distinct")
        bad = [i for i in indices if not 0 <= i < len(split)]
        if bad:
            raise EvaluationError(f"subset indices out of range for {split.role} split: {bad}")
        todo = [(i, split.rows[i]) for i in indices]
    else:
        todo = list(enumerate(split.rows))

    workers = min(config.budgets.eval_workers, len(todo))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        scored = list(
            pool.map(lambda item: _score_row(prompt, item[0], item[1], config, gateway, clock), todo)
        )
    rows = sorted(scored, key=lambda r: r.row_index)
    primary, guard = _table_metrics(rows, config)
    return EvalTable(
        rows=rows,
        split_role=split.role,
        subset=tuple(subset) if subset is not None else None,
        primary_metric=primary,
        guard_metric=guard,
        is_full_split=subset is None,
        prompt=prompt,
    )


def recover_failed_rows(
    table: EvalTable,
    split: DatasetSplit,
    config: TaskConfig,
    gateway: ModelGateway,
    clock=None,
) -> EvalTable:
    """Retry rows that hit provider errors or came back empty.

    Up to recovery_passes passes; each pass sleeps recovery_sleep first, then
    paces retries at recovery_qps (sleep before every retry except the first).
    Rows with legitimate non-empty answers are never re-queried. A table with
    nothing to recover is returned unchanged with zero backend calls.
    """
    clock = clock if clock is not None else SystemClock()
    failed = table.failed_rows()
    if not failed:
        return table
    by_index = {r.row_index: r for r in table.rows}
    pacing = 1.0 / config.budgets.recovery_qps
    for _ in range(config.budgets.recovery_passes):
        if not failed:
            break
        clock.sleep(config.budgets.recovery_sleep)
        for i, old in enumerate(failed):
            if i > 0:
                clock.sleep(pacing)
            fresh = _score_row(
                table.prompt, old.row_index, split.rows[old.row_index], config, gateway, clock
            )
            if (fresh.INFERENCE_ERROR is None or fresh.INFERENCE_ERROR == "") and fresh.RAW_OUTPUT.strip():
                by_index[old.row_index] = fresh
        failed = [
            r for r in by_index.values()
            if (r.INFERENCE_ERROR is not None and r.INFERENCE_ERROR != "") or not r.RAW_OUTPUT.strip()
        ]
    rows = sorted(by_index.values(), key=lambda r: r.row_index)
    primary, guard = _table_metrics(rows, config)
    return replace(
        table, rows=rows, primary_metric=primary, guard_metric=guard,
    )


def read_eval_table(path: str, config: TaskConfig, split_role: str = "valid") -> EvalTable:
    """Ingest an exported eval table. Accepts RAW_GENERATED_TEXT as an alternate
    name for the RAW_OUTPUT column."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise EvaluationError(f"{path} has no header row")
        fields = list(reader.fieldnames)
        raw_col = "RAW_OUTPUT" if "RAW_OUTPUT" in fields else "RAW_GENERATED_TEXT"
        if raw_col not in fields:
            raise EvaluationError(f"{path} has neither RAW_OUTPUT nor RAW_GENERATED_TEXT")
        required = {"row_index", "EXPECTED_OUTPUT", "PARSED_OUTPUT", "IS_CORRECT"}
        missing = sorted(required - set(fields))
        if missing:
            raise EvaluationError(f"{path} is missing column(s): {missing}")
        rows = []
        for rec in reader:
            rows.append(
                EvalRow(
                    row_index=int(rec["row_index"]),
                    input_snapshot={c: rec.get(c, "") for c in config.input_columns},
                    EXPECTED_OUTPUT=rec["EXPECTED_OUTPUT"],
                    PARSED_OUTPUT=rec["PARSED_OUTPUT"],
                    IS_CORRECT=rec["IS_CORRECT"].strip().lower() == "true",
                    RAW_OUTPUT=rec[raw_col],
                    INFERENCE_ERROR=rec.get("INFERENCE_ERROR") or None,
                    row_latency=float(rec.get("row_latency") or 0.0),
                )
            )
    if not rows:
        raise EvaluationError(f"{path} has no data rows")
    rows.sort(key=lambda r: r.row_index)
    primary, guard = _table_metrics(rows, config)
    return EvalTable(
        rows=rows, split_role=split_role, subset=None,
        primary_metric=primary, guard_metric=guard, is_full_split=True,
    )
