"""Domain types, task configuration, dataset splitting, and the append-only run trace."""
from __future__ import annotations

import csv
import json
import re
import threading
import time
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional

# Reserved parsed-label value for unparseable, empty, or timed-out model output.
# Metrics treat it as an ordinary label, so it is wrong for every expected class.
PARSE_FAILURE = "<PARSE_FAILURE>"

# Sentinel for a guard floor resolved from the seed prompt's forced evaluation.
AUTO = "auto"

METRIC_NAMES = ("kappa", "macro_f1", "accuracy")
GUARD_METRIC_NAMES = ("precision", "recall", "accuracy", "macro_f1")
PARSER_KINDS = ("regex_capture", "tag_extract", "exact_line")
NORMALIZE_MODES = ("trim", "casefold", "none")
TRACE_KINDS = (
    "tool_call",
    "eval_result",
    "rollback",
    "guard_rollback",
    "accept_best",
    "budget_charge",
    "finish",
    "llm_call",
    "protocol_forfeit",
)

_MASK64 = (1 << 64) - 1


class PromptOptError(Exception):
    """Base class for all package errors."""


class ConfigurationError(PromptOptError):
    pass


class ValidationError(ConfigurationError):
    pass


class SplitError(PromptOptError):
    pass


class TraceError(PromptOptError):
    pass


class MetricError(PromptOptError):
    pass


class EvaluationError(PromptOptError):
    pass


class RenderError(PromptOptError):
    pass


class ProtocolError(PromptOptError):
    pass


class SandboxError(PromptOptError):
    pass


class GenerationError(PromptOptError):
    pass


# ─── Clocks ──────────────────────────────────────────────────────────────────


class SystemClock:
    """Real time. The default everywhere."""

    def now(self) -> float:
        return time.time()

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


class LogicalClock:
    """Deterministic clock: now() is a constant, sleep() is free.

    Used for byte-reproducible runs; timestamps and durations collapse to the
    epoch constant so output files compare equal across executions and across
    worker counts.
    """

    def __init__(self, epoch: float = 0.0):
        self.epoch = epoch

    def now(self) -> float:
        return self.epoch

    def sleep(self, seconds: float) -> None:
        return None


Clock = SystemClock  # structural alias for annotations; anything with now()/sleep()


# ─── Task configuration ──────────────────────────────────────────────────────


@dataclass(frozen=True)
class ParserSpec:
    """How to pull a label out of raw model text.

    kind:
      regex_capture - first match; group 1 if the pattern has groups, else group 0
      tag_extract   - last match in the text (final answers tend to come last)
      exact_line    - first non-empty line; if pattern is non-empty the line
                      must fully match it
    normalize: trim strips whitespace; casefold strips then casefolds; none is verbatim.
    """

    kind: str = "regex_capture"
    pattern: str = ""
    normalize: str = "casefold"

    def __post_init__(self):
        if self.kind not in PARSER_KINDS:
            raise ValidationError(f"parser.kind must be one of {PARSER_KINDS}, got {self.kind!r}")
        if self.normalize not in NORMALIZE_MODES:
            raise ValidationError(f"parser.normalize must be one of {NORMALIZE_MODES}, got {self.normalize!r}")
        try:
            re.compile(self.pattern)
        except re.error as exc:
            raise ValidationError(f"parser.pattern does not compile: {exc}") from exc


@dataclass(frozen=True)
class GuardSpec:
    """Opt-in secondary metric with a floor rewrites must not sink below."""

    guard_metric_name: str
    floor_tau: object = AUTO  # float in [0,1], or AUTO to resolve at the forced initial eval
    positive_class: Optional[str] = None

    def __post_init__(self):
        if self.guard_metric_name not in GUARD_METRIC_NAMES:
            raise ValidationError(
                f"guard.guard_metric_name must be one of {GUARD_METRIC_NAMES}, got {self.guard_metric_name!r}"
            )
        if self.floor_tau != AUTO:
            if not isinstance(self.floor_tau, (int, float)) or not 0.0 <= float(self.floor_tau) <= 1.0:
                raise ValidationError(f"guard.floor_tau must be in [0,1] or {AUTO!r}, got {self.floor_tau!r}")
        if self.guard_metric_name in ("precision", "recall") and not self.positive_class:
            raise ValidationError("guard.positive_class is required for precision/recall guards")


@dataclass(frozen=True)
class BudgetSpec:
    """Loop budgets plus harness knobs (eval pool, retries, sandbox caps, recovery pacing)."""

    max_eval_calls: int = 20
    max_steps: Optional[int] = None  # defaults to 5x max_eval_calls
    eval_workers: int = 6
    max_retries: int = 3
    per_row_timeout: float = 60.0
    sandbox_wall_clock: float = 60.0
    sandbox_memory_cap: int = 512 * 1024 * 1024
    recovery_passes: int = 3
    recovery_sleep: float = 30.0
    recovery_qps: float = 1.0
    retry_base_delay: float = 1.0

    def __post_init__(self):
        if self.max_steps is None:
            object.__setattr__(self, "max_steps", 5 * self.max_eval_calls)
        for name in ("max_eval_calls", "max_steps", "eval_workers"):
            if getattr(self, name) < 1:
                raise ValidationError(f"budgets.{name} must be a positive integer")
        if self.max_retries < 0:
            raise ValidationError("budgets.max_retries must be >= 0")
        for name in ("per_row_timeout", "sandbox_wall_clock", "recovery_qps"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"budgets.{name} must be > 0")
        if self.sandbox_memory_cap < 1:
            raise ValidationError("budgets.sandbox_memory_cap must be positive")


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.6
    rng_seed: int = 42
    mode: str = "random_row_shuffle"

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValidationError("split.train_fraction must be in (0,1)")
        if self.mode != "random_row_shuffle":
            raise ValidationError(f"split.mode must be 'random_row_shuffle', got {self.mode!r}")


@dataclass(frozen=True)
class TaskConfig:
    task_name: str
    input_columns: tuple
    gt_column: str
    metric_name: str
    parser_spec: ParserSpec
    budgets: BudgetSpec = field(default_factory=BudgetSpec)
    split_spec: SplitSpec = field(default_factory=SplitSpec)
    gt_reason_column: Optional[str] = None
    task_description: str = ""
    policy_context: Optional[str] = None
    target_metric: float = 1.0
    guard: Optional[GuardSpec] = None
    task_model_alias: str = "task_model"
    agent_model_alias: str = "agent_model"
    brain_variant: str = "FULL"
    script_tool_name: str = "script"
    history_token_budget: int = 24000
    chars_per_token: float = 4.0
    agent_temperature: float = 0.0
    agent_max_tokens: int = 2000
    valid_labels_mode: str = "per_row"  # or "histogram" (strict aggregate-only mode)

    def __post_init__(self):
        object.__setattr__(self, "input_columns", tuple(self.input_columns))
        if not self.input_columns:
            raise ValidationError("input_columns must be non-empty")
        if self.gt_column in self.input_columns:
            raise ValidationError(f"gt_column {self.gt_column!r} must not appear in input_columns")
        if self.metric_name not in METRIC_NAMES:
            raise ValidationError(f"metric_name must be one of {METRIC_NAMES}, got {self.metric_name!r}")
        lo = -1.0 if self.metric_name == "kappa" else 0.0
        if not lo <= self.target_metric <= 1.0:
            raise ValidationError(
                f"target_metric {self.target_metric} outside [{lo}, 1.0] for metric {self.metric_name}"
            )
        if self.valid_labels_mode not in ("per_row", "histogram"):
            raise ValidationError("valid_labels_mode must be 'per_row' or 'histogram'")
        if self.brain_variant not in ("FULL", "TRAIN_ONLY", "NO_PYTHON", "TRAIN_ONLY_NO_PYTHON"):
            raise ValidationError(f"unknown brain_variant {self.brain_variant!r}")


def _build_config(raw: dict, origin: str) -> TaskConfig:
    for key in ("task_name", "input_columns", "gt_column", "metric_name", "parser"):
        if key not in raw:
            raise ConfigurationError(f"{origin}: missing required field {key!r}")
    known = {
        "task_name", "input_columns", "gt_column", "gt_reason_column", "task_description",
        "policy_context", "metric_name", "target_metric", "guard", "parser", "budgets",
        "split", "task_model_alias", "agent_model_alias", "brain_variant", "script_tool_name",
        "history_token_budget", "chars_per_token", "agent_temperature", "agent_max_tokens",
        "valid_labels_mode",
    }
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"{origin}: unknown field(s) {sorted(unknown)}")
    try:
        parser = ParserSpec(**raw["parser"])
        budgets = BudgetSpec(**raw.get("budgets", {}))
        split = SplitSpec(**raw.get("split", {}))
        guard = GuardSpec(**raw["guard"]) if raw.get("guard") is not None else None
    except TypeError as exc:
        raise ConfigurationError(f"{origin}: {exc}") from exc
    kwargs = {
        k: raw[k]
        for k in known - {"parser", "budgets", "split", "guard", "input_columns"}
        if k in raw
    }
    return TaskConfig(
        input_columns=tuple(raw["input_columns"]),
        parser_spec=parser,
        budgets=budgets,
        split_spec=split,
        guard=guard,
        **kwargs,
    )


def load_task_config(path: str) -> TaskConfig:
    """Load and validate a JSON task config; defaults filled, AUTO guard floor left unresolved."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config file {path} must contain a JSON object")
    return _build_config(raw, origin=path)


def task_config_to_dict(config: TaskConfig) -> dict:
    """Inverse of load_task_config: a dict that parses back to an equal TaskConfig."""
    d = asdict(config)
    d["input_columns"] = list(config.input_columns)
    d["parser"] = d.pop("parser_spec")
    d["budgets"] = d.pop("budgets")
    d["split"] = d.pop("split_spec")
    if d["guard"] is None:
        d.pop("guard")
    return d


def save_task_config(config: TaskConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(task_config_to_dict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")


def check_dataset_columns(config: TaskConfig, rows: list) -> None:
    """Raise ConfigurationError if any configured column is missing from the bound dataset."""
    if not rows:
        raise ConfigurationError("dataset is empty")
    present = set(rows[0].keys())
    needed = set(config.input_columns) | {config.gt_column}
    if config.gt_reason_column:
        needed.add(config.gt_reason_column)
    missing = sorted(needed - present)
    if missing:
        raise ConfigurationError(f"dataset is missing configured column(s): {missing}")


# ─── Datasets and splitting ──────────────────────────────────────────────────


@dataclass(frozen=True)
class DatasetSplit:
    """An ordered slice of the dataset. rows are column-keyed records; order is stable."""

    rows: tuple
    role: str  # "train" or "valid"
    source_indices: tuple = ()

    def __len__(self):
        return len(self.rows)


def load_dataset(path: str) -> list:
    """Read a UTF-8 delimited text file with a header row into a list of dict rows."""
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise ConfigurationError(f"dataset file {path} has no header row")
            rows = [dict(r) for r in reader]
    except FileNotFoundError as exc:
        raise ConfigurationError(f"dataset file not found: {path}") from exc
    if not rows:
        raise ConfigurationError(f"dataset file {path} has no data rows")
    return rows


def write_dataset(rows: list, path: str, columns: Optional[list] = None) -> None:
    cols = columns if columns is not None else list(rows[0].keys())
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        writer.writerows(rows)


def _splitmix64(seed: int) -> Callable[[], int]:
    """splitmix64 stream; the package's one documented shuffle PRNG."""
    state = seed & _MASK64

    def next_u64() -> int:
        nonlocal state
        state = (state + 0x9E3779B97F4A7C15) & _MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    return next_u64


def shuffled_indices(n: int, seed: int) -> list:
    """Fisher-Yates over range(n), j = next_u64() % (i+1), i descending. Pure."""
    nxt = _splitmix64(seed)
    idx = list(range(n))
    for i in range(n - 1, 0, -1):
        j = nxt() % (i + 1)
        idx[i], idx[j] = idx[j], idx[i]
    return idx


def split_dataset(table: list, spec: SplitSpec):
    """Deterministic random split. Returns (train, valid) DatasetSplits.

    Membership: the first round(train_fraction * N) entries of the shuffled
    index list go to train. Each split keeps rows in ascending original order.
    """
    n = len(table)
    if n < 2:
        raise SplitError(f"need at least 2 rows to split, got {n}")
    k = int(round(spec.train_fraction * n))
    if k < 1 or k >= n:
        raise SplitError(
            f"train_fraction {spec.train_fraction} leaves an empty split for {n} rows"
        )
    order = shuffled_indices(n, spec.rng_seed)
    train_idx = tuple(sorted(order[:k]))
    valid_idx = tuple(sorted(order[k:]))
    train = DatasetSplit(rows=tuple(table[i] for i in train_idx), role="train", source_indices=train_idx)
    valid = DatasetSplit(rows=tuple(table[i] for i in valid_idx), role="valid", source_indices=valid_idx)
    return train, valid


# ─── Run trace ───────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class TraceEvent:
    step_index: int
    wall_time: float
    kind: str
    payload: dict

    def __post_init__(self):
        if self.kind not in TRACE_KINDS:
            raise TraceError(f"unknown trace kind {self.kind!r}")


class RunTrace:
    """Append-only event log, one JSON line per event, flushed per event.

    Appends are serialized through a lock; step_index must be non-decreasing.
    """

    def __init__(self, path: Optional[str] = None, clock=None):
        self.path = path
        self.clock = clock if clock is not None else SystemClock()
        self.events: list = []
        self._last_step = -1
        self._lock = threading.Lock()
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def append(self, event: TraceEvent) -> None:
        if event.step_index < self._last_step:
            raise TraceError(
                f"out-of-order step_index {event.step_index} after {self._last_step}"
            )
        with self._lock:
            self._last_step = event.step_index
            self.events.append(event)
            if self._fh is not None:
                line = json.dumps(
                    {"step_index": event.step_index, "wall_time": event.wall_time,
                     "kind": event.kind, "payload": event.payload},
                    sort_keys=True,
                )
                self._fh.write(line + "\n")
                self._fh.flush()

    def record(self, step_index: int, kind: str, payload: dict) -> TraceEvent:
        event = TraceEvent(step_index=step_index, wall_time=self.clock.now(), kind=kind, payload=payload)
        self.append(event)
        return event

    def count(self, kind: str) -> int:
        return sum(1 for e in self.events if e.kind == kind)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def append_trace(trace: RunTrace, event: TraceEvent) -> RunTrace:
    """Append one event; persisted before return. Returns the same trace."""
    trace.append(event)
    return trace


def load_trace(path: str) -> list:
    """Read a JSONL trace back into TraceEvent objects."""
    events = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                events.append(TraceEvent(d["step_index"], d["wall_time"], d["kind"], d["payload"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise TraceError(f"{path}:{line_no}: corrupt trace line ({exc})") from exc
    return events
