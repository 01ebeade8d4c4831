"""Metric-guarded, budget-bounded agentic prompt optimization."""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    AUTO,
    PARSE_FAILURE,
    BudgetSpec,
    ConfigurationError,
    DatasetSplit,
    GuardSpec,
    LogicalClock,
    ParserSpec,
    PromptOptError,
    SplitSpec,
    SystemClock,
    TaskConfig,
    TraceEvent,
    load_task_config,
    split_dataset,
)
