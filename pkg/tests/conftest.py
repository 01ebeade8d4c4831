"""Shared fixtures: a recording clock and a tiny offline task factory."""
from __future__ import annotations

from types import SimpleNamespace

import pytest

from promptopt.core import (
    BudgetSpec,
    GuardSpec,
    LogicalClock,
    ParserSpec,
    SplitSpec,
    TaskConfig,
    split_dataset,
)
from promptopt.gateway import ModelGateway, StubBackend, StubModelSpec, StubRule


class FakeClock:
    """Advancing fake clock that records every sleep it performs."""

    def __init__(self, start: float = 0.0):
        self.current = start
        self.sleeps: list[float] = []

    def now(self) -> float:
        return self.current

    def sleep(self, seconds: float) -> None:
        self.sleeps.append(seconds)
        self.current += seconds


@pytest.fixture
def fake_clock() -> FakeClock:
    return FakeClock()


def build_tiny_task(
    n: int = 12,
    classes: tuple[str, ...] = ("ok", "bad", "meh"),
    metric: str = "accuracy",
    guard: GuardSpec | None = None,
    train_fraction: float = 0.5,
    split_seed: int = 0,
    **budget_overrides,
) -> SimpleNamespace:
    """A tiny offline task whose stub model echoes the gold label for each row.

    Rows carry a unique `rid` token so stub rules and fault selectors can target
    individual rows. Returns config, the raw table, both splits, the oracle stub
    rules, and a make_gateway helper that builds fresh backends (fresh fault
    counters) per call.
    """
    table = [
        {"rid": f"r{i:03d}", "text": f"case number {i}", "label": classes[i % len(classes)]}
        for i in range(n)
    ]
    budgets = {"max_eval_calls": 20, "eval_workers": 2, "max_retries": 0, **budget_overrides}
    config = TaskConfig(
        task_name="tiny",
        input_columns=("rid", "text"),
        gt_column="label",
        metric_name=metric,
        parser_spec=ParserSpec(kind="regex_capture", pattern=r"answer:\s*([A-Za-z_]+)", normalize="casefold"),
        budgets=BudgetSpec(**budgets),
        split_spec=SplitSpec(train_fraction=train_fraction, rng_seed=split_seed),
        guard=guard,
        task_description="Judge each tiny case.",
    )
    train, valid = split_dataset(table, config.split_spec)
    oracle_rules = tuple(
        StubRule(output=f"answer: {row['label']}", user_contains=f"rid: {row['rid']}\n")
        for row in table
    )

    def make_gateway(rules=oracle_rules, default_output="no answer", faults=(), clock=None):
        backend = StubBackend(StubModelSpec(rules=rules, default_output=default_output, faults=tuple(faults)))
        return ModelGateway({"task_model": backend, "agent_model": backend}, clock=clock), backend

    return SimpleNamespace(
        config=config,
        table=table,
        train=train,
        valid=valid,
        oracle_rules=oracle_rules,
        make_gateway=make_gateway,
        clock=LogicalClock(),
    )


@pytest.fixture
def tiny_task():
    return build_tiny_task
