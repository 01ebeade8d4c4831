"""Deterministic synthetic judge tasks driven by a rule-keyed stub model.

The generator plants one evidence phrase per class in each transcript and
wires a stub task model that mispredicts chosen "confusable" class pairs
until the prompt contains that pair's rubric marker. Unlocking markers one
by one therefore walks the metric upward along a path that can be computed
exactly by enumerating stub predictions, which is what makes end-to-end
optimizer runs on these tasks assertable to the last bit.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .core import (
    BudgetSpec,
    GenerationError,
    ParserSpec,
    SplitSpec,
    TaskConfig,
    ValidationError,
    split_dataset,
)
from .evaluator import normalize_label, parse_prediction, render_row_user_text
from .gateway import ModelRequest, StubModelSpec, StubRule
from .metrics import cohen_kappa

# Score|reason-category labels, majority flavor first. Specs with more
# classes than the pool fall back to numbered categories.
_LABEL_POOL = (
    "1|missing_tool_no_retrieval",
    "1|missing_tool_wrong_type",
    "2|partial_missing_tool",
    "3|no_missing_tools_complete",
    "3|no_missing_tools_redundant",
    "2|partial_wrong_arguments",
)

# One tell-tale phrase per class, planted verbatim in the transcript. The
# stub keys row behavior on these, so no phrase may contain another.
_FINGERPRINT_POOL = (
    "no retrieval call appears anywhere in the trace",
    "a retrieval tool fired but the wrong one for this query",
    "only part of the needed memory was fetched before answering",
    "every needed tool fired and the answer is grounded",
    "the right tools fired plus an unnecessary duplicate call",
    "tool arguments disagree with what the user actually asked",
)

_QUERY_POOL = (
    "where did we land on the venue last week",
    "what did I say my dietary restrictions were",
    "pull up the budget figure we agreed on",
    "who introduced me to the vendor contact",
    "when is the follow-up call we scheduled",
    "what was the name of that restaurant I liked",
    "remind me which option I rejected and why",
    "what deadline did we move in yesterday's thread",
)

OUTPUT_PATTERN = r"label:\s*([0-9]+\|[a-z_0-9]+)"


def class_labels(n_classes: int) -> tuple:
    labels = list(_LABEL_POOL[:n_classes])
    for i in range(len(labels), n_classes):
        labels.append(f"{i}|extra_category_{i}")
    return tuple(labels)


def class_fingerprints(n_classes: int) -> tuple:
    prints = list(_FINGERPRINT_POOL[:n_classes])
    for i in range(len(prints), n_classes):
        prints.append(f"trace pattern pclass_{i} is present")
    return tuple(prints)


def default_marker(source: int, target: int) -> str:
    # angle-bracket framing keeps markers from being substrings of each other
    return f"<rule {source}->{target}>"


@dataclass(frozen=True)
class SynthTaskSpec:
    """Shape of a synthetic confusion-collapse task.

    confusable_pairs are ordered (source, target): rows of the source class
    are predicted as the target class until the prompt contains that pair's
    marker. A class may be the source of at most one pair.
    """

    n_classes: int
    n_rows: int
    class_balance: tuple
    confusable_pairs: tuple
    rule_markers: Optional[dict] = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValidationError("n_classes must be >= 2")
        object.__setattr__(self, "class_balance", tuple(int(c) for c in self.class_balance))
        if len(self.class_balance) != self.n_classes:
            raise ValidationError(
                f"class_balance has {len(self.class_balance)} entries for {self.n_classes} classes"
            )
        pairs = tuple((int(a), int(b)) for a, b in self.confusable_pairs)
        object.__setattr__(self, "confusable_pairs", pairs)
        sources = [a for a, _ in pairs]
        for a, b in pairs:
            if not (0 <= a < self.n_classes and 0 <= b < self.n_classes):
                raise ValidationError(f"confusable pair ({a}, {b}) names a class that does not exist")
            if a == b:
                raise ValidationError(f"confusable pair ({a}, {b}) collapses a class into itself")
        if len(set(sources)) != len(sources):
            raise ValidationError("each class may be the source of at most one confusable pair")
        markers = self.rule_markers
        if markers is None:
            markers = {pair: default_marker(*pair) for pair in pairs}
        else:
            markers = {(int(a), int(b)): str(m) for (a, b), m in markers.items()}
            if set(markers) != set(pairs):
                raise ValidationError("rule_markers keys must be exactly the confusable pairs")
        values = list(markers.values())
        if len(set(values)) != len(values):
            raise ValidationError("rule markers must be distinct")
        for m in values:
            if not m:
                raise ValidationError("rule markers must be non-empty")
            if any(m != other and m in other for other in values):
                raise ValidationError(f"marker {m!r} is a substring of another marker")
        object.__setattr__(self, "rule_markers", markers)

    @property
    def collapse_target(self) -> dict:
        return {a: b for a, b in self.confusable_pairs}


# The packaged 5-class task: 125 rows, majority class 0, two pairs that
# collapse into the majority and one mutually-confused minority pair.
# class_balance and rng_seed are tuned so the seed prompt's valid-split
# kappa sits near 0.20 (see tests for the frozen value).
CMA_SHAPED_SPEC = SynthTaskSpec(
    n_classes=5,
    n_rows=125,
    class_balance=(75, 12, 13, 12, 13),
    confusable_pairs=((1, 0), (2, 0), (3, 4), (4, 3)),
    rng_seed=2,
)


def _check_feasible(spec: SynthTaskSpec) -> None:
    if spec.n_classes > spec.n_rows:
        raise GenerationError(
            f"{spec.n_classes} classes cannot be populated with {spec.n_rows} rows"
        )
    if any(c < 1 for c in spec.class_balance):
        raise GenerationError("class_balance must give every class at least one row")
    if sum(spec.class_balance) != spec.n_rows:
        raise GenerationError(
            f"class_balance sums to {sum(spec.class_balance)}, expected n_rows={spec.n_rows}"
        )


def _build_table(spec: SynthTaskSpec) -> list:
    """Shuffled row dicts: rid, transcript (with the class fingerprint), label."""
    _check_feasible(spec)
    labels = class_labels(spec.n_classes)
    prints = class_fingerprints(spec.n_classes)
    rng = random.Random(spec.rng_seed)
    membership = [c for c in range(spec.n_classes) for _ in range(spec.class_balance[c])]
    rng.shuffle(membership)
    table = []
    for i, c in enumerate(membership):
        query = rng.choice(_QUERY_POOL)
        table.append({
            "rid": f"row{i:03d}",
            "transcript": f'user: "{query}" -- outcome: {prints[c]}',
            "label": labels[c],
        })
    return table


def build_task_config(spec: SynthTaskSpec, task_name: Optional[str] = None) -> TaskConfig:
    return TaskConfig(
        task_name=task_name or f"synth_confusion_{spec.n_classes}c_{spec.n_rows}r",
        input_columns=("rid", "transcript"),
        gt_column="label",
        metric_name="kappa",
        parser_spec=ParserSpec(kind="regex_capture", pattern=OUTPUT_PATTERN, normalize="casefold"),
        budgets=BudgetSpec(max_retries=0),
        split_spec=SplitSpec(train_fraction=0.6, rng_seed=42),
        task_description=(
            "Score whether a conversational memory agent invoked the correct "
            "retrieval tools for the user's query."
        ),
    )


def build_stub_spec(spec: SynthTaskSpec) -> StubModelSpec:
    """Unlock rules first (marker in prompt wins), then per-class base rules."""
    labels = class_labels(spec.n_classes)
    prints = class_fingerprints(spec.n_classes)
    target = spec.collapse_target
    rules = []
    for (src, tgt), marker in spec.rule_markers.items():
        rules.append(StubRule(
            output=f"label: {labels[src]}",
            prompt_contains=marker,
            user_contains=prints[src],
        ))
    for c in range(spec.n_classes):
        predicted = labels[target[c]] if c in target else labels[c]
        rules.append(StubRule(output=f"label: {predicted}", user_contains=prints[c]))
    return StubModelSpec(rules=tuple(rules), default_output="label: unscored")


def generate_task(spec: SynthTaskSpec, task_name: Optional[str] = None):
    """Returns (train, valid, config, stub_model_spec), all pure in spec."""
    table = _build_table(spec)
    config = build_task_config(spec, task_name)
    train, valid = split_dataset(table, config.split_spec)
    return train, valid, config, build_stub_spec(spec)


def seed_prompt_for(spec: SynthTaskSpec) -> str:
    labels = class_labels(spec.n_classes)
    lines = [
        "You review one transcript of a memory-agent interaction and score the",
        "agent's retrieval-tool selection. Pick exactly one label:",
    ]
    lines += [f"  - {label}" for label in labels]
    lines += ["", "Answer with a single line in the form: label: <score|reason-category>"]
    return "\n".join(lines)


def _stub_predict(stub: StubModelSpec, prompt: str, user_text: str) -> str:
    request = ModelRequest(model_alias="task_model", system_text=prompt, user_text=user_text)
    for rule in stub.rules:
        if rule.matches(request):
            return rule.output
    return stub.default_output


def enumerate_predictions(spec: SynthTaskSpec, prompt: str, rows: Sequence[dict],
                          config: Optional[TaskConfig] = None):
    """(expected, parsed) label lists for the stub on these rows, no model calls."""
    config = config or build_task_config(spec)
    stub = build_stub_spec(spec)
    expected, parsed = [], []
    for row in rows:
        expected.append(normalize_label(row[config.gt_column], config.parser_spec.normalize))
        raw = _stub_predict(stub, prompt, render_row_user_text(row, config))
        parsed.append(parse_prediction(raw, config.parser_spec))
    return expected, parsed


def expected_trajectory(spec: SynthTaskSpec, unlock_order: Sequence) -> list:
    """Valid-split kappa at the seed prompt, then after each cumulative unlock.

    This is the enumeration oracle end-to-end runs are compared against: it
    predicts every stub response directly from the rules, so an optimizer run
    that evaluates after appending each marker must land on these exact values.
    """
    pairs = [(int(a), int(b)) for a, b in unlock_order]
    for pair in pairs:
        if pair not in spec.rule_markers:
            raise ValidationError(f"unlock pair {pair} is not a configured confusable pair")
    _, valid, config, _ = generate_task(spec)
    prompt = seed_prompt_for(spec)
    kappas = []
    for i in range(len(pairs) + 1):
        unlocked = pairs[:i]
        text = prompt + "".join("\n" + spec.rule_markers[p] for p in unlocked)
        expected, parsed = enumerate_predictions(spec, text, valid.rows, config)
        kappas.append(cohen_kappa(expected, parsed).value)
    return kappas


def rubric_prompt(spec: SynthTaskSpec, pairs: Sequence) -> str:
    """Seed prompt plus one disambiguation line per unlocked pair, marker verbatim."""
    labels = class_labels(spec.n_classes)
    prints = class_fingerprints(spec.n_classes)
    text = seed_prompt_for(spec)
    if not pairs:
        return text
    lines = ["", "Disambiguation rules:"]
    for a, b in pairs:
        pair = (int(a), int(b))
        lines.append(
            f"- {spec.rule_markers[pair]} when {prints[pair[0]]}, "
            f"label it {labels[pair[0]]} rather than {labels[pair[1]]}."
        )
    return text + "\n".join(lines)


_ANALYSIS_SCRIPT = """\
cm = valid_eval_df.groupby(["EXPECTED_OUTPUT", "PARSED_OUTPUT"]).size().unstack(fill_value=0)
print(cm)
wrong = valid_eval_df[~valid_eval_df["IS_CORRECT"]]
if len(wrong):
    top = wrong.groupby(["EXPECTED_OUTPUT", "PARSED_OUTPUT"]).size().sort_values(ascending=False)
    pair = top.index[0]
    print("largest confused pair:", pair[0], "predicted as", pair[1], "x", int(top.iloc[0]))
else:
    print("no remaining confusions")
"""


def packaged_brain_program(spec: SynthTaskSpec, unlock_order: Optional[Sequence] = None) -> list:
    """Scripted-brain action list: per pair, inspect the confusion matrix, then
    rewrite the rubric with that pair's marker and re-evaluate the valid split."""
    pairs = list(unlock_order) if unlock_order is not None else list(spec.confusable_pairs)
    actions = []
    for i in range(len(pairs)):
        actions.append({"tool": "script", "args": {"code": _ANALYSIS_SCRIPT},
                        "thinking": "look for the largest remaining confused pair"})
        actions.append({"tool": "set_prompt",
                        "args": {"content": rubric_prompt(spec, pairs[:i + 1])}})
        actions.append({"tool": "evaluate", "args": {"split": "valid"}})
    actions.append({"tool": "finish",
                    "args": {"reason": "every confusable pair has a disambiguation rule"}})
    return actions


# ── label-rule contradiction variant ─────────────────────────────────────────


@dataclass(frozen=True)
class ContradictionSpec:
    """Plants a feature token that flips the gold label against the class
    fingerprint, so only a group-by over the eval table reveals the rule."""

    base: SynthTaskSpec
    feature_token: str = "relocation_note_attached"
    source_class: int = 0
    flipped_class: int = 1
    n_flipped: int = 10

    def __post_init__(self):
        n = self.base.n_classes
        if not (0 <= self.source_class < n and 0 <= self.flipped_class < n):
            raise ValidationError("contradiction classes must exist in the base spec")
        if self.source_class == self.flipped_class:
            raise ValidationError("flipped_class must differ from source_class")
        if not self.feature_token:
            raise ValidationError("feature_token must be non-empty")
        reserved = list(class_fingerprints(n)) + list(self.base.rule_markers.values())
        if any(self.feature_token in text or text in self.feature_token for text in reserved):
            raise ValidationError("feature_token collides with a fingerprint or marker")
        if self.n_flipped < 1:
            raise ValidationError("n_flipped must be >= 1")


def generate_contradiction_task(cspec: ContradictionSpec, task_name: Optional[str] = None):
    """Like generate_task, but the first n_flipped source-class rows carry the
    feature token and a flipped gold label. The stub keeps predicting by
    fingerprint until the prompt itself mentions the token."""
    spec = cspec.base
    if cspec.n_flipped > spec.class_balance[cspec.source_class]:
        raise GenerationError(
            f"cannot flip {cspec.n_flipped} rows: class {cspec.source_class} "
            f"has only {spec.class_balance[cspec.source_class]}"
        )
    labels = class_labels(spec.n_classes)
    prints = class_fingerprints(spec.n_classes)
    table = _build_table(spec)
    flipped = 0
    for row in table:
        if flipped == cspec.n_flipped:
            break
        if row["label"] == labels[cspec.source_class]:
            row["transcript"] += f" [{cspec.feature_token}]"
            row["label"] = labels[cspec.flipped_class]
            flipped += 1
    config = build_task_config(
        spec, task_name or f"synth_contradiction_{spec.n_classes}c_{spec.n_rows}r"
    )
    train, valid = split_dataset(table, config.split_spec)
    stub = build_stub_spec(spec)
    unlock = StubRule(
        output=f"label: {labels[cspec.flipped_class]}",
        prompt_contains=cspec.feature_token,
        user_contains=cspec.feature_token,
    )
    stub = StubModelSpec(rules=(unlock,) + stub.rules, default_output=stub.default_output)
    return train, valid, config, stub


# ── spec (de)serialization for the CLI ───────────────────────────────────────


def synth_spec_to_dict(spec: SynthTaskSpec) -> dict:
    return {
        "n_classes": spec.n_classes,
        "n_rows": spec.n_rows,
        "class_balance": list(spec.class_balance),
        "confusable_pairs": [
            {"source": a, "target": b, "marker": spec.rule_markers[(a, b)]}
            for a, b in spec.confusable_pairs
        ],
        "rng_seed": spec.rng_seed,
    }


def synth_spec_from_dict(raw: dict) -> SynthTaskSpec:
    try:
        pairs = [(p["source"], p["target"]) for p in raw["confusable_pairs"]]
        markers = {
            (int(p["source"]), int(p["target"])): p.get("marker") or default_marker(p["source"], p["target"])
            for p in raw["confusable_pairs"]
        }
        return SynthTaskSpec(
            n_classes=raw["n_classes"],
            n_rows=raw["n_rows"],
            class_balance=tuple(raw["class_balance"]),
            confusable_pairs=tuple(pairs),
            rule_markers=markers,
            rng_seed=raw.get("rng_seed", 0),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed synth spec: {exc}") from exc


def load_synth_spec(path: str) -> SynthTaskSpec:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ValidationError(f"synth spec file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"synth spec file {path} is not valid JSON: {exc}") from exc
    return synth_spec_from_dict(raw)
