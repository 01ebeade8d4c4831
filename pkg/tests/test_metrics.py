from __future__ import annotations

import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bootstrap_tally, kappa_tally, macro_f1_tally, random_label_pair
from promptopt import metrics
from promptopt.core import ConfigurationError, MetricError

labels_st = st.sampled_from(["a", "b", "c", "d"])
pair_st = st.integers(min_value=1, max_value=60).flatmap(
    lambda n: st.tuples(
        st.lists(labels_st, min_size=n, max_size=n),
        st.lists(labels_st, min_size=n, max_size=n),
    )
)


# ── confusion matrix ─────────────────────────────────────────────────────────


def test_confusion_identity() -> None:
    cm = metrics.confusion_matrix(["A", "A"], ["A", "A"])
    assert cm.classes == ("A",)
    assert cm.counts == ((2,),)


def test_confusion_anti_diagonal() -> None:
    cm = metrics.confusion_matrix(["A", "B"], ["B", "A"])
    assert cm.classes == ("A", "B")
    assert cm.counts == ((0, 1), (1, 0))


def test_confusion_counts_match_tally_oracle() -> None:
    rng = random.Random(11)
    expected, parsed = random_label_pair(rng, min_len=50, max_len=50, min_classes=5, max_classes=5)
    cm = metrics.confusion_matrix(expected, parsed)
    for i, ec in enumerate(cm.classes):
        for j, pc in enumerate(cm.classes):
            want = sum(1 for e, p in zip(expected, parsed) if e == ec and p == pc)
            assert cm.counts[i][j] == want
    hist = metrics.label_distribution(expected)
    assert cm.row_totals() == tuple(hist.get(c, 0) for c in cm.classes)


def test_confusion_rejects_empty() -> None:
    with pytest.raises(MetricError):
        metrics.confusion_matrix([], [])


def test_confusion_rejects_length_mismatch() -> None:
    with pytest.raises(MetricError):
        metrics.confusion_matrix(["A"], ["A", "B"])


# ── cohen's kappa ────────────────────────────────────────────────────────────


def test_kappa_worked_example_exact() -> None:
    # p_o = 0.75, p_e = 0.5 -> kappa = 0.5
    assert metrics.cohen_kappa(["A", "A", "B", "B"], ["A", "B", "B", "B"]).value == 0.5


def test_kappa_perfect_agreement() -> None:
    assert metrics.cohen_kappa(["A", "B", "A"], ["A", "B", "A"]).value == 1.0


def test_kappa_chance_level_is_zero() -> None:
    assert metrics.cohen_kappa(["A", "A", "B", "B"], ["A", "A", "A", "A"]).value == 0.0


def test_kappa_degenerate_single_class() -> None:
    assert metrics.cohen_kappa(["A", "A"], ["A", "A"]).value == 1.0


def test_kappa_length_mismatch() -> None:
    with pytest.raises(MetricError):
        metrics.cohen_kappa(["A"], ["A", "B"])


@given(pair_st)
@settings(max_examples=150, deadline=None)
def test_kappa_matches_tally_oracle(pair: tuple[list[str], list[str]]) -> None:
    expected, parsed = pair
    got = metrics.cohen_kappa(expected, parsed).value
    assert got == pytest.approx(kappa_tally(expected, parsed), abs=1e-12)
    assert -1.0 - 1e-12 <= got <= 1.0 + 1e-12


@given(st.lists(labels_st, min_size=2, max_size=40))
@settings(max_examples=60, deadline=None)
def test_kappa_self_agreement(v: list[str]) -> None:
    value = metrics.cohen_kappa(v, v).value
    if len(set(v)) >= 2:
        assert value == 1.0
    else:
        assert value == 1.0  # degenerate convention: perfect agreement stays 1.0


# ── macro F1 ─────────────────────────────────────────────────────────────────


def test_macro_f1_worked_example() -> None:
    # per-class F1: Y -> 2/3, N -> 4/5; mean = 11/15
    got = metrics.macro_f1(["Y", "Y", "N", "N"], ["Y", "N", "N", "N"]).value
    assert got == pytest.approx(11 / 15, abs=1e-12)


def test_macro_f1_perfect() -> None:
    assert metrics.macro_f1(["Y", "N"], ["Y", "N"]).value == 1.0


def test_macro_f1_total_disagreement() -> None:
    assert metrics.macro_f1(["Y", "N"], ["N", "Y"]).value == 0.0


def test_macro_f1_zero_support_class_contributes_zero() -> None:
    got = metrics.macro_f1(["A", "A"], ["A", "A"], classes=["A", "B"]).value
    assert got == pytest.approx(0.5)


@given(pair_st)
@settings(max_examples=150, deadline=None)
def test_macro_f1_matches_tally_oracle(pair: tuple[list[str], list[str]]) -> None:
    expected, parsed = pair
    got = metrics.macro_f1(expected, parsed).value
    assert got == pytest.approx(macro_f1_tally(expected, parsed), abs=1e-12)
    assert 0.0 <= got <= 1.0


@given(pair_st)
@settings(max_examples=60, deadline=None)
def test_joint_permutation_invariance(pair: tuple[list[str], list[str]]) -> None:
    expected, parsed = pair
    order = list(range(len(expected)))
    random.Random(5).shuffle(order)
    pe = [expected[i] for i in order]
    pp = [parsed[i] for i in order]
    assert metrics.cohen_kappa(pe, pp).value == pytest.approx(
        metrics.cohen_kappa(expected, parsed).value, abs=1e-12
    )
    assert metrics.macro_f1(pe, pp).value == pytest.approx(
        metrics.macro_f1(expected, parsed).value, abs=1e-12
    )
    assert metrics.accuracy(pe, pp).value == metrics.accuracy(expected, parsed).value


@given(pair_st)
@settings(max_examples=60, deadline=None)
def test_binary_relabel_symmetry(pair: tuple[list[str], list[str]]) -> None:
    expected, parsed = pair
    swap = {"a": "b", "b": "a", "c": "d", "d": "c"}
    se = [swap[e] for e in expected]
    sp = [swap[p] for p in parsed]
    assert metrics.macro_f1(se, sp).value == pytest.approx(
        metrics.macro_f1(expected, parsed).value, abs=1e-12
    )


@given(pair_st)
@settings(max_examples=60, deadline=None)
def test_accuracy_equals_confusion_trace(pair: tuple[list[str], list[str]]) -> None:
    expected, parsed = pair
    cm = metrics.confusion_matrix(expected, parsed)
    trace = sum(cm.counts[i][i] for i in range(len(cm.classes)))
    assert metrics.accuracy(expected, parsed).value == pytest.approx(trace / len(expected))


# ── precision / recall / binary F1 ───────────────────────────────────────────


def test_precision_recall_worked_example() -> None:
    prec, rec = metrics.precision_recall(["Y", "N", "N"], ["Y", "Y", "N"], "Y")
    assert prec.value == 0.5
    assert rec.value == 1.0


def test_precision_recall_all_positive() -> None:
    prec, rec = metrics.precision_recall(["Y", "Y"], ["Y", "Y"], "Y")
    assert (prec.value, rec.value) == (1.0, 1.0)


def test_precision_zero_when_no_predicted_positives() -> None:
    prec, _ = metrics.precision_recall(["Y", "N"], ["N", "N"], "Y")
    assert prec.value == 0.0


def test_precision_recall_unknown_positive_class() -> None:
    with pytest.raises(ConfigurationError):
        metrics.precision_recall(["Y", "N"], ["Y", "N"], "Z")


def test_binary_f1_from_precision_recall() -> None:
    got = metrics.binary_f1(["Y", "N", "N"], ["Y", "Y", "N"], "Y")
    assert got.value == pytest.approx(2 * 0.5 * 1.0 / 1.5)


# ── label distribution ───────────────────────────────────────────────────────


def test_label_distribution_basic() -> None:
    assert metrics.label_distribution(["A", "A", "B"]) == {"A": 2, "B": 1}


def test_label_distribution_sums_to_length() -> None:
    rng = random.Random(3)
    expected, _ = random_label_pair(rng, min_len=50, max_len=50)
    assert sum(metrics.label_distribution(expected).values()) == 50


# ── bootstrap CI ─────────────────────────────────────────────────────────────


def test_bootstrap_all_correct_is_degenerate_interval() -> None:
    e = ["A", "B"] * 10
    assert metrics.bootstrap_ci(e, e, "accuracy", rng_seed=1) == (1.0, 1.0)


def test_bootstrap_deterministic_for_fixed_seed() -> None:
    rng = random.Random(9)
    expected, parsed = random_label_pair(rng, min_len=40, max_len=40)
    a = metrics.bootstrap_ci(expected, parsed, "kappa", rng_seed=123)
    b = metrics.bootstrap_ci(expected, parsed, "kappa", rng_seed=123)
    assert a == b


def test_bootstrap_matches_second_implementation_20_rows() -> None:
    # 20-row table with accuracy 0.8
    expected = ["y"] * 20
    parsed = ["y"] * 16 + ["n"] * 4
    got = metrics.bootstrap_ci(expected, parsed, "accuracy", resamples=1000, rng_seed=7)
    want = bootstrap_tally(expected, parsed, "accuracy", 1000, 0.95, 7)
    assert got == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize("metric_name", ["accuracy", "kappa", "macro_f1"])
def test_bootstrap_matches_second_implementation_random(metric_name: str) -> None:
    rng = random.Random(42)
    expected, parsed = random_label_pair(rng, min_len=30, max_len=60, min_classes=2, max_classes=4)
    got = metrics.bootstrap_ci(expected, parsed, metric_name, resamples=300, rng_seed=5)
    want = bootstrap_tally(expected, parsed, metric_name, 300, 0.95, 5)
    assert got == pytest.approx(want, abs=1e-12)


def test_bootstrap_bounds_ordered_and_bracket_achievable() -> None:
    rng = random.Random(8)
    expected, parsed = random_label_pair(rng, min_len=25, max_len=25)
    lo, hi = metrics.bootstrap_ci(expected, parsed, "accuracy", resamples=500, rng_seed=2)
    assert lo <= hi
    # achievable accuracy values are i/25; the interval must contain at least one
    achievable = [i / 25 for i in range(26)]
    assert any(lo <= v <= hi for v in achievable)


def test_bootstrap_guard_metrics_supported() -> None:
    expected = ["y", "y", "n", "n"] * 5
    parsed = ["y", "n", "n", "n"] * 5
    lo, hi = metrics.bootstrap_ci(expected, parsed, "precision", rng_seed=3, positive_class="y")
    assert 0.0 <= lo <= hi <= 1.0
    with pytest.raises(ConfigurationError):
        metrics.bootstrap_ci(expected, parsed, "precision", rng_seed=3)


def test_compute_metric_dispatch() -> None:
    e = ["a", "b", "a", "b"]
    p = ["a", "b", "b", "b"]
    assert metrics.compute_metric("kappa", e, p).value == metrics.cohen_kappa(e, p).value
    assert metrics.compute_metric("precision", e, p, positive_class="a").value == 1.0
    with pytest.raises(ConfigurationError):
        metrics.compute_metric("mystery", e, p)


def test_metric_value_supports_numpy_free_equality() -> None:
    v = metrics.cohen_kappa(["A", "B"], ["A", "B"])
    assert v == metrics.MetricValue(name="kappa", value=1.0, support=2)
    assert not isinstance(v.value, np.floating)
