"""Agreement and classification metrics over per-row label vectors.

All operations are pure functions of their inputs. Parse-failure sentinels are
ordinary labels here: they land in their own confusion-matrix column and are
wrong for every expected class.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .core import ConfigurationError, MetricError

DEFAULT_RESAMPLES = 1000
DEFAULT_CONFIDENCE = 0.95


@dataclass(frozen=True)
class MetricValue:
    name: str
    value: float
    support: int


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows = expected class, columns = parsed class; classes sorted."""

    classes: Tuple[str, ...]
    counts: Tuple[Tuple[int, ...], ...]

    def as_array(self) -> np.ndarray:
        return np.array(self.counts, dtype=np.int64)

    def total(self) -> int:
        return int(self.as_array().sum())

    def row_totals(self) -> Tuple[int, ...]:
        return tuple(int(x) for x in self.as_array().sum(axis=1))

    def col_totals(self) -> Tuple[int, ...]:
        return tuple(int(x) for x in self.as_array().sum(axis=0))

    def render(self) -> str:
        """Plain-text grid with expected classes down the side."""
        width = max([len(c) for c in self.classes] + [5])
        head = " " * (width + 2) + "  ".join(c.rjust(width) for c in self.classes)
        lines = [head]
        for cls, row in zip(self.classes, self.counts):
            cells = "  ".join(str(n).rjust(width) for n in row)
            lines.append(f"{cls.rjust(width)}  {cells}")
        return "\n".join(lines)


def _check_pair(expected: Sequence[str], parsed: Sequence[str]) -> None:
    if len(expected) == 0 or len(parsed) == 0:
        raise MetricError("label vectors must be non-empty")
    if len(expected) != len(parsed):
        raise MetricError(f"length mismatch: {len(expected)} expected vs {len(parsed)} parsed")


def _class_union(expected: Sequence[str], parsed: Sequence[str], classes: Optional[Sequence[str]]):
    if classes is not None:
        cs = tuple(classes)
        extra = (set(expected) | set(parsed)) - set(cs)
        if extra:
            raise MetricError(f"labels outside the declared class set: {sorted(extra)}")
        return cs
    return tuple(sorted(set(expected) | set(parsed)))


def confusion_matrix(
    expected: Sequence[str], parsed: Sequence[str], classes: Optional[Sequence[str]] = None
) -> ConfusionMatrix:
    """counts[i][j] = #{rows: expected=classes[i], parsed=classes[j]}."""
    _check_pair(expected, parsed)
    cs = _class_union(expected, parsed, classes)
    index = {c: i for i, c in enumerate(cs)}
    grid = [[0] * len(cs) for _ in cs]
    for e, p in zip(expected, parsed):
        grid[index[e]][index[p]] += 1
    return ConfusionMatrix(classes=cs, counts=tuple(tuple(row) for row in grid))


def cohen_kappa(expected: Sequence[str], parsed: Sequence[str]) -> MetricValue:
    """kappa = (p_o - p_e) / (1 - p_e).

    p_o is observed agreement; p_e = sum_c expected_marginal_c * parsed_marginal_c.
    Degenerate case p_e = 1: returns 1.0 on perfect agreement, else 0.0.
    """
    _check_pair(expected, parsed)
    n = len(expected)
    agree = sum(1 for e, p in zip(expected, parsed) if e == p)
    e_marg = Counter(expected)
    p_marg = Counter(parsed)
    pe_num = sum(e_marg[c] * p_marg.get(c, 0) for c in e_marg)  # integer, over n^2
    if pe_num == n * n:
        value = 1.0 if agree == n else 0.0
    else:
        po = agree / n
        pe = pe_num / (n * n)
        value = (po - pe) / (1.0 - pe)
    return MetricValue(name="kappa", value=value, support=n)


def macro_f1(
    expected: Sequence[str], parsed: Sequence[str], classes: Optional[Sequence[str]] = None
) -> MetricValue:
    """Unweighted mean of per-class F1 over the class set (sorted union by default).

    A class with zero predicted and zero actual positives contributes F1 = 0.
    """
    _check_pair(expected, parsed)
    cs = _class_union(expected, parsed, classes)
    total = 0.0
    for c in cs:
        tp = sum(1 for e, p in zip(expected, parsed) if e == c and p == c)
        fp = sum(1 for e, p in zip(expected, parsed) if e != c and p == c)
        fn = sum(1 for e, p in zip(expected, parsed) if e == c and p != c)
        denom = 2 * tp + fp + fn
        total += (2 * tp / denom) if denom > 0 else 0.0
    return MetricValue(name="macro_f1", value=total / len(cs), support=len(expected))


def accuracy(expected: Sequence[str], parsed: Sequence[str]) -> MetricValue:
    _check_pair(expected, parsed)
    agree = sum(1 for e, p in zip(expected, parsed) if e == p)
    return MetricValue(name="accuracy", value=agree / len(expected), support=len(expected))


def precision_recall(
    expected: Sequence[str], parsed: Sequence[str], positive_class: str
) -> Tuple[MetricValue, MetricValue]:
    """precision = tp/(tp+fp), recall = tp/(tp+fn); 0/0 is defined as 0.0."""
    _check_pair(expected, parsed)
    if positive_class not in set(expected) | set(parsed):
        raise ConfigurationError(f"positive_class {positive_class!r} not present in the label set")
    tp = sum(1 for e, p in zip(expected, parsed) if e == positive_class and p == positive_class)
    fp = sum(1 for e, p in zip(expected, parsed) if e != positive_class and p == positive_class)
    fn = sum(1 for e, p in zip(expected, parsed) if e == positive_class and p != positive_class)
    prec = tp / (tp + fp) if tp + fp > 0 else 0.0
    rec = tp / (tp + fn) if tp + fn > 0 else 0.0
    n = len(expected)
    return (
        MetricValue(name="precision", value=prec, support=n),
        MetricValue(name="recall", value=rec, support=n),
    )


def binary_f1(expected: Sequence[str], parsed: Sequence[str], positive_class: str) -> MetricValue:
    """F1 of the positive class alone (not macro). 0/0 is 0.0."""
    prec, rec = precision_recall(expected, parsed, positive_class)
    if prec.value + rec.value == 0.0:
        value = 0.0
    else:
        value = 2 * prec.value * rec.value / (prec.value + rec.value)
    return MetricValue(name="binary_f1", value=value, support=prec.support)


def label_distribution(labels: Sequence[str]) -> dict:
    """Histogram label -> count, keys sorted."""
    if len(labels) == 0:
        raise MetricError("label vector must be non-empty")
    counts = Counter(labels)
    return {k: counts[k] for k in sorted(counts)}


def compute_metric(
    name: str,
    expected: Sequence[str],
    parsed: Sequence[str],
    positive_class: Optional[str] = None,
) -> MetricValue:
    """Dispatch on metric name; precision/recall need positive_class."""
    if name == "kappa":
        return cohen_kappa(expected, parsed)
    if name == "macro_f1":
        return macro_f1(expected, parsed)
    if name == "accuracy":
        return accuracy(expected, parsed)
    if name in ("precision", "recall"):
        if positive_class is None:
            raise ConfigurationError(f"metric {name!r} requires a positive_class")
        prec, rec = precision_recall(expected, parsed, positive_class)
        return prec if name == "precision" else rec
    raise ConfigurationError(f"unknown metric {name!r}")


def bootstrap_ci(
    expected: Sequence[str],
    parsed: Sequence[str],
    metric_name: str,
    resamples: int = DEFAULT_RESAMPLES,
    confidence: float = DEFAULT_CONFIDENCE,
    rng_seed: int = 0,
    positive_class: Optional[str] = None,
) -> Tuple[float, float]:
    """Percentile bootstrap interval from with-replacement row resamples.

    Index convention (shared with the test oracle): indices are drawn as
    np.random.default_rng(rng_seed).integers(0, n, size=(resamples, n)).
    Every resample reuses the full table's class set, and degenerate resamples
    take the metric's documented degenerate value instead of aborting.
    """
    _check_pair(expected, parsed)
    if resamples < 1:
        raise MetricError("resamples must be >= 1")
    if not 0.0 < confidence < 1.0:
        raise MetricError("confidence must be in (0,1)")
    n = len(expected)
    classes = tuple(sorted(set(expected) | set(parsed)))
    index = {c: i for i, c in enumerate(classes)}
    e_codes = np.array([index[e] for e in expected], dtype=np.int64)
    p_codes = np.array([index[p] for p in parsed], dtype=np.int64)
    rng = np.random.default_rng(rng_seed)
    idx = rng.integers(0, n, size=(resamples, n))

    if metric_name == "accuracy":
        correct = (e_codes == p_codes).astype(np.float64)
        values = correct[idx].mean(axis=1)
    else:
        c = len(classes)
        e_s = e_codes[idx]
        p_s = p_codes[idx]
        offsets = (np.arange(resamples, dtype=np.int64) * c * c)[:, None]
        flat = (offsets + e_s * c + p_s).ravel()
        cm = np.bincount(flat, minlength=resamples * c * c).reshape(resamples, c, c)
        tp = np.einsum("bii->bi", cm).astype(np.float64)
        row = cm.sum(axis=2).astype(np.float64)  # actual per class
        col = cm.sum(axis=1).astype(np.float64)  # predicted per class
        if metric_name == "kappa":
            po = tp.sum(axis=1) / n
            pe = (row * col).sum(axis=1) / (n * n)
            degenerate = pe >= 1.0
            with np.errstate(divide="ignore", invalid="ignore"):
                values = (po - pe) / (1.0 - pe)
            values = np.where(degenerate, np.where(po >= 1.0, 1.0, 0.0), values)
        elif metric_name == "macro_f1":
            denom = row + col  # = 2tp + fp + fn
            with np.errstate(divide="ignore", invalid="ignore"):
                f1 = np.where(denom > 0, 2.0 * tp / denom, 0.0)
            values = f1.mean(axis=1)
        elif metric_name in ("precision", "recall"):
            if positive_class is None:
                raise ConfigurationError(f"metric {metric_name!r} requires a positive_class")
            if positive_class not in index:
                raise ConfigurationError(f"positive_class {positive_class!r} not present in the label set")
            pos = index[positive_class]
            tp_pos = cm[:, pos, pos].astype(np.float64)
            denom = col[:, pos] if metric_name == "precision" else row[:, pos]
            with np.errstate(divide="ignore", invalid="ignore"):
                values = np.where(denom > 0, tp_pos / denom, 0.0)
        else:
            raise ConfigurationError(f"unknown metric {metric_name!r}")

    alpha = (1.0 - confidence) / 2.0
    lo, hi = np.percentile(values, [100.0 * alpha, 100.0 * (1.0 - alpha)])
    return float(lo), float(hi)
