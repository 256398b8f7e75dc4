"""Ranking metrics, paired deltas and the paired bootstrap."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .ingest import EventLog


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricResult:
    roc_auc: float
    pr_auc: float
    n_pos: int
    n_neg: int


def _prepare(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and aligned")
    if np.any(np.isnan(s)):
        raise ValueError("scores contain NaN")
    return s, (y == 1)


def _average_ranks(s: np.ndarray) -> np.ndarray:
    """1-based ranks, ties share the mean rank."""
    order = np.argsort(s, kind="mergesort")
    ss = s[order]
    starts = np.flatnonzero(np.r_[True, ss[1:] != ss[:-1]])
    stops = np.r_[starts[1:], len(ss)]
    mean_rank = (starts + stops + 1) / 2.0  # mean of start+1 .. stop
    ranks = np.empty(len(s))
    ranks[order] = np.repeat(mean_rank, stops - starts)
    return ranks


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(pos > neg) + 0.5 P(tie)."""
    s, pos = _prepare(scores, labels)
    n_pos = int(pos.sum())
    n_neg = len(s) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC needs both positive and negative labels")
    u = _average_ranks(s)[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc(scores, labels) -> float:
    """Average precision; tied scores are consumed as one group."""
    s, pos = _prepare(scores, labels)
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise UndefinedMetricError("PR AUC needs at least one positive label")
    order = np.argsort(-s, kind="mergesort")
    ss = s[order]
    yy = pos[order].astype(np.int64)
    ends = np.r_[np.flatnonzero(ss[1:] != ss[:-1]), len(ss) - 1]
    tp = np.cumsum(yy)[ends]
    seen = ends + 1
    d_tp = np.diff(np.r_[0, tp])
    return float(np.sum(d_tp * (tp / seen)) / n_pos)


def evaluate(scores, labels) -> MetricResult:
    _, pos = _prepare(scores, labels)
    return MetricResult(roc_auc(scores, labels), pr_auc(scores, labels),
                        int(pos.sum()), int((~pos).sum()))


METRICS: dict[str, Callable] = {"roc_auc": roc_auc, "pr_auc": pr_auc}


def align_by_row_id(row_ids_a, values_a, row_ids_b, values_b) -> tuple[np.ndarray, np.ndarray]:
    """Reorder ``values_b`` to the row order of ``row_ids_a``; row sets must match."""
    ia = np.asarray(row_ids_a)
    ib = np.asarray(row_ids_b)
    if len(ia) != len(ib) or len(np.unique(ia)) != len(ia):
        raise ValueError("row-set mismatch between paired score vectors")
    ob = np.argsort(ib, kind="stable")
    pos = np.searchsorted(ib[ob], ia)
    pos = np.minimum(pos, len(ib) - 1)
    if len(ia) and not np.array_equal(ib[ob][pos], ia):
        raise ValueError("row-set mismatch between paired score vectors")
    return np.asarray(values_a), np.asarray(values_b)[ob][pos]


def paired_delta(scores_spec, scores_base, labels, metric: str = "roc_auc",
                 row_ids_spec=None, row_ids_base=None) -> float:
    """metric(spec) - metric(baseline) on identical rows.

    When row ids are given the baseline is joined onto the candidate's row order.
    """
    if row_ids_spec is not None or row_ids_base is not None:
        if row_ids_spec is None or row_ids_base is None:
            raise ValueError("pass row ids for both score vectors or neither")
        _, scores_base = align_by_row_id(row_ids_spec, scores_spec, row_ids_base, scores_base)
    elif len(scores_spec) != len(scores_base):
        raise ValueError("row-set mismatch between paired score vectors")
    f = METRICS[metric]
    return f(scores_spec, labels) - f(scores_base, labels)


def _resample_deltas(folds, B: int, seed: int, metric: str, max_retries: int) -> np.ndarray:
    f = METRICS[metric]
    children = np.random.SeedSequence(seed).spawn(B)
    out = np.empty(B)
    for b, child in enumerate(children):
        rng = np.random.default_rng(child)
        total = 0.0
        for sa, sb, y in folds:
            n = len(y)
            for _ in range(max_retries):
                idx = rng.integers(0, n, n)
                yb = y[idx]
                k = int(yb.sum())
                if 0 < k < n:
                    break
            else:
                raise UndefinedMetricError(f"bootstrap resample stayed single-class after {max_retries} draws")
            total += f(sa[idx], yb) - f(sb[idx], yb)
        out[b] = total / len(folds)
    return out


def bootstrap_ci(scores_a, scores_b, labels, B: int = 200, seed: int = 42, metric: str = "roc_auc",
                 level: float = 0.95, max_retries: int = 100) -> tuple[float, float]:
    """Paired percentile bootstrap interval for metric(a) - metric(b).

    Each replicate draws rows with replacement from its own seeded stream,
    so replicate ``b`` does not depend on ``B``.
    """
    return bootstrap_ci_folds([(scores_a, scores_b, labels)], B, seed, metric, level, max_retries)


def bootstrap_ci_folds(folds: Sequence[tuple], B: int = 200, seed: int = 42, metric: str = "roc_auc",
                       level: float = 0.95, max_retries: int = 100) -> tuple[float, float]:
    """Interval for the fold-averaged paired delta; rows are resampled within each fold."""
    if B < 100:
        raise ValueError("bootstrap needs B >= 100")
    prepared = []
    for sa, sb, y in folds:
        sa = np.asarray(sa, dtype=np.float64)
        sb = np.asarray(sb, dtype=np.float64)
        y = (np.asarray(y) == 1).astype(np.int64)
        if not (len(sa) == len(sb) == len(y)):
            raise ValueError("row-set mismatch between paired score vectors")
        prepared.append((sa, sb, y))
    deltas = _resample_deltas(prepared, B, seed, metric, max_retries)
    tail = (1.0 - level) / 2.0 * 100.0
    lo, hi = np.percentile(deltas, [tail, 100.0 - tail])
    return float(lo), float(hi)


# ---------------------------------------------------------------------------
# EDA


def eda_ctr_by_day(events: EventLog) -> list[tuple[int, float]]:
    days = events.hours // 24
    uniq, inv = np.unique(days, return_inverse=True)
    rows = np.bincount(inv)
    clicks = np.bincount(inv, weights=events.clicks.astype(np.int64))
    return [(int(d), float(c / r)) for d, c, r in zip(uniq, clicks, rows)]


def eda_unseen_rate(events: EventLog, columns: Sequence[str]) -> dict[str, list[tuple[int, float]]]:
    """Per day, fraction of rows whose value never appeared on an earlier day."""
    unknown = [c for c in columns if c not in events.cats]
    if unknown:
        raise ValueError(f"unknown column(s): {unknown}")
    days = events.hours // 24
    uniq = np.unique(days)
    out: dict[str, list[tuple[int, float]]] = {}
    for c in columns:
        vals = events.cats[c]
        seen: set = set()
        series = []
        for d in uniq:
            today = vals[days == d]
            unseen = sum(1 for v in today if v not in seen)
            series.append((int(d), unseen / len(today)))
            seen.update(today.tolist())
        out[c] = series
    return out
