"""Time-aware target encoding with per-hour batching.

Every row at hour ``h`` is encoded from label statistics over hours ``< h``;
hour ``h`` labels are folded into the state only after all of its rows have
been featurized.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from ._counts import log_count
from .folds import UNASSIGNED
from .ingest import EventLog
from .matrix import FeatureMatrix

logger = logging.getLogger(__name__)


class UnsortedInputError(ValueError):
    pass


@dataclass
class PriorState:
    impressions: int = 0
    clicks: int = 0
    a: float = 1.0
    b: float = 10.0

    def update(self, impressions: int, clicks: int) -> None:
        self.impressions += int(impressions)
        self.clicks += int(clicks)


def prior_ctr(state: PriorState) -> float:
    return (state.clicks + state.a) / (state.impressions + state.a + state.b)


@dataclass
class _ColumnCounts:
    vocab: dict[str, int] = field(default_factory=dict)
    impressions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    clicks: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def codes_for(self, values) -> np.ndarray:
        vocab = self.vocab
        out = np.empty(len(values), dtype=np.int64)
        for i, v in enumerate(values):
            code = vocab.get(v)
            if code is None:
                code = vocab[v] = len(vocab)
            out[i] = code
        self._grow(len(vocab))
        return out

    def _grow(self, size: int) -> None:
        if size > len(self.impressions):
            cap = max(size, 2 * len(self.impressions))
            self.impressions = np.concatenate([self.impressions, np.zeros(cap - len(self.impressions), np.int64)])
            self.clicks = np.concatenate([self.clicks, np.zeros(cap - len(self.clicks), np.int64)])


@dataclass
class TEState:
    """Cumulative per-(column, value) impressions and clicks, keyed by exact value."""

    m: float = 100.0
    columns: dict[str, _ColumnCounts] = field(default_factory=dict)

    def _col(self, column: str) -> _ColumnCounts:
        col = self.columns.get(column)
        if col is None:
            col = self.columns[column] = _ColumnCounts()
        return col

    def counts(self, column: str, value: str) -> tuple[int, int]:
        col = self.columns.get(column)
        if col is None or value not in col.vocab:
            return 0, 0
        code = col.vocab[value]
        return int(col.impressions[code]), int(col.clicks[code])

    def update(self, column: str, values: Sequence[str], clicks: Sequence[int]) -> None:
        col = self._col(column)
        codes = col.codes_for(values)
        np.add.at(col.impressions, codes, 1)
        np.add.at(col.clicks, codes, np.asarray(clicks, dtype=np.int64))


def te_value(state: TEState, column: str, value: str, prior: float) -> float:
    imps, clicks = state.counts(column, value)
    return (clicks + state.m * prior) / (imps + state.m)


def hist_imps(state: TEState, column: str, value: str) -> float:
    return log_count(state.counts(column, value)[0])


def hour_groups(hours: np.ndarray) -> list[tuple[int, int, int]]:
    """(hour, start, stop) for each run of equal hours; input must be sorted."""
    if len(hours) == 0:
        return []
    if np.any(np.diff(hours) < 0):
        bad = int(np.flatnonzero(np.diff(hours) < 0)[0]) + 1
        raise UnsortedInputError(f"events not sorted by hour (row {bad} goes back in time)")
    cuts = np.flatnonzero(np.diff(hours)) + 1
    starts = np.concatenate([[0], cuts])
    stops = np.concatenate([cuts, [len(hours)]])
    return [(int(hours[s]), int(s), int(e)) for s, e in zip(starts, stops)]


def te_column_names(columns: Sequence[str]) -> list[str]:
    names = []
    for c in columns:
        names += [f"{c}__te", f"{c}__hist_imps"]
    return names


@dataclass
class TEBlock:
    row_ids: np.ndarray
    hour_of_day: np.ndarray
    prior_ctr: np.ndarray
    te: dict[str, np.ndarray]
    hist_imps: dict[str, np.ndarray]
    columns: tuple[str, ...]

    def column_names(self) -> list[str]:
        return ["hour_of_day", "prior_ctr"] + te_column_names(self.columns)

    def values(self, index=None) -> np.ndarray:
        """Float64 array in column_names() order."""
        sel = slice(None) if index is None else index
        cols = [self.hour_of_day[sel].astype(np.float64), self.prior_ctr[sel]]
        for c in self.columns:
            cols += [self.te[c][sel], self.hist_imps[c][sel]]
        return np.column_stack(cols)

    def to_matrix(self, labels: np.ndarray, split_tags: np.ndarray | None = None) -> FeatureMatrix:
        n = len(self.row_ids)
        tags = np.full(n, UNASSIGNED, np.uint8) if split_tags is None else split_tags
        return FeatureMatrix(self.row_ids, self.column_names(), self.values().astype(np.float32),
                             labels, tags)


def te_pass(log: EventLog, columns: Sequence[str] | None = None,
            a: float = 1.0, b: float = 10.0, m: float = 100.0) -> TEBlock:
    """Single chronological pass producing prior, hour-of-day and TE features.

    ``log`` must be sorted by hour (ties keep file order).
    """
    columns = tuple(log.schema.categorical_columns if columns is None else columns)
    a, b, m = float(a), float(b), float(m)
    groups = hour_groups(log.hours)
    n = len(log)
    clicks = log.clicks.astype(np.int64)
    prior = np.empty(n)
    te = {c: np.empty(n) for c in columns}
    hist = {c: np.empty(n) for c in columns}
    codes = {}
    imps_state = {}
    click_state = {}
    for c in columns:
        codes[c], uniques = pd.factorize(log.cats[c])
        imps_state[c] = np.zeros(len(uniques), dtype=np.int64)
        click_state[c] = np.zeros(len(uniques), dtype=np.int64)
    total = PriorState(a=a, b=b)

    for _, s, e in groups:
        p = prior_ctr(total)
        prior[s:e] = p
        for c in columns:
            cc = codes[c][s:e]
            iv = imps_state[c][cc]
            cv = click_state[c][cc]
            te[c][s:e] = (cv + m * p) / (iv + m)
            hist[c][s:e] = log_count(iv)
        # fold hour h into state only after all its rows are encoded
        hc = clicks[s:e]
        for c in columns:
            cc = codes[c][s:e]
            np.add.at(imps_state[c], cc, 1)
            np.add.at(click_state[c], cc, hc)
        total.update(e - s, int(hc.sum()))

    return TEBlock(
        row_ids=log.row_ids.copy(),
        hour_of_day=(log.hours % 24).astype(np.int64),
        prior_ctr=prior,
        te=te,
        hist_imps=hist,
        columns=columns,
    )


def te_cache_matrix(log: EventLog, columns: Sequence[str] | None = None, **params) -> FeatureMatrix:
    block = te_pass(log, columns, **params)
    return block.to_matrix(log.clicks)
