"""Rolling-tail out-of-time folds.

Fold with offset ``k`` tests on day ``D - k``, validates on ``D - k - 1`` and
trains on every earlier day, where ``D`` is the last day present in the log.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ingest import EventLog, ImpressionEvent, hour_label

logger = logging.getLogger(__name__)

TRAIN, VAL, TEST, EXCLUDED = "train", "val", "test", "excluded"
SPLITS = (TRAIN, VAL, TEST)
SPLIT_CODES = {TRAIN: 0, VAL: 1, TEST: 2}
UNASSIGNED = 255


class InsufficientDaysError(ValueError):
    pass


@dataclass(frozen=True)
class SplitStats:
    start_hour: int | None
    end_hour: int | None
    n_rows: int
    n_clicks: int

    @property
    def click_rate(self) -> float:
        return self.n_clicks / self.n_rows if self.n_rows else math.nan


@dataclass(frozen=True)
class FoldAssignment:
    """Half-open hour intervals ``[start, end)`` for the three splits."""

    fold_id: str
    offset: int
    train_hours: tuple[int, int]
    val_hours: tuple[int, int]
    test_hours: tuple[int, int]
    stats: dict[str, SplitStats]
    partial_final_day: bool = False

    @property
    def hours(self) -> tuple[int, int]:
        """Full fold range, train start through test end."""
        return self.train_hours[0], self.test_hours[1]

    def interval(self, split: str) -> tuple[int, int]:
        return {TRAIN: self.train_hours, VAL: self.val_hours, TEST: self.test_hours}[split]


def fold_label(offset: int) -> str:
    return chr(ord("A") + offset) if offset < 26 else f"k{offset}"


def parse_fold_id(text: str) -> int:
    text = text.strip()
    if text.isdigit():
        return int(text)
    if len(text) == 1 and text.isalpha():
        return ord(text.upper()) - ord("A")
    raise ValueError(f"unrecognised fold id {text!r}; use A, B, ... or a non-negative offset")


def _hours_clicks(events) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(events, EventLog):
        return events.hours, events.clicks
    events = list(events)
    return (
        np.array([e.hour for e in events], dtype=np.int64),
        np.array([e.click for e in events], dtype=np.uint8),
    )


def build_fold(events: EventLog | Iterable[ImpressionEvent], offset_k: int) -> FoldAssignment:
    if offset_k < 0:
        raise ValueError("offset_k must be non-negative")
    hours, clicks = _hours_clicks(events)
    if len(hours) == 0:
        raise InsufficientDaysError(f"fold offset {offset_k} needs {offset_k + 3} days, log is empty")
    first_day = int(hours.min()) // 24
    last_day = int(hours.max()) // 24
    available = last_day - first_day + 1
    required = offset_k + 3
    if available < required:
        raise InsufficientDaysError(
            f"fold offset {offset_k} needs {required} days of data, only {available} available"
        )
    test_day = last_day - offset_k
    train = (first_day * 24, (test_day - 1) * 24)
    val = ((test_day - 1) * 24, test_day * 24)
    test = (test_day * 24, (test_day + 1) * 24)

    stats = {}
    for name, (lo, hi) in ((TRAIN, train), (VAL, val), (TEST, test)):
        mask = (hours >= lo) & (hours < hi)
        sel = hours[mask]
        stats[name] = SplitStats(
            start_hour=int(sel.min()) if len(sel) else None,
            end_hour=int(sel.max()) if len(sel) else None,
            n_rows=int(mask.sum()),
            n_clicks=int(clicks[mask].sum(dtype=np.int64)),
        )
    n_last_hours = len(np.unique(hours[hours // 24 == last_day]))
    partial = n_last_hours < 24
    if partial:
        logger.warning("final day %s has only %d of 24 hours; using it as day D anyway",
                       hour_label(last_day * 24)[:10], n_last_hours)
    return FoldAssignment(fold_label(offset_k), offset_k, train, val, test, stats, partial)


def assign_split(event: ImpressionEvent | int, fold: FoldAssignment) -> str:
    hour = event if isinstance(event, (int, np.integer)) else event.hour
    for name in SPLITS:
        lo, hi = fold.interval(name)
        if lo <= hour < hi:
            return name
    return EXCLUDED


def split_codes(hours: np.ndarray, fold: FoldAssignment) -> np.ndarray:
    """Vectorised assign_split: 0/1/2 for train/val/test, 255 for excluded."""
    out = np.full(len(hours), UNASSIGNED, dtype=np.uint8)
    for name in SPLITS:
        lo, hi = fold.interval(name)
        out[(hours >= lo) & (hours < hi)] = SPLIT_CODES[name]
    return out


REPORT_COLUMNS = ("sample", "fold_id", "split", "start_hour", "end_hour", "n_rows", "click_rate")


def split_report_rows(folds: Sequence[FoldAssignment], sample: str) -> list[dict]:
    rows = []
    for f in folds:
        for name in SPLITS:
            s = f.stats[name]
            rows.append({
                "sample": sample,
                "fold_id": f.fold_id,
                "split": name,
                "start_hour": hour_label(s.start_hour) if s.start_hour is not None else "",
                "end_hour": hour_label(s.end_hour) if s.end_hour is not None else "",
                "n_rows": s.n_rows,
                "click_rate": f"{s.click_rate:.4f}" if s.n_rows else "",
            })
    return rows


def write_split_report(folds: Sequence[FoldAssignment], path: str | Path, sample: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(split_report_rows(folds, sample))
