"""Entity-history window aggregation under per-hour batching.

For a row at hour ``H`` every statistic uses only rows from hours ``< H``.
State changes only in :meth:`EntityHistory.advance_hour`, which must be
called once per hour *after* all rows of that hour have been featurized.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._counts import log_count
from .ingest import EventLog
from .te import hour_groups

logger = logging.getLogger(__name__)

SHAPES = ("trailing", "gap1", "bucket", "calendar", "event50")
DEFAULT_ENTITY_KEYS = ("device_ip", "device_id", "app_id", "site_id")
DEFAULT_HORIZON_CAP = 168
DEFAULT_LENGTH_TUPLES = (
    (1, 6, 24),
    (1, 3, 6, 12, 24),
    (1, 6, 24, 48, 168),
    (1, 2, 4, 8, 16, 24, 48, 96, 168),
)


class StateOrderError(ValueError):
    """Hour advanced out of order, or a query about an hour already folded in."""


@dataclass(frozen=True)
class SmoothedRateParams:
    alpha: float = 1.0
    beta: float = 10.0

    def __post_init__(self) -> None:
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("alpha and beta must be positive")


DEFAULT_RATE = SmoothedRateParams()


def smoothed_rate(impressions, clicks, params: SmoothedRateParams = DEFAULT_RATE):
    """``(C + alpha) / (I + alpha + beta)``; scalar or array."""
    a, b = float(params.alpha), float(params.beta)
    if np.isscalar(impressions) and np.isscalar(clicks):
        if clicks > impressions or clicks < 0:
            raise ValueError(f"clicks {clicks} outside [0, impressions={impressions}]")
        return (clicks + a) / (impressions + a + b)
    impressions = np.asarray(impressions)
    clicks = np.asarray(clicks)
    if np.any(clicks > impressions) or np.any(clicks < 0):
        raise ValueError("clicks outside [0, impressions]: window state is corrupt")
    return (clicks + a) / (impressions + a + b)


@dataclass(frozen=True)
class WindowSpec:
    lengths: tuple[int, ...]
    shape: str = "trailing"
    gap_hours: int = 1
    event_n: int = 50
    horizon_cap: int = DEFAULT_HORIZON_CAP

    def __post_init__(self) -> None:
        object.__setattr__(self, "lengths", tuple(int(x) for x in self.lengths))
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        if not self.lengths:
            raise ValueError("length tuple must be non-empty")
        if any(x <= 0 for x in self.lengths):
            raise ValueError("window lengths must be positive")
        if any(b <= a for a, b in zip(self.lengths, self.lengths[1:])):
            raise ValueError(f"window lengths must be strictly ascending: {self.lengths}")
        if self.lengths[-1] > self.horizon_cap:
            raise ValueError(
                f"max window length {self.lengths[-1]}h exceeds horizon cap {self.horizon_cap}h"
            )
        if self.gap_hours <= 0 or self.event_n <= 0:
            raise ValueError("gap_hours and event_n must be positive")

    @property
    def label(self) -> str:
        return f"{self.shape}:{','.join(map(str, self.lengths))}"

    @classmethod
    def parse(cls, text: str, **kw) -> "WindowSpec":
        """Parse ``shape:1,6,24``."""
        shape, _, lengths = text.partition(":")
        return cls(tuple(int(x) for x in lengths.split(",") if x), shape.strip(), **kw)

    def required_lengths(self) -> tuple[int, ...]:
        """Trailing window lengths the engine must maintain."""
        if self.shape == "gap1":
            need = {self.gap_hours} | {L + self.gap_hours for L in self.lengths}
        else:
            need = set(self.lengths)
        return tuple(sorted(need))

    @property
    def horizon(self) -> int:
        return max(max(self.required_lengths()), self.horizon_cap)


class _Window:
    """Running (I, C) sums over ``[H - length, H)`` driven by the batch list."""

    __slots__ = ("length", "imps", "clicks", "next_out")

    def __init__(self, length: int) -> None:
        self.length = length
        self.imps = np.zeros(0, dtype=np.int64)
        self.clicks = np.zeros(0, dtype=np.int64)
        self.next_out = 0  # absolute index of the oldest batch still inside


class EntityHistory:
    """Per-value history of one entity column.

    Keeps aggregated per-hour buckets for the last ``horizon`` hours, day
    accumulators for calendar windows, an optional ring of the last
    ``event_n`` click outcomes in stream order, and last-seen hours.
    """

    def __init__(self, horizon: int = DEFAULT_HORIZON_CAP, event_n: int | None = None,
                 windows: Iterable[int] = (), start_hour: int | None = None) -> None:
        self.horizon = int(horizon)
        self.event_n = event_n
        self.start_hour = start_hour
        self.vocab: dict[str, int] = {}
        self.last_hour: int | None = None
        self._cap = 0
        self._last_seen = np.zeros(0, dtype=np.int64)
        # hour buckets: (hour, sorted codes, impressions, clicks)
        self._batches: deque[tuple[int, np.ndarray, np.ndarray, np.ndarray]] = deque()
        self._base = 0  # absolute index of _batches[0]
        self._windows = {int(L): _Window(int(L)) for L in windows}
        self._synced_to: int | None = None
        self._acc_day: int | None = None
        self._day_imps = np.zeros(0, dtype=np.int64)
        self._day_clicks = np.zeros(0, dtype=np.int64)
        self._prev_imps = np.zeros(0, dtype=np.int64)
        self._prev_clicks = np.zeros(0, dtype=np.int64)
        self._ring = np.zeros((0, event_n or 0), dtype=np.uint8)
        self._ring_total = np.zeros(0, dtype=np.int64)
        self._ring_sum = np.zeros(0, dtype=np.int64)

    # -- vocabulary / capacity ------------------------------------------

    def encode(self, values: Sequence[str]) -> np.ndarray:
        vocab = self.vocab
        out = np.empty(len(values), dtype=np.int64)
        for i, v in enumerate(values):
            code = vocab.get(v)
            if code is None:
                code = vocab[v] = len(vocab)
            out[i] = code
        self._reserve(len(vocab))
        return out

    def _reserve(self, size: int) -> None:
        if size <= self._cap:
            return
        cap = max(size, 2 * self._cap, 64)
        extra = cap - self._cap

        def grow(arr, fill=0):
            return np.concatenate([arr, np.full(extra, fill, dtype=arr.dtype)])

        self._last_seen = grow(self._last_seen, -1)
        for w in self._windows.values():
            w.imps, w.clicks = grow(w.imps), grow(w.clicks)
        self._day_imps, self._day_clicks = grow(self._day_imps), grow(self._day_clicks)
        self._prev_imps, self._prev_clicks = grow(self._prev_imps), grow(self._prev_clicks)
        if self.event_n:
            self._ring = np.concatenate(
                [self._ring, np.zeros((extra, self.event_n), dtype=np.uint8)]
            )
            self._ring_total, self._ring_sum = grow(self._ring_total), grow(self._ring_sum)
        self._cap = cap

    def _code(self, value: str) -> int | None:
        return self.vocab.get(value)

    def _check_query_hour(self, H: int) -> None:
        if self.last_hour is not None and H <= self.last_hour:
            raise StateOrderError(
                f"query at hour {H} but state already includes hour {self.last_hour}"
            )

    # -- state mutation ---------------------------------------------------

    def advance_hour(self, h: int, values: Sequence[str] | np.ndarray, clicks: Sequence[int] | np.ndarray,
                     codes: np.ndarray | None = None) -> None:
        """Fold all rows of hour ``h`` (in stream order) into the history."""
        h = int(h)
        if self.last_hour is not None and h <= self.last_hour:
            raise StateOrderError(f"advance to hour {h} after hour {self.last_hour}")
        if self._synced_to is not None and h < self._synced_to:
            raise StateOrderError(f"advance to hour {h} after features for hour {self._synced_to}")
        if self.start_hour is None:
            self.start_hour = h
        self.last_hour = h
        if codes is None:
            codes = self.encode(values)
        clicks = np.asarray(clicks, dtype=np.int64)
        day = h // 24
        if self._acc_day is None or day != self._acc_day:
            if self._acc_day is not None and day == self._acc_day + 1:
                self._prev_imps, self._prev_clicks = self._day_imps, self._day_clicks
            else:
                self._prev_imps = np.zeros(self._cap, dtype=np.int64)
                self._prev_clicks = np.zeros(self._cap, dtype=np.int64)
            self._day_imps = np.zeros(self._cap, dtype=np.int64)
            self._day_clicks = np.zeros(self._cap, dtype=np.int64)
            self._acc_day = day
        if len(codes):
            uniq, inv = np.unique(codes, return_inverse=True)
            imps = np.bincount(inv).astype(np.int64)
            clk = np.bincount(inv, weights=clicks, minlength=len(uniq)).astype(np.int64)
            self._batches.append((h, uniq, imps, clk))
            for w in self._windows.values():
                w.imps[uniq] += imps
                w.clicks[uniq] += clk
            self._day_imps[uniq] += imps
            self._day_clicks[uniq] += clk
            self._last_seen[uniq] = h
            if self.event_n:
                self._push_events(codes, clicks)
        # no query can reach hours below h + 1 - horizon any more
        self._expire(h + 1)
        cutoff = h + 1 - self.horizon
        while self._batches and self._batches[0][0] < cutoff:
            self._batches.popleft()
            self._base += 1

    def _push_events(self, codes: np.ndarray, clicks: np.ndarray) -> None:
        N = self.event_n
        order = np.argsort(codes, kind="stable")
        sc = codes[order]
        starts = np.flatnonzero(np.r_[True, sc[1:] != sc[:-1]])
        counts = np.diff(np.r_[starts, len(sc)])
        rank_sorted = np.arange(len(sc)) - np.repeat(starts, counts)
        k_sorted = np.repeat(counts, counts)
        keep = rank_sorted >= k_sorted - N  # only the last N of this hour survive
        rows = order[keep]
        ranks = rank_sorted[keep]
        rc = codes[rows]
        pos = (self._ring_total[rc] + ranks) % N
        self._ring[rc, pos] = clicks[rows].astype(np.uint8)
        touched = sc[starts]
        self._ring_total[touched] += counts
        self._ring_sum[touched] = self._ring[touched].sum(axis=1, dtype=np.int64)

    def _sync(self, H: int) -> None:
        self._check_query_hour(H)
        if self._synced_to is not None and H < self._synced_to:
            raise StateOrderError(f"bulk query at hour {H} after hour {self._synced_to}")
        self._synced_to = H
        self._expire(H)

    def _expire(self, H: int) -> None:
        end = self._base + len(self._batches)
        for w in self._windows.values():
            lo = H - w.length
            while w.next_out < end:
                bh, uniq, imps, clk = self._batches[w.next_out - self._base]
                if bh >= lo:
                    break
                w.imps[uniq] -= imps
                w.clicks[uniq] -= clk
                w.next_out += 1

    # -- bulk queries (codes, running sums) --------------------------------

    def window_counts(self, codes: np.ndarray, L: int, H: int) -> tuple[np.ndarray, np.ndarray]:
        self._sync(H)
        w = self._windows[L]
        return w.imps[codes], w.clicks[codes]

    def calendar_arrays(self, codes: np.ndarray, H: int):
        self._check_query_hour(H)
        d = H // 24
        zeros = np.zeros(len(codes), dtype=np.int64)
        if self._acc_day == d:
            cur = (self._day_imps[codes], self._day_clicks[codes])
            prev = (self._prev_imps[codes], self._prev_clicks[codes])
        elif self._acc_day == d - 1:
            cur = (zeros, zeros)
            prev = (self._day_imps[codes], self._day_clicks[codes])
        else:
            cur = prev = (zeros, zeros)
        return cur, prev, self._prev_available(H)

    def event_arrays(self, codes: np.ndarray, H: int) -> tuple[np.ndarray, np.ndarray]:
        self._check_query_hour(H)
        return np.minimum(self._ring_total[codes], self.event_n), self._ring_sum[codes]

    def recency_array(self, codes: np.ndarray, H: int) -> np.ndarray:
        self._check_query_hour(H)
        last = self._last_seen[codes]
        return np.where(last >= 0, (H - last).astype(np.float64), np.nan)

    def _prev_available(self, H: int) -> bool:
        if self.start_hour is None:
            return False
        return self.start_hour <= (H // 24 - 1) * 24

    # -- scalar queries (rescan retained buckets) --------------------------

    def _range_counts(self, value: str, lo: int, hi: int) -> tuple[int, int]:
        code = self._code(value)
        if code is None:
            return 0, 0
        imps = clicks = 0
        for bh, uniq, bi, bc in self._batches:
            if lo <= bh < hi:
                j = np.searchsorted(uniq, code)
                if j < len(uniq) and uniq[j] == code:
                    imps += int(bi[j])
                    clicks += int(bc[j])
        return imps, clicks

    def trailing_counts(self, value: str, L: int, H: int) -> tuple[int, int]:
        self._check_query_hour(H)
        if L > self.horizon:
            raise ValueError(f"window {L}h exceeds horizon {self.horizon}h")
        return self._range_counts(value, H - L, H)

    def gap_counts(self, value: str, L: int, g: int, H: int) -> tuple[int, int]:
        i1, c1 = self.trailing_counts(value, L + g, H)
        i0, c0 = self.trailing_counts(value, g, H)
        return i1 - i0, c1 - c0

    def bucket_counts(self, value: str, edges: Sequence[int], H: int) -> list[tuple[int, int]]:
        out = []
        prev = (0, 0)
        for e in edges:
            cur = self.trailing_counts(value, e, H)
            out.append((cur[0] - prev[0], cur[1] - prev[1]))
            prev = cur
        return out

    def calendar_counts(self, value: str, H: int) -> tuple[tuple[int, int], tuple[int, int], bool]:
        self._check_query_hour(H)
        ds = (H // 24) * 24
        return (self._range_counts(value, ds, H), self._range_counts(value, ds - 24, ds),
                self._prev_available(H))

    def event_window_counts(self, value: str, N: int, H: int) -> tuple[int, int]:
        self._check_query_hour(H)
        if not self.event_n or N > self.event_n:
            raise ValueError(f"event window {N} exceeds ring size {self.event_n}")
        code = self._code(value)
        if code is None:
            return 0, 0
        total = int(self._ring_total[code])
        take = min(N, total)
        slots = [(total - 1 - i) % self.event_n for i in range(take)]
        return take, int(self._ring[code, slots].sum())

    def recency(self, value: str, H: int) -> float:
        self._check_query_hour(H)
        code = self._code(value)
        if code is None or self._last_seen[code] < 0:
            return math.nan
        return float(H - self._last_seen[code])

    def retained_impressions(self, value: str) -> int:
        code = self._code(value)
        if code is None:
            return 0
        return self._range_counts(value, -(1 << 62), 1 << 62)[0]


# ---------------------------------------------------------------------------
# multi-key engine


def window_columns(spec: WindowSpec, entity: str) -> list[tuple[str, str]]:
    """(column name, kind) pairs for one entity under a spec, in output order."""
    cols: list[tuple[str, str]] = []

    def pair(shape: str, window: str) -> None:
        cols.append((f"{entity}__{shape}__{window}__limps", "limps"))
        cols.append((f"{entity}__{shape}__{window}__rate", "rate"))

    if spec.shape == "gap1":
        for L in spec.lengths:
            pair("gap1", f"{L}h")
    elif spec.shape == "bucket":
        lo = 0
        for e in spec.lengths:
            pair("bucket", f"{lo}-{e}h")
            lo = e
    else:
        for L in spec.lengths:
            pair("trailing", f"{L}h")
        if spec.shape == "calendar":
            pair("calendar", "curday")
            pair("calendar", "prevday")
        elif spec.shape == "event50":
            pair("event50", f"last{spec.event_n}")
    cols.append((f"{entity}__recency_h", "recency"))
    return cols


class TimeAggEngine:
    """One engine per (fold, WindowSpec); hours are processed strictly in order."""

    def __init__(self, spec: WindowSpec, entity_keys: Sequence[str] = DEFAULT_ENTITY_KEYS,
                 start_hour: int | None = None, params: SmoothedRateParams = DEFAULT_RATE) -> None:
        self.spec = spec
        self.entity_keys = tuple(entity_keys)
        self.params = params
        event_n = spec.event_n if spec.shape == "event50" else None
        self.histories = {
            e: EntityHistory(spec.horizon, event_n, spec.required_lengths(), start_hour)
            for e in self.entity_keys
        }

    def column_names(self) -> list[str]:
        return [name for e in self.entity_keys for name, _ in window_columns(self.spec, e)]

    def _pair(self, imps, clicks) -> list[np.ndarray]:
        return [log_count(imps), smoothed_rate(imps, clicks, self.params)]

    def features(self, H: int, codes: Mapping[str, np.ndarray]) -> list[np.ndarray]:
        spec = self.spec
        out: list[np.ndarray] = []
        for e in self.entity_keys:
            hist = self.histories[e]
            cc = codes[e]
            if spec.shape == "gap1":
                g = spec.gap_hours
                i0, c0 = hist.window_counts(cc, g, H)
                for L in spec.lengths:
                    i1, c1 = hist.window_counts(cc, L + g, H)
                    out += self._pair(i1 - i0, c1 - c0)
            elif spec.shape == "bucket":
                pi = pc = np.zeros(len(cc), dtype=np.int64)
                for edge in spec.lengths:
                    i1, c1 = hist.window_counts(cc, edge, H)
                    out += self._pair(i1 - pi, c1 - pc)
                    pi, pc = i1, c1
            else:
                for L in spec.lengths:
                    out += self._pair(*hist.window_counts(cc, L, H))
                if spec.shape == "calendar":
                    cur, prev, avail = hist.calendar_arrays(cc, H)
                    out += self._pair(*cur)
                    if avail:
                        out += self._pair(*prev)
                    else:
                        out += [np.full(len(cc), np.nan), np.full(len(cc), np.nan)]
                elif spec.shape == "event50":
                    out += self._pair(*hist.event_arrays(cc, H))
            out.append(hist.recency_array(cc, H))
        return out

    def encode(self, values: Mapping[str, Sequence[str]]) -> dict[str, np.ndarray]:
        return {e: self.histories[e].encode(values[e]) for e in self.entity_keys}

    def advance_hour(self, h: int, codes: Mapping[str, np.ndarray], clicks: np.ndarray) -> None:
        for e in self.entity_keys:
            self.histories[e].advance_hour(h, None, clicks, codes=codes[e])


def timeagg_pass(log: EventLog, spec: WindowSpec, entity_keys: Sequence[str] = DEFAULT_ENTITY_KEYS,
                 start_hour: int | None = None,
                 params: SmoothedRateParams = DEFAULT_RATE) -> tuple[list[str], np.ndarray]:
    """Stream the (hour-sorted) log and return column names and float64 features."""
    missing = [e for e in entity_keys if e not in log.cats]
    if missing:
        raise ValueError(f"entity keys not in log: {missing}")
    groups = hour_groups(log.hours)
    if start_hour is None and groups:
        start_hour = groups[0][0]
    engine = TimeAggEngine(spec, entity_keys, start_hour, params)
    names = engine.column_names()
    out = np.empty((len(log), len(names)))
    clicks = log.clicks.astype(np.int64)
    for h, s, e in groups:
        codes = engine.encode({k: log.cats[k][s:e] for k in entity_keys})
        cols = engine.features(h, codes)
        out[s:e] = np.column_stack(cols)
        engine.advance_hour(h, codes, clicks[s:e])
    return names, out
