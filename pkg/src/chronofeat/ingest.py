"""Event log parsing, validation and deterministic hash sampling.

Logs are RFC 4180 CSV files with a header row. Rows are never reordered:
within-hour file order is part of the data contract because event-count
windows depend on it.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FNV_OFFSET = 14695981039346656037
FNV_PRIME = 1099511628211
_MASK64 = (1 << 64) - 1

AVAZU_CATEGORICAL_COLUMNS = (
    "C1", "banner_pos", "site_id", "site_domain", "site_category", "app_id",
    "app_domain", "app_category", "device_id", "device_ip", "device_model",
    "device_type", "device_conn_type", "C14", "C15", "C16", "C17", "C18",
    "C19", "C20", "C21",
)

_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


class LogFormatError(ValueError):
    """Raised for malformed log input; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class LogSchema:
    id_column: str = "id"
    label_column: str = "click"
    hour_column: str = "hour"
    categorical_columns: tuple[str, ...] = AVAZU_CATEGORICAL_COLUMNS

    def __post_init__(self) -> None:
        object.__setattr__(self, "categorical_columns", tuple(self.categorical_columns))
        special = (self.id_column, self.label_column, self.hour_column)
        if len(set(special)) != 3:
            raise ValueError(f"id/label/hour columns must be distinct: {special}")
        cats = self.categorical_columns
        if len(set(cats)) != len(cats):
            raise ValueError("duplicate categorical column names")
        overlap = set(cats) & set(special)
        if overlap:
            raise ValueError(f"categorical columns overlap id/label/hour: {sorted(overlap)}")

    @property
    def columns(self) -> tuple[str, ...]:
        return (self.id_column, self.label_column, self.hour_column) + self.categorical_columns

    def to_dict(self) -> dict:
        return {
            "id_column": self.id_column,
            "label_column": self.label_column,
            "hour_column": self.hour_column,
            "categorical_columns": list(self.categorical_columns),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LogSchema":
        return cls(
            id_column=d.get("id_column", "id"),
            label_column=d.get("label_column", "click"),
            hour_column=d.get("hour_column", "hour"),
            categorical_columns=tuple(d.get("categorical_columns", AVAZU_CATEGORICAL_COLUMNS)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "LogSchema":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


@dataclass(frozen=True)
class ImpressionEvent:
    row_id: int
    hour: int
    click: int
    cats: tuple[str, ...]


# ---------------------------------------------------------------------------
# time helpers


def parse_timestamp(text: str) -> int:
    """Convert a YYMMDDHH timestamp into hours since the Unix epoch."""
    if len(text) != 8 or not text.isdigit():
        raise ValueError(f"unknown timestamp format {text!r}; expected YYMMDDHH")
    yy, mm, dd, hh = int(text[0:2]), int(text[2:4]), int(text[4:6]), int(text[6:8])
    try:
        dt = datetime(2000 + yy, mm, dd, hh, tzinfo=timezone.utc)
    except ValueError as exc:
        raise ValueError(f"invalid timestamp {text!r}: {exc}") from None
    return int((dt - _EPOCH).total_seconds()) // 3600


def format_timestamp(hour: int) -> str:
    dt = datetime.fromtimestamp(int(hour) * 3600, tz=timezone.utc)
    if not 2000 <= dt.year <= 2099:
        raise ValueError(f"hour {hour} is outside the two-digit-year range 2000-2099")
    return dt.strftime("%y%m%d%H")


def hour_label(hour: int) -> str:
    """Human-readable hour, e.g. ``2014-10-30 00:00``."""
    dt = datetime.fromtimestamp(int(hour) * 3600, tz=timezone.utc)
    return dt.strftime("%Y-%m-%d %H:00")


def day_label(day: int) -> str:
    dt = datetime.fromtimestamp(int(day) * 86400, tz=timezone.utc)
    return dt.strftime("%Y-%m-%d")


# ---------------------------------------------------------------------------
# hashing


def fnv1a64(data: bytes | str) -> int:
    if isinstance(data, str):
        data = data.encode("ascii")
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def fnv1a64_array(texts: np.ndarray | Sequence[str] | Sequence[bytes]) -> np.ndarray:
    """Vectorised FNV-1a 64 over a batch of ASCII strings."""
    arr = np.asarray(texts)
    if arr.dtype.kind == "U":
        arr = np.char.encode(arr, "ascii")
    elif arr.dtype.kind != "S":
        arr = np.asarray([str(t) for t in arr], dtype="S")
    n = arr.shape[0]
    out = np.full(n, FNV_OFFSET, dtype=np.uint64)
    if n == 0:
        return out
    width = arr.dtype.itemsize
    if width == 0:
        return out
    raw = np.frombuffer(arr.tobytes(), dtype=np.uint8).reshape(n, width)
    lengths = np.char.str_len(arr)
    prime = np.uint64(FNV_PRIME)
    for j in range(width):
        live = lengths > j
        if not live.any():
            break
        h = out[live] ^ raw[live, j].astype(np.uint64)
        out[live] = h * prime  # wraps mod 2**64
    return out


def sample_mask(id_texts: np.ndarray | Sequence[str], rate_percent: int) -> np.ndarray:
    _check_rate(rate_percent)
    return (fnv1a64_array(id_texts) % np.uint64(100)) < np.uint64(rate_percent)


def _check_rate(rate_percent: int) -> None:
    if not 0 <= rate_percent <= 100:
        raise ValueError(f"rate_percent must be in [0, 100], got {rate_percent}")


def hash_sample(events: Iterable[ImpressionEvent], rate_percent: int) -> list[ImpressionEvent]:
    """Keep events whose FNV-1a hash of the decimal row id, mod 100, is below the rate."""
    _check_rate(rate_percent)
    events = list(events)
    if not events:
        return []
    keep = sample_mask([str(e.row_id) for e in events], rate_percent)
    return [e for e, k in zip(events, keep) if k]


# ---------------------------------------------------------------------------
# parsing


def _iter_rows(stream: IO[str], schema: LogSchema) -> Iterator[tuple[int, int, int, int, tuple[str, ...]]]:
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise LogFormatError("empty input: missing header row", 1) from None
    index = {name: i for i, name in enumerate(header)}
    missing = [c for c in schema.columns if c not in index]
    if missing:
        raise LogFormatError(f"missing column(s) {missing} in header", 1)
    id_i = index[schema.id_column]
    y_i = index[schema.label_column]
    h_i = index[schema.hour_column]
    cat_i = [index[c] for c in schema.categorical_columns]
    width = len(header)
    hour_cache: dict[str, int] = {}
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != width:
            raise LogFormatError(f"expected {width} fields, found {len(row)}", line)
        rid_text = row[id_i]
        try:
            rid = int(rid_text)
        except ValueError:
            raise LogFormatError(f"row id {rid_text!r} is not an unsigned integer", line) from None
        if not 0 <= rid <= _MASK64:
            raise LogFormatError(f"row id {rid_text!r} out of unsigned 64-bit range", line)
        label = row[y_i]
        if label == "0":
            click = 0
        elif label == "1":
            click = 1
        else:
            raise LogFormatError(f"label {label!r} not in {{0,1}}", line)
        ts = row[h_i]
        hour = hour_cache.get(ts)
        if hour is None:
            try:
                hour = parse_timestamp(ts)
            except ValueError as exc:
                raise LogFormatError(str(exc), line) from None
            if hour < 0:
                raise LogFormatError(f"timestamp {ts!r} precedes the epoch", line)
            hour_cache[ts] = hour
        yield line, rid, hour, click, tuple(row[i] for i in cat_i)


def parse_log(stream: IO[str] | str | bytes, schema: LogSchema) -> Iterator[ImpressionEvent]:
    """Yield events in file order. Accepts a text stream or raw CSV text/bytes."""
    if isinstance(stream, bytes):
        stream = io.StringIO(stream.decode("utf-8"))
    elif isinstance(stream, str):
        stream = io.StringIO(stream)
    for _, rid, hour, click, cats in _iter_rows(stream, schema):
        yield ImpressionEvent(rid, hour, click, cats)


def write_log(events: Iterable[ImpressionEvent], stream: IO[str], schema: LogSchema) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(schema.columns)
    for e in events:
        writer.writerow((str(e.row_id), str(e.click), format_timestamp(e.hour)) + tuple(e.cats))


# ---------------------------------------------------------------------------
# columnar container


@dataclass
class EventLog:
    """Columnar event log in file order."""

    schema: LogSchema
    row_ids: np.ndarray  # uint64
    hours: np.ndarray  # int64
    clicks: np.ndarray  # uint8
    cats: dict[str, np.ndarray] = field(default_factory=dict)  # object arrays of str
    true_p: np.ndarray | None = None  # generating probabilities, synthetic logs only
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = len(self.row_ids)
        if len(self.hours) != n or len(self.clicks) != n:
            raise ValueError("column length mismatch")
        for c in self.schema.categorical_columns:
            if c not in self.cats:
                raise ValueError(f"missing categorical column {c!r}")
            if len(self.cats[c]) != n:
                raise ValueError(f"column {c!r} length mismatch")

    def __len__(self) -> int:
        return len(self.row_ids)

    @classmethod
    def from_events(cls, events: Iterable[ImpressionEvent], schema: LogSchema) -> "EventLog":
        events = list(events)
        k = len(schema.categorical_columns)
        for e in events:
            if len(e.cats) != k:
                raise ValueError(f"event {e.row_id} has {len(e.cats)} categorical values, schema has {k}")
        cats = {}
        for j, c in enumerate(schema.categorical_columns):
            col = np.empty(len(events), dtype=object)
            col[:] = [e.cats[j] for e in events]
            cats[c] = col
        return cls(
            schema=schema,
            row_ids=np.array([e.row_id for e in events], dtype=np.uint64),
            hours=np.array([e.hour for e in events], dtype=np.int64),
            clicks=np.array([e.click for e in events], dtype=np.uint8),
            cats=cats,
        )

    def events(self) -> Iterator[ImpressionEvent]:
        cols = [self.cats[c] for c in self.schema.categorical_columns]
        for i in range(len(self)):
            yield ImpressionEvent(
                int(self.row_ids[i]), int(self.hours[i]), int(self.clicks[i]),
                tuple(col[i] for col in cols),
            )

    def take(self, index: np.ndarray) -> "EventLog":
        return EventLog(
            schema=self.schema,
            row_ids=self.row_ids[index],
            hours=self.hours[index],
            clicks=self.clicks[index],
            cats={c: v[index] for c, v in self.cats.items()},
            true_p=None if self.true_p is None else self.true_p[index],
        )

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.hours) >= 0))

    def write_csv(self, path_or_stream: str | Path | IO[str]) -> None:
        if isinstance(path_or_stream, (str, Path)):
            with open(path_or_stream, "w", newline="") as fh:
                self.write_csv(fh)
            return
        writer = csv.writer(path_or_stream, lineterminator="\n")
        writer.writerow(self.schema.columns)
        cols = [self.cats[c] for c in self.schema.categorical_columns]
        ts_cache: dict[int, str] = {}
        for i in range(len(self)):
            h = int(self.hours[i])
            ts = ts_cache.get(h)
            if ts is None:
                ts = ts_cache[h] = format_timestamp(h)
            writer.writerow(
                [str(self.row_ids[i]), str(self.clicks[i]), ts] + [col[i] for col in cols]
            )


def read_log(source: str | Path | IO[str], schema: LogSchema) -> EventLog:
    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            return read_log(fh, schema)
    ids: list[int] = []
    hours: list[int] = []
    clicks: list[int] = []
    cat_rows: list[tuple[str, ...]] = []
    for _, rid, hour, click, cats in _iter_rows(source, schema):
        ids.append(rid)
        hours.append(hour)
        clicks.append(click)
        cat_rows.append(cats)
    n = len(ids)
    cats_cols = {}
    for j, c in enumerate(schema.categorical_columns):
        col = np.empty(n, dtype=object)
        col[:] = [r[j] for r in cat_rows]
        cats_cols[c] = col
    return EventLog(
        schema=schema,
        row_ids=np.array(ids, dtype=np.uint64),
        hours=np.array(hours, dtype=np.int64),
        clicks=np.array(clicks, dtype=np.uint8),
        cats=cats_cols,
    )


def sample_csv(src: IO[str], dst: IO[str], rate_percent: int, id_column: str = "id",
               chunk_rows: int = 200_000) -> tuple[int, int]:
    """Stream-filter a CSV by the id hash. Returns (rows read, rows kept).

    Hashes the raw id text as it appears in the file.
    """
    _check_rate(rate_percent)
    reader = csv.reader(src)
    writer = csv.writer(dst, lineterminator="\n")
    try:
        header = next(reader)
    except StopIteration:
        raise LogFormatError("empty input: missing header row", 1) from None
    if id_column not in header:
        raise LogFormatError(f"missing column {id_column!r} in header", 1)
    id_i = header.index(id_column)
    writer.writerow(header)
    n_in = n_out = 0
    buf: list[list[str]] = []

    def flush() -> int:
        if not buf:
            return 0
        keep = sample_mask([r[id_i] for r in buf], rate_percent)
        kept = [r for r, k in zip(buf, keep) if k]
        writer.writerows(kept)
        buf.clear()
        return len(kept)

    for row in reader:
        if not row:
            continue
        if len(row) != len(header):
            raise LogFormatError(f"expected {len(header)} fields, found {len(row)}", reader.line_num)
        buf.append(row)
        n_in += 1
        if len(buf) >= chunk_rows:
            n_out += flush()
    n_out += flush()
    return n_in, n_out


# ---------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class DayStats:
    day: int
    n_rows: int
    n_clicks: int
    n_hours: int

    @property
    def click_rate(self) -> float:
        return self.n_clicks / self.n_rows

    @property
    def date(self) -> str:
        return day_label(self.day)


@dataclass(frozen=True)
class LogStats:
    days: tuple[DayStats, ...]
    start_hour: int
    end_hour: int

    @property
    def n_rows(self) -> int:
        return sum(d.n_rows for d in self.days)

    @property
    def partial_final_day(self) -> bool:
        return self.days[-1].n_hours < 24 or (self.end_hour % 24) != 23

    def merge(self, other: "LogStats") -> "LogStats":
        by_day: dict[int, list[int]] = {}
        for d in self.days + other.days:
            acc = by_day.setdefault(d.day, [0, 0, 0])
            acc[0] += d.n_rows
            acc[1] += d.n_clicks
            acc[2] = max(acc[2], d.n_hours)  # hour sets are not retained; upper bound
        days = tuple(DayStats(k, *v) for k, v in sorted(by_day.items()))
        return LogStats(days, min(self.start_hour, other.start_hour), max(self.end_hour, other.end_hour))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["day", "n_rows", "n_clicks", "click_rate"])
            for d in self.days:
                w.writerow([d.date, d.n_rows, d.n_clicks, repr(d.click_rate)])


def log_stats(events: EventLog | Iterable[ImpressionEvent]) -> LogStats:
    if not isinstance(events, EventLog):
        events = list(events)
        if not events:
            raise ValueError("log_stats requires at least one event")
        hours = np.array([e.hour for e in events], dtype=np.int64)
        clicks = np.array([e.click for e in events], dtype=np.int64)
    else:
        hours, clicks = events.hours, events.clicks.astype(np.int64)
    if len(hours) == 0:
        raise ValueError("log_stats requires at least one event")
    days = hours // 24
    uniq, inv = np.unique(days, return_inverse=True)
    n_rows = np.bincount(inv)
    n_clicks = np.bincount(inv, weights=clicks).astype(np.int64)
    hours_per_day = [len(np.unique(hours[days == d])) for d in uniq]
    stats = tuple(
        DayStats(int(d), int(r), int(c), int(h))
        for d, r, c, h in zip(uniq, n_rows, n_clicks, hours_per_day)
    )
    return LogStats(stats, int(hours.min()), int(hours.max()))
