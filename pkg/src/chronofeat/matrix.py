"""FeatureMatrix container and the FMX1 binary format.

Layout (little-endian)::

    b"FMX1" | version u16 | n_rows u64 | n_cols u32
    n_cols x (u32 byte length, UTF-8 column name)
    n_rows x u64 row id | n_rows x u8 label | n_rows x u8 split tag
    n_rows * n_cols float32, row-major
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .folds import SPLIT_CODES, UNASSIGNED

MAGIC = b"FMX1"
VERSION = 1

_TAG_NAMES = {v: k for k, v in SPLIT_CODES.items()}
_TAG_NAMES[UNASSIGNED] = ""


class MatrixFormatError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    row_ids: np.ndarray
    column_names: tuple[str, ...]
    values: np.ndarray
    labels: np.ndarray
    split_tags: np.ndarray

    def __post_init__(self) -> None:
        self.row_ids = np.ascontiguousarray(self.row_ids, dtype=np.uint64)
        self.column_names = tuple(self.column_names)
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        self.split_tags = np.ascontiguousarray(self.split_tags, dtype=np.uint8)
        n = len(self.row_ids)
        if self.values.ndim != 2 or self.values.shape != (n, len(self.column_names)):
            raise ValueError(
                f"values shape {self.values.shape} != ({n}, {len(self.column_names)})"
            )
        if len(self.labels) != n or len(self.split_tags) != n:
            raise ValueError("labels/split tags misaligned with rows")
        if len(set(self.column_names)) != len(self.column_names):
            raise ValueError("duplicate column names")

    @property
    def n_rows(self) -> int:
        return len(self.row_ids)

    @property
    def n_cols(self) -> int:
        return len(self.column_names)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.column_names.index(name)]

    def take(self, index) -> "FeatureMatrix":
        return FeatureMatrix(self.row_ids[index], self.column_names, self.values[index],
                             self.labels[index], self.split_tags[index])

    def split(self, name: str) -> "FeatureMatrix":
        return self.take(self.split_tags == SPLIT_CODES[name])

    def select_columns(self, names: Sequence[str]) -> "FeatureMatrix":
        idx = [self.column_names.index(n) for n in names]
        return FeatureMatrix(self.row_ids, names, self.values[:, idx], self.labels, self.split_tags)

    def equals(self, other: "FeatureMatrix") -> bool:
        return (
            self.column_names == other.column_names
            and np.array_equal(self.row_ids, other.row_ids)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.split_tags, other.split_tags)
            and self.values.tobytes() == other.values.tobytes()
        )

    # -- serialisation ---------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<HQI", VERSION, self.n_rows, self.n_cols)]
        for name in self.column_names:
            raw = name.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
        parts.append(self.row_ids.astype("<u8").tobytes())
        parts.append(self.labels.tobytes())
        parts.append(self.split_tags.tobytes())
        parts.append(self.values.astype("<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "FeatureMatrix":
        if len(data) < 18:
            raise MatrixFormatError("truncated header")
        if data[:4] != MAGIC:
            raise MatrixFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
        version, n, k = struct.unpack_from("<HQI", data, 4)
        if version != VERSION:
            raise MatrixFormatError(f"unsupported FMX version {version}")
        pos = 18
        names = []
        for _ in range(k):
            if pos + 4 > len(data):
                raise MatrixFormatError("truncated column names")
            (ln,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + ln > len(data):
                raise MatrixFormatError("truncated column names")
            try:
                names.append(data[pos:pos + ln].decode("utf-8"))
            except UnicodeDecodeError as exc:
                raise MatrixFormatError(f"column name is not UTF-8: {exc}") from None
            pos += ln
        need = pos + n * 8 + n + n + n * k * 4
        if len(data) < need:
            raise MatrixFormatError(f"truncated payload: {len(data)} bytes, need {need}")
        if len(data) > need:
            raise MatrixFormatError(f"{len(data) - need} trailing bytes after payload")
        row_ids = np.frombuffer(data, dtype="<u8", count=n, offset=pos)
        pos += n * 8
        labels = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos)
        pos += n
        tags = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos)
        pos += n
        values = np.frombuffer(data, dtype="<f4", count=n * k, offset=pos).reshape(n, k)
        try:
            return cls(row_ids.copy(), names, values.copy(), labels.copy(), tags.copy())
        except ValueError as exc:
            raise MatrixFormatError(str(exc)) from None

    def write_csv(self, path: str | Path) -> None:
        """CSV export; NaN becomes an empty field."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row_id", "label", "split", *self.column_names])
            for i in range(self.n_rows):
                vals = ["" if math.isnan(v) else repr(float(v)) for v in self.values[i].tolist()]
                w.writerow([int(self.row_ids[i]), int(self.labels[i]),
                            _TAG_NAMES.get(int(self.split_tags[i]), ""), *vals])


def write_matrix(matrix: FeatureMatrix, path: str | Path) -> None:
    Path(path).write_bytes(matrix.to_bytes())


def read_matrix(path: str | Path) -> FeatureMatrix:
    return FeatureMatrix.from_bytes(Path(path).read_bytes())


def read_matrix_csv(path: str | Path) -> FeatureMatrix:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = list(r)
    names = header[3:]
    tag_codes = {v: k for k, v in _TAG_NAMES.items()}
    ids = np.array([int(x[0]) for x in rows], dtype=np.uint64)
    labels = np.array([int(x[1]) for x in rows], dtype=np.uint8)
    tags = np.array([tag_codes[x[2]] for x in rows], dtype=np.uint8)
    values = np.array([[float(v) if v != "" else math.nan for v in x[3:]] for x in rows],
                      dtype=np.float32).reshape(len(rows), len(names))
    return FeatureMatrix(ids, names, values, labels, tags)
