"""Per-fold feature matrix assembly.

Column order is fixed: base features (``hour_of_day``, then ``prior_ctr``
when target encoding is on), the target-encoding block in schema column
order, then the window block in entity-key x window order.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .folds import FoldAssignment, parse_fold_id, split_codes
from .ingest import EventLog
from .matrix import FeatureMatrix
from .te import te_column_names, te_pass
from .timeagg import (
    DEFAULT_ENTITY_KEYS,
    DEFAULT_LENGTH_TUPLES,
    SHAPES,
    SmoothedRateParams,
    WindowSpec,
    timeagg_pass,
    window_columns,
)

logger = logging.getLogger(__name__)

_EXTRA_PAIRS = {"calendar": 2, "event50": 1}


class TECacheMismatchError(ValueError):
    pass


def expected_feature_count(spec: WindowSpec | None, te_on: bool, n_cat_columns: int = 21,
                           n_entity_keys: int = 4) -> int:
    base = 1 + (1 if te_on else 0)
    total = base + (2 * n_cat_columns if te_on else 0)
    if spec is not None:
        pairs = len(spec.lengths) + _EXTRA_PAIRS.get(spec.shape, 0)
        total += n_entity_keys * (2 * pairs + 1)
    return total


def feature_columns(spec: WindowSpec | None, te_on: bool, cat_columns: Sequence[str],
                    entity_keys: Sequence[str] = DEFAULT_ENTITY_KEYS) -> list[str]:
    names = ["hour_of_day"]
    if te_on:
        names.append("prior_ctr")
        names += te_column_names(cat_columns)
    if spec is not None:
        for e in entity_keys:
            names += [n for n, _ in window_columns(spec, e)]
    return names


def _align_cache(cache: FeatureMatrix, row_ids: np.ndarray, columns: list[str]) -> np.ndarray:
    missing = [c for c in columns if c not in cache.column_names]
    if missing:
        raise TECacheMismatchError(f"TE cache lacks columns {missing[:5]}")
    order = np.argsort(cache.row_ids, kind="stable")
    sorted_ids = cache.row_ids[order]
    if len(sorted_ids) > 1 and np.any(sorted_ids[1:] == sorted_ids[:-1]):
        raise TECacheMismatchError("TE cache has duplicate row ids")
    pos = np.searchsorted(sorted_ids, row_ids)
    pos_c = np.minimum(pos, max(len(sorted_ids) - 1, 0))
    if len(sorted_ids) == 0 and len(row_ids):
        raise TECacheMismatchError("TE cache is empty")
    found = sorted_ids[pos_c] == row_ids if len(row_ids) else np.ones(0, bool)
    if not np.all(found):
        n_bad = int((~found).sum())
        raise TECacheMismatchError(f"{n_bad} fold rows missing from TE cache (first id {row_ids[~found][0]})")
    rows = order[pos_c]
    col_idx = [cache.column_names.index(c) for c in columns]
    return cache.values[np.ix_(rows, col_idx)]


def fold_rows(log: EventLog, fold: FoldAssignment) -> EventLog:
    lo, hi = fold.hours
    return log.take(np.flatnonzero((log.hours >= lo) & (log.hours < hi)))


def featurize_fold(log: EventLog, fold: FoldAssignment, spec: WindowSpec | None, te_on: bool,
                   te_cache: FeatureMatrix | None = None,
                   entity_keys: Sequence[str] = DEFAULT_ENTITY_KEYS,
                   rate_params: SmoothedRateParams = SmoothedRateParams(),
                   te_params: dict | None = None) -> FeatureMatrix:
    """Feature matrix for every row in the fold's day range.

    ``spec=None`` gives the target-encoding-only configuration. Without a
    ``te_cache`` the encodings are computed on the fly over the fold range.
    """
    sub = fold_rows(log, fold)
    if not sub.is_sorted():
        raise ValueError("events must be sorted by hour")
    cat_columns = list(log.schema.categorical_columns)
    blocks = [(sub.hours % 24).astype(np.float64)[:, None]]
    names = ["hour_of_day"]
    if te_on:
        te_names = ["prior_ctr"] + te_column_names(cat_columns)
        if te_cache is None:
            block = te_pass(sub, cat_columns, **(te_params or {}))
            blocks.append(block.values()[:, 1:].astype(np.float32))
        else:
            blocks.append(_align_cache(te_cache, sub.row_ids, te_names))
        names += te_names
    if spec is not None:
        if spec.lengths[-1] > spec.horizon_cap:
            raise ValueError("spec horizon exceeds cap")
        agg_names, agg = timeagg_pass(sub, spec, entity_keys, params=rate_params)
        blocks.append(agg)
        names += agg_names
    values = np.hstack([b.astype(np.float32) for b in blocks]) if len(sub) else \
        np.zeros((0, len(names)), dtype=np.float32)
    return FeatureMatrix(sub.row_ids, names, values, sub.clicks, split_codes(sub.hours, fold))


@dataclass
class SpecGrid:
    """Design grid; ``"none"`` in shapes adds the target-encoding-only cell."""

    lengths: list[tuple[int, ...]] = field(default_factory=lambda: [tuple(t) for t in DEFAULT_LENGTH_TUPLES])
    shapes: list[str] = field(default_factory=lambda: list(SHAPES))
    te: list[bool] = field(default_factory=lambda: [True, False])
    event_n: list[int] = field(default_factory=lambda: [50])
    folds: list[int] = field(default_factory=lambda: [0, 1])

    def __post_init__(self) -> None:
        self.lengths = [tuple(int(x) for x in t) for t in self.lengths]
        self.folds = [f if isinstance(f, int) else parse_fold_id(str(f)) for f in self.folds]
        for s in self.shapes:
            if s != "none" and s not in SHAPES:
                raise ValueError(f"unknown shape {s!r}")
        for t in self.lengths:
            WindowSpec(t)  # validates

    def specs(self) -> list[tuple[WindowSpec | None, bool]]:
        """Every (spec, te flag) combination in lexicographic axis order."""
        out: list[tuple[WindowSpec | None, bool]] = []
        for te_on in self.te:
            if "none" in self.shapes and te_on:
                out.append((None, True))
            for lengths, shape in itertools.product(self.lengths, self.shapes):
                if shape == "none":
                    continue
                # N only matters for event windows; other shapes keep the default
                ns = self.event_n if shape == "event50" else [WindowSpec(lengths).event_n]
                for n in ns:
                    out.append((WindowSpec(lengths, shape, event_n=n), te_on))
        return out

    def to_dict(self) -> dict:
        return {"lengths": [list(t) for t in self.lengths], "shapes": list(self.shapes),
                "te": list(self.te), "event_n": list(self.event_n), "folds": list(self.folds)}

    @classmethod
    def from_dict(cls, d: dict) -> "SpecGrid":
        te = d.get("te", [True, False])
        te = [x if isinstance(x, bool) else str(x).lower() in ("on", "true", "1") for x in te]
        kw = {k: d[k] for k in ("lengths", "shapes", "event_n", "folds") if k in d}
        return cls(te=te, **kw)
