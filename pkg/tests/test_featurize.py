import csv
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chronofeat.featurize import (
    SpecGrid,
    TECacheMismatchError,
    expected_feature_count,
    feature_columns,
    featurize_fold,
)
from chronofeat.folds import build_fold
from chronofeat.ingest import AVAZU_CATEGORICAL_COLUMNS
from chronofeat.matrix import (
    FeatureMatrix,
    MatrixFormatError,
    read_matrix,
    read_matrix_csv,
    write_matrix,
)
from chronofeat.te import te_cache_matrix
from chronofeat.timeagg import DEFAULT_ENTITY_KEYS, SHAPES, WindowSpec
from oracles import avazu_toy_log, random_log
from reference_values import REFERENCE_FEATURE_COUNTS


def mat(n=4, k=3, seed=0):
    rng = np.random.default_rng(seed)
    values = rng.normal(size=(n, k)).astype(np.float32)
    if n and k:
        values[0, 0] = np.nan
    return FeatureMatrix(np.arange(n, dtype=np.uint64) + 7, [f"f{j}" for j in range(k)], values,
                         rng.integers(0, 2, n), np.arange(n) % 3)


class TestFeatureCounts:
    @pytest.mark.parametrize("key", sorted(REFERENCE_FEATURE_COUNTS))
    def test_reference_counts(self, key):
        lengths, shape = key
        assert expected_feature_count(WindowSpec(lengths, shape), True) == REFERENCE_FEATURE_COUNTS[key]

    @pytest.mark.parametrize("key", sorted(REFERENCE_FEATURE_COUNTS))
    def test_te_off_drops_43(self, key):
        spec = WindowSpec(*key)
        assert expected_feature_count(spec, False) == expected_feature_count(spec, True) - 43

    def test_te_only(self):
        assert expected_feature_count(None, True) == 44
        assert expected_feature_count(None, False) == 1

    def test_actual_columns_on_toy_log(self):
        log = avazu_toy_log()
        fold = build_fold(log, 0)
        cache = te_cache_matrix(log)
        for spec, te_on in SpecGrid(shapes=["none", *SHAPES]).specs():
            m = featurize_fold(log, fold, spec, te_on, cache if te_on else None)
            assert m.n_cols == expected_feature_count(spec, te_on)
            assert list(m.column_names) == feature_columns(spec, te_on, AVAZU_CATEGORICAL_COLUMNS)


class TestFeaturizeFold:
    log = random_log(4, 800, n_days=5)
    keys = ("device_ip", "app_id", "site_id")

    def test_cache_matches_on_the_fly(self):
        fold = build_fold(self.log, 1)
        spec = WindowSpec((1, 6, 24), "calendar")
        a = featurize_fold(self.log, fold, spec, True, None, self.keys)
        b = featurize_fold(self.log, fold, spec, True, te_cache_matrix(self.log), self.keys)
        assert a.equals(b)

    def test_row_range_and_tags(self):
        fold = build_fold(self.log, 1)
        m = featurize_fold(self.log, fold, WindowSpec((1, 6)), False, None, self.keys)
        lo, hi = fold.hours
        inside = (self.log.hours >= lo) & (self.log.hours < hi)
        assert np.array_equal(m.row_ids, self.log.row_ids[inside])
        assert set(np.unique(m.split_tags)) <= {0, 1, 2}
        assert m.split("test").n_rows == fold.stats["test"].n_rows
        assert m.split("train").n_rows == fold.stats["train"].n_rows

    def test_cache_missing_rows(self):
        fold = build_fold(self.log, 0)
        cache = te_cache_matrix(self.log).take(np.arange(10, len(self.log)))
        with pytest.raises(TECacheMismatchError, match="missing"):
            featurize_fold(self.log, fold, None, True, cache, self.keys)

    def test_cache_missing_columns(self):
        fold = build_fold(self.log, 0)
        cache = te_cache_matrix(self.log, columns=("device_ip",))
        with pytest.raises(TECacheMismatchError, match="lacks columns"):
            featurize_fold(self.log, fold, None, True, cache, self.keys)

    def test_deterministic(self):
        fold = build_fold(self.log, 0)
        spec = WindowSpec((1, 6, 24), "event50", event_n=9)
        a = featurize_fold(self.log, fold, spec, True, None, self.keys).to_bytes()
        b = featurize_fold(self.log, fold, spec, True, None, self.keys).to_bytes()
        assert a == b

    def test_nan_for_unseen_recency(self):
        fold = build_fold(self.log, 0)
        m = featurize_fold(self.log, fold, WindowSpec((1,)), False, None, self.keys)
        first = m.values[0]
        assert math.isnan(first[list(m.column_names).index("device_ip__recency_h")])


class TestSpecGrid:
    def test_full_grid_cardinality(self):
        grid = SpecGrid()
        assert len(grid.specs()) == 4 * 5 * 2
        assert len(grid.specs()) * len(grid.folds) == 80

    def test_te_only_cell(self):
        specs = SpecGrid(lengths=[(1, 6)], shapes=["none", "trailing"], te=[True, False]).specs()
        assert (None, True) in specs
        assert sum(s is None for s, _ in specs) == 1

    def test_event_n_axis_only_on_event_shape(self):
        specs = SpecGrid(lengths=[(1, 6)], shapes=["trailing", "event50"], te=[True],
                         event_n=[10, 25, 50, 100, 200]).specs()
        assert sum(s.shape == "trailing" for s, _ in specs) == 1
        assert sorted(s.event_n for s, _ in specs if s.shape == "event50") == [10, 25, 50, 100, 200]

    def test_dict_round_trip(self):
        grid = SpecGrid(lengths=[(1, 6)], shapes=["gap1"], te=[False], event_n=[5], folds=[1])
        assert SpecGrid.from_dict(grid.to_dict()) == grid
        assert SpecGrid.from_dict({"te": ["on", "off"]}).te == [True, False]
        assert SpecGrid.from_dict({"folds": ["A", "B", 2]}).folds == [0, 1, 2]

    def test_unknown_shape(self):
        with pytest.raises(ValueError):
            SpecGrid(shapes=["decay"])


class TestMatrixFormat:
    def test_round_trip(self, tmp_path):
        m = mat(6, 4)
        write_matrix(m, tmp_path / "m.fmx")
        back = read_matrix(tmp_path / "m.fmx")
        assert back.equals(m)
        assert math.isnan(back.values[0, 0])

    def test_empty(self):
        for m in (mat(0, 3), mat(5, 0), mat(0, 0)):
            assert FeatureMatrix.from_bytes(m.to_bytes()).equals(m)

    def test_layout(self):
        m = FeatureMatrix([1], ["a"], [[1.5]], [1], [2])
        data = m.to_bytes()
        assert data[:4] == b"FMX1"
        assert struct.unpack_from("<HQI", data, 4) == (1, 1, 1)
        assert data[18:22] == struct.pack("<I", 1) and data[22:23] == b"a"
        assert data[23:31] == struct.pack("<Q", 1)
        assert data[31:33] == b"\x01\x02"
        assert data[33:] == struct.pack("<f", 1.5)

    def test_corruption(self):
        data = mat(5, 3).to_bytes()
        with pytest.raises(MatrixFormatError, match="magic"):
            FeatureMatrix.from_bytes(b"XXXX" + data[4:])
        with pytest.raises(MatrixFormatError, match="version"):
            FeatureMatrix.from_bytes(data[:4] + struct.pack("<H", 9) + data[6:])
        with pytest.raises(MatrixFormatError, match="truncated"):
            FeatureMatrix.from_bytes(data[:-1])
        with pytest.raises(MatrixFormatError, match="trailing"):
            FeatureMatrix.from_bytes(data + b"\0")
        with pytest.raises(MatrixFormatError):
            FeatureMatrix.from_bytes(data[:10])

    @given(st.integers(0, 30), st.integers(0, 6), st.integers(0, 99))
    @settings(max_examples=30)
    def test_truncation_always_detected(self, n, k, cut):
        data = mat(n, k).to_bytes()
        cut = cut % len(data)
        with pytest.raises(MatrixFormatError):
            FeatureMatrix.from_bytes(data[:cut])

    def test_csv_export(self, tmp_path):
        m = mat(5, 3)
        m.write_csv(tmp_path / "m.csv")
        rows = list(csv.reader(open(tmp_path / "m.csv")))
        assert rows[0] == ["row_id", "label", "split", "f0", "f1", "f2"]
        assert rows[1][3] == ""
        assert read_matrix_csv(tmp_path / "m.csv").equals(m)

    def test_validation(self):
        with pytest.raises(ValueError):
            FeatureMatrix([1, 2], ["a"], [[1.0]], [0, 1], [0, 0])
        with pytest.raises(ValueError):
            FeatureMatrix([1], ["a", "a"], [[1.0, 2.0]], [0], [0])

    def test_default_entity_keys(self):
        assert DEFAULT_ENTITY_KEYS == ("device_ip", "device_id", "app_id", "site_id")
