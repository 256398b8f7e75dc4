import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chronofeat.ingest import EventLog, ImpressionEvent, LogSchema
from chronofeat.matrix import FeatureMatrix
from chronofeat.te import (
    PriorState,
    TEState,
    UnsortedInputError,
    hist_imps,
    prior_ctr,
    te_cache_matrix,
    te_pass,
    te_value,
)
from oracles import random_log, te_oracle

SCHEMA = LogSchema(categorical_columns=("site_id", "app_id"))


def toy(rows):
    """rows: (hour, click, site, app)"""
    return EventLog.from_events(
        [ImpressionEvent(100 + i, h, c, (s, a)) for i, (h, c, s, a) in enumerate(rows)], SCHEMA)


def block_dict(block):
    return dict(zip(block.column_names(), block.values().T))


class TestPrior:
    def test_empty(self):
        assert prior_ctr(PriorState()) == pytest.approx(1 / 11, abs=0)

    def test_hand_values(self):
        assert prior_ctr(PriorState(989, 159)) == 0.16
        assert prior_ctr(PriorState(89, 89)) == 0.9

    @given(st.integers(0, 10**9), st.data())
    def test_open_interval(self, imps, data):
        clicks = data.draw(st.integers(0, imps))
        p = prior_ctr(PriorState(imps, clicks))
        assert 0 < p < 1


class TestTEValue:
    def test_unseen_returns_prior(self):
        assert te_value(TEState(), "site_id", "x", 0.17) == 0.17

    def test_hand_value(self):
        s = TEState()
        s.update("site_id", ["v"] * 100, [1] * 20 + [0] * 80)
        assert te_value(s, "site_id", "v", 0.17) == pytest.approx(0.185, abs=1e-15)

    def test_limit(self):
        s = TEState()
        s.update("c", ["v"] * 10**6, np.r_[np.ones(300_000, int), np.zeros(700_000, int)])
        assert abs(te_value(s, "c", "v", 0.05) - 0.3) < 1e-4

    def test_hist_imps(self):
        s = TEState()
        assert hist_imps(s, "c", "v") == 0.0
        s.update("c", ["v"], [0])
        assert hist_imps(s, "c", "v") == pytest.approx(0.693147, abs=1e-6)
        s.update("c", ["v"] * 98, [0] * 98)
        assert hist_imps(s, "c", "v") == pytest.approx(4.60517, abs=1e-5)
        assert hist_imps(s, "c", "v") == math.log(100)


class TestTEPass:
    def test_first_hour_is_prior(self):
        block = te_pass(toy([(5, 1, "a", "x"), (5, 0, "b", "y"), (6, 0, "a", "x")]))
        d = block_dict(block)
        assert np.all(d["prior_ctr"][:2] == 1 / 11)
        assert np.all(d["site_id__te"][:2] == 1 / 11)
        assert np.all(d["site_id__hist_imps"][:2] == 0.0)

    def test_same_hour_rows_do_not_see_each_other(self):
        d = block_dict(te_pass(toy([(5, 1, "a", "x"), (7, 1, "a", "x"), (7, 0, "a", "x")])))
        assert d["site_id__te"][1] == d["site_id__te"][2]
        assert d["site_id__hist_imps"][1] == d["site_id__hist_imps"][2] == math.log(2)
        prior = (1 + 1) / (1 + 11)
        assert d["prior_ctr"][1] == prior
        assert d["site_id__te"][1] == (1 + 100 * prior) / (1 + 100)

    def test_hour_of_day(self):
        d = block_dict(te_pass(toy([(48 + 3, 0, "a", "x"), (48 + 23, 0, "a", "x")])))
        assert list(d["hour_of_day"]) == [3.0, 23.0]

    def test_unsorted_rejected(self):
        with pytest.raises(UnsortedInputError):
            te_pass(toy([(6, 0, "a", "x"), (5, 0, "a", "x")]))

    def test_three_hour_oracle(self):
        log = toy([(0, 1, "a", "x"), (0, 0, "b", "x"), (1, 1, "a", "y"), (2, 0, "a", "x"), (2, 1, "b", "y")])
        got = block_dict(te_pass(log))
        want = te_oracle(log, SCHEMA.categorical_columns)
        for name, vals in want.items():
            assert list(got[name]) == vals, name

    @given(st.integers(0, 10_000))
    @settings(max_examples=15, deadline=None)
    def test_random_oracle(self, seed):
        log = random_log(seed, 300, cats=("site_id", "app_id", "C1"))
        got = block_dict(te_pass(log))
        want = te_oracle(log, log.schema.categorical_columns)
        for name, vals in want.items():
            assert list(got[name]) == vals, name

    @given(st.integers(0, 10_000), st.integers(0, 95))
    @settings(max_examples=20, deadline=None)
    def test_no_lookahead(self, seed, cut_offset):
        log = random_log(seed, 250, cats=("site_id", "app_id"))
        H = int(log.hours.min()) + cut_offset
        rng = np.random.default_rng(seed)
        base = te_pass(log).values()
        before = np.flatnonzero(log.hours < H)
        at = np.flatnonzero(log.hours == H)
        relabeled = log.take(np.arange(len(log)))
        future = log.hours >= H
        relabeled.clicks[future] = rng.integers(0, 2, future.sum())
        keep = np.flatnonzero(~future | (rng.random(len(log)) < 0.5))
        for variant, idx in ((relabeled, np.arange(len(log))), (log.take(keep), keep)):
            vals = te_pass(variant).values()
            pos = {int(r): i for i, r in enumerate(variant.row_ids)}
            for i in np.r_[before, at]:
                j = pos.get(int(log.row_ids[i]))
                if j is not None:
                    assert np.array_equal(vals[j], base[i])

    @given(st.integers(0, 10_000))
    @settings(max_examples=15, deadline=None)
    def test_within_hour_permutation(self, seed):
        log = random_log(seed, 250, cats=("site_id", "app_id"))
        rng = np.random.default_rng(seed)
        order = np.lexsort((rng.random(len(log)), log.hours))
        perm = log.take(order)
        a = te_pass(log).values()
        b = te_pass(perm).values()
        assert np.array_equal(a[order], b)

    @given(st.integers(0, 10_000))
    @settings(max_examples=10, deadline=None)
    def test_ranges_and_monotone_history(self, seed):
        log = random_log(seed, 300, cats=("site_id",))
        d = block_dict(te_pass(log))
        assert np.all((d["prior_ctr"] > 0) & (d["prior_ctr"] < 1))
        assert np.all((d["site_id__te"] > 0) & (d["site_id__te"] < 1))
        assert np.all(d["site_id__hist_imps"] >= 0)
        vals = log.cats["site_id"]
        for v in set(vals):
            series = d["site_id__hist_imps"][vals == v]
            assert np.all(np.diff(series) >= 0)


class TestCache:
    def test_cache_matrix(self):
        log = random_log(3, 200, cats=("site_id", "app_id"))
        m = te_cache_matrix(log)
        assert isinstance(m, FeatureMatrix)
        assert m.column_names[:2] == ("hour_of_day", "prior_ctr")
        assert set(m.column_names[2:]) == {"site_id__te", "site_id__hist_imps", "app_id__te", "app_id__hist_imps"}
        assert np.array_equal(m.row_ids, log.row_ids)
        assert np.all(m.split_tags == 255)
        assert np.array_equal(m.values, te_pass(log).values().astype(np.float32))
