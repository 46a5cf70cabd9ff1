import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deconfrec.data import SparseInteractions
from deconfrec.metrics import (MetricsReport, RankedList, RelevanceRule, evaluate, mae, mse,
                               ndcg, ndcg_user, per_item_accuracy, ranked_lists, recall_at_k)
from oracles import ndcg_brute, per_item_brute, recall_brute


def fixture(seed, n_users=10, n_items=15):
    """Random test matrix with at least one item per user and tied scores."""
    rng = np.random.default_rng(seed)
    rows, cols = [], []
    for u in range(n_users):
        k = int(rng.integers(1, n_items + 1))
        items = np.sort(rng.choice(n_items, k, replace=False))
        rows += [u] * k
        cols += items.tolist()
    vals = rng.integers(1, 6, len(rows)).astype(float)
    test = SparseInteractions(n_users, n_items, rows, cols, vals)
    pred = np.round(rng.normal(3, 1, test.nnz), 1)
    return test, pred


def as_dicts(test, pred):
    users = {}
    for u, i, p, y in zip(test.rows.tolist(), test.cols.tolist(), pred.tolist(),
                          test.vals.tolist()):
        users.setdefault(u, {})[i] = (p, y)
    return list(users.values())


class TestNDCG:
    def test_ideal(self):
        r = RankedList.from_predictions([0, 1, 2], [3.0, 2.0, 1.0], [5, 4, 1])
        assert ndcg_user(r) == 1.0

    def test_hand_two_items(self):
        worst_first = RankedList.from_predictions([0, 1], [1.0, 2.0], [5.0, 3.0])
        dcg = 7 / math.log2(2) + 31 / math.log2(3)
        idcg = 31 + 7 / math.log2(3)
        assert dcg == pytest.approx(26.558, abs=1e-3) and idcg == pytest.approx(35.417, abs=1e-3)
        assert ndcg_user(worst_first) == pytest.approx(dcg / idcg, abs=1e-15)
        assert ndcg_user(worst_first) == pytest.approx(0.7499, abs=1e-4)
        both = [ndcg_brute([{0: (s0, 5.0), 1: (s1, 3.0)}]) for s0, s1 in ((1, 2), (2, 1))]
        assert both[0] == pytest.approx(ndcg_user(worst_first), abs=1e-12) and both[1] == 1.0

    def test_single_item(self):
        assert ndcg_user(RankedList.from_predictions([4], [-9.0], [2.0])) == 1.0

    def test_literal_gain(self):
        r = RankedList.from_predictions([0, 1], [1.0, 2.0], [5.0, 3.0])
        expected = (4 + 16 / math.log2(3)) / (16 + 4 / math.log2(3))
        assert ndcg_user(r, "literal_paper") == pytest.approx(expected, abs=1e-15)

    def test_all_zero_gain(self):
        assert ndcg_user(RankedList.from_predictions([0, 1], [1.0, 2.0], [0.0, 0.0])) == 1.0

    def test_empty_user_rejected(self):
        with pytest.raises(ValueError):
            ndcg([RankedList.from_predictions([], [], [])])

    @given(st.lists(st.tuples(st.integers(-20, 20), st.integers(1, 5)), min_size=1, max_size=12))
    def test_bounds_and_monotone_invariance(self, pairs):
        s = np.array([p[0] / 4 for p in pairs])
        y = np.array([p[1] for p in pairs], dtype=float)
        items = np.arange(len(pairs))
        v = ndcg_user(RankedList.from_predictions(items, s, y))
        assert 0 <= v <= 1 + 1e-12
        w = ndcg_user(RankedList.from_predictions(items, np.exp(s) * 3 + 1, y))
        assert v == pytest.approx(w, abs=1e-12)

    @given(st.lists(st.integers(1, 5), min_size=1, max_size=10))
    def test_one_iff_ideal(self, ratings):
        y = np.array(ratings, dtype=float)
        ideal = RankedList.from_predictions(np.arange(len(y)), y, y)
        assert ndcg_user(ideal) == pytest.approx(1.0)
        rev = RankedList.from_predictions(np.arange(len(y)), -y, y)
        if len(set(ratings)) > 1:
            assert ndcg_user(rev) < 1.0


class TestRecall:
    def test_examples(self):
        rule = RelevanceRule(3)
        r = RankedList.from_predictions(range(7), [7, 6, 5, 4, 3, 2, 1],
                                        [5, 1, 1, 1, 1, 4, 1])
        assert recall_at_k([r], 5, rule) == 0.5
        r = RankedList.from_predictions(range(3), [3, 2, 1], [5, 4, 1])
        assert recall_at_k([r], 5, rule) == 1.0

    def test_k_beyond_length(self):
        r = RankedList.from_predictions(range(3), [1, 3, 2], [5, 4, 1])
        assert recall_at_k([r], 50) == recall_at_k([r], 3)

    def test_skips_users_without_relevant(self):
        a = RankedList.from_predictions([0], [1.0], [1.0])
        b = RankedList.from_predictions([0, 1], [1.0, 2.0], [5.0, 1.0])
        assert recall_at_k([a, b], 1) == 0.0
        assert math.isnan(recall_at_k([a], 1))
        with pytest.raises(ValueError):
            recall_at_k([b], 0)

    @given(st.lists(st.tuples(st.floats(-5, 5), st.integers(1, 5)), min_size=1, max_size=12))
    def test_hits_non_decreasing_in_k(self, pairs):
        r = RankedList.from_predictions(range(len(pairs)), [p[0] for p in pairs],
                                        [p[1] for p in pairs])
        rel = RelevanceRule().relevant(r.ratings)
        hits = [int(rel[:k].sum()) for k in range(1, 14)]
        assert all(b >= a for a, b in zip(hits, hits[1:]))
        # once k covers the relevant set the denominator is fixed
        n_rel = int(rel.sum())
        if n_rel:
            vals = [recall_at_k([r], k) for k in range(n_rel, 14)]
            assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_min_denominator_can_decrease_in_k(self):
        # relevant, irrelevant, relevant: 1/min(1,2) then 1/min(2,2)
        r = RankedList.from_predictions(range(3), [3, 2, 1], [3, 1, 3])
        assert recall_at_k([r], 1) == 1.0 and recall_at_k([r], 2) == 0.5


class TestAccuracy:
    def test_examples(self):
        assert mse([(3, 5), (4, 4)]) == 2.0 and mae([(3, 5), (4, 4)]) == 1.0
        assert mse([(2, 2), (1, 1)]) == 0.0
        with pytest.raises(ValueError):
            mse([])

    @given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=1))
    def test_jensen(self, pairs):
        assert mse(pairs) >= mae(pairs) ** 2 - 1e-9

    def test_per_item_vs_pooled(self):
        # item 0: ten errors of 1; item 1: one error of 2
        rows = list(range(11))
        cols = [0] * 10 + [1]
        test = SparseInteractions(11, 2, rows, cols, [3.0] * 11)
        pred = np.array([4.0] * 10 + [5.0])
        item_mse, _ = per_item_accuracy(test, pred)
        assert item_mse == pytest.approx(2.5)
        assert mse(np.column_stack([pred, test.vals])) == pytest.approx(14 / 11)

    def test_one_item_equals_plain(self):
        test = SparseInteractions(3, 1, [0, 1, 2], [0, 0, 0], [1.0, 2.0, 5.0])
        pred = np.array([2.0, 2.5, 3.0])
        m, a = per_item_accuracy(test, pred)
        pairs = np.column_stack([pred, test.vals])
        assert m == pytest.approx(mse(pairs)) and a == pytest.approx(mae(pairs))

    def test_duplicate_rating_invariance(self):
        test = SparseInteractions(2, 2, [0, 0], [0, 1], [3.0, 4.0])
        base = per_item_accuracy(test, np.array([4.0, 4.5]))
        dup = SparseInteractions(2, 2, [0, 0, 1], [0, 1, 1], [3.0, 4.0, 4.0])
        assert per_item_accuracy(dup, np.array([4.0, 4.5, 4.5])) == pytest.approx(base)

    def test_equal_counts_matches_pooled(self):
        rng = np.random.default_rng(0)
        u, i = np.indices((4, 3)).reshape(2, -1)
        test = SparseInteractions(4, 3, u, i, rng.integers(1, 6, 12))
        pred = rng.normal(3, 1, 12)
        assert per_item_accuracy(test, pred)[0] == pytest.approx(
            mse(np.column_stack([pred, test.vals])))


@pytest.mark.parametrize("seed", range(20))
def test_brute_force_fixtures(seed):
    test, pred = fixture(seed)
    users = as_dicts(test, pred)
    lists = ranked_lists(test, pred)
    assert abs(ndcg(lists) - ndcg_brute(users)) <= 1e-12
    assert abs(ndcg(lists, "literal_paper") - ndcg_brute(users, "literal")) <= 1e-12
    assert abs(recall_at_k(lists, 5) - recall_brute(users, 5)) <= 1e-12
    pairs = list(zip(pred.tolist(), test.vals.tolist()))
    assert abs(mse(pairs) - sum((p - y) ** 2 for p, y in pairs) / len(pairs)) <= 1e-12
    assert abs(mae(pairs) - sum(abs(p - y) for p, y in pairs) / len(pairs)) <= 1e-12
    bm, ba = per_item_brute(zip(test.cols.tolist(), pred.tolist(), test.vals.tolist()))
    m, a = per_item_accuracy(test, pred)
    assert abs(m - bm) <= 1e-12 and abs(a - ba) <= 1e-12


def test_report_round_trip(tmp_path):
    test, pred = fixture(0)
    rep = evaluate(test, pred, k=5)
    rep.to_csv(tmp_path / "m.csv")
    back = MetricsReport.from_csv(tmp_path / "m.csv")
    assert back.rows == rep.rows
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "metric,scope,value"
    assert rep.get("ndcg") == ndcg(ranked_lists(test, pred))
    assert set(rep.as_dict()) >= {"ndcg:user", "recall@5:user", "mse:pooled", "mse:item"}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_ranked_list_is_permutation(seed):
    test, pred = fixture(seed, 4, 8)
    for u, r in ranked_lists(test, pred).items():
        assert sorted(r.items.tolist()) == test.row(u)[0].tolist()
