import csv
import io

import pytest
from hypothesis import given, settings, strategies as st

from lsic.metrics import (METRIC_NAMES, RankedList, build_report, list_metrics, mean_average_precision,
                          mean_reciprocal_rank, ndcg_at_n, precision_at_n, reports_to_csv)

import oracles


def rl(flags, extra_relevant=0):
    """Ranked list of movies 0..len-1 with the flagged ones relevant."""
    movies = list(range(len(flags)))
    relevant = {m for m, f in zip(movies, flags) if f} | {1000 + k for k in range(extra_relevant)}
    return RankedList(0, movies, relevant)


@pytest.mark.parametrize("flags,n,expected", [([1, 1, 1], 3, 1.0), ([0, 1, 0, 0, 1], 5, 0.4),
                                              ([0, 0, 0], 3, 0.0)])
def test_precision_examples(flags, n, expected):
    assert precision_at_n(rl(flags), n) == pytest.approx(expected)


@pytest.mark.parametrize("flags,n,expected", [([1, 0, 0], 3, 1.0), ([0, 1, 0], 3, 0.6309),
                                              ([1, 0, 1], 3, 0.9197)])
def test_ndcg_examples(flags, n, expected):
    assert ndcg_at_n(rl(flags), n) == pytest.approx(expected, abs=1e-4)


def test_ndcg_without_relevant_is_zero():
    assert ndcg_at_n(rl([0, 0]), 3) == 0.0


@pytest.mark.parametrize("flags,expected", [([1, 0], 1.0), ([0, 1], 0.5), ([0, 0], 0.0)])
def test_mrr_examples(flags, expected):
    assert mean_reciprocal_rank(rl(flags)) == expected


@pytest.mark.parametrize("flags,expected", [([1, 1], 1.0), ([1, 0, 1], 0.8333), ([0, 0, 0, 1], 0.25)])
def test_map_examples(flags, expected):
    assert mean_average_precision(rl(flags)) == pytest.approx(expected, abs=1e-4)


def test_relevant_outside_list_counts_toward_ideal():
    assert mean_average_precision(rl([1], extra_relevant=1)) == 0.5
    assert ndcg_at_n(rl([1, 0], extra_relevant=1), 2) == pytest.approx(1 / (1 + 1 / 1.5849625007211562))


def test_n_must_be_positive():
    with pytest.raises(ValueError):
        precision_at_n(rl([1]), 0)
    with pytest.raises(ValueError):
        ndcg_at_n(rl([1]), 0)


def test_duplicate_movies_rejected():
    with pytest.raises(ValueError):
        RankedList(0, [1, 1], {1})


flag_lists = st.lists(st.booleans(), min_size=1, max_size=15)


@settings(max_examples=200, deadline=None)
@given(flag_lists, st.integers(0, 3))
def test_metrics_bounded(flags, extra):
    assert all(0.0 <= v <= 1.0 for v in list_metrics(rl(flags, extra)).values())


@settings(max_examples=200, deadline=None)
@given(flag_lists, st.integers(1, 12))
def test_ndcg_perfect_ordering_is_one(flags, n):
    if any(flags):
        ordered = sorted(flags, reverse=True)
        assert ndcg_at_n(rl(ordered), n) == pytest.approx(1.0)


@settings(max_examples=200, deadline=None)
@given(flag_lists, st.integers(0, 14))
def test_swapping_relevant_upward_never_hurts(flags, i):
    # moving a relevant item one rank up cannot lower any metric
    if i + 1 >= len(flags) or flags[i] or not flags[i + 1]:
        return
    better = list(flags)
    better[i], better[i + 1] = True, False
    a, b = list_metrics(rl(flags)), list_metrics(rl(better))
    assert all(b[k] >= a[k] - 1e-12 for k in METRIC_NAMES)


@settings(max_examples=200, deadline=None)
@given(flag_lists, st.integers(0, 2), st.integers(1, 12))
def test_matches_reference(flags, extra, n):
    total = sum(flags) + extra
    r = rl(flags, extra)
    assert precision_at_n(r, n) == pytest.approx(oracles.precision(flags, n), abs=1e-12)
    assert ndcg_at_n(r, n) == pytest.approx(oracles.ndcg(flags, n, total), abs=1e-12)
    assert mean_reciprocal_rank(r) == pytest.approx(oracles.mrr(flags), abs=1e-12)
    assert mean_average_precision(r) == pytest.approx(oracles.average_precision(flags, total), abs=1e-12)


def test_report_means_skip_users_without_positives():
    lists = [RankedList(1, [0, 1], {0}), RankedList(2, [0, 1], {1}), RankedList(3, [0, 1], set())]
    rep = build_report("x", lists, "abc")
    assert rep.user_count == 2
    assert rep["mrr"] == pytest.approx(0.75)
    rows = list(csv.reader(io.StringIO(rep.to_csv(per_user=True))))
    assert rows[0][-2:] == ["user_count", "config_hash"]
    assert rows[1][1] == "mean" and rows[1][-1] == "abc"
    assert len(rows) == 4


def test_empty_report_is_zero():
    rep = build_report("x", [])
    assert rep.user_count == 0 and all(v == 0.0 for v in rep.means.values())


def test_reports_to_csv_key_columns():
    a = build_report("a", [RankedList(1, [0], {0})])
    b = build_report("b", [RankedList(1, [0], {1})])
    rows = list(csv.reader(io.StringIO(reports_to_csv([a, b], {"N": [20, 50]}))))
    assert rows[0][:2] == ["N", "label"]
    assert [r[0] for r in rows[1:]] == ["20", "50"]
