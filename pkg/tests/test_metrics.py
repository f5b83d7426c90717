import logging
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from mpdr.data import Corpus, Positive, QueryRecord, Tier
from mpdr.encoder import EncoderParams, init_params
from mpdr.errors import InputError, MetricError, ParseError
from mpdr.metrics import (MetricsReport, RankedList, accuracy_at_k, betainc, compare_reports, evaluate_model,
                          evaluate_rankings, mrr_at_k, ndcg_at_k, paired_t_test, random_ranking_mrr,
                          recall_at_k, resolve_metrics, retrieve_all, t_sf_two_sided)

DOCS = [f"d{i:02d}" for i in range(30)]


def ranked(ids):
    return RankedList("q", tuple(ids), np.arange(len(ids), 0, -1, dtype=float))


# ---------------------------------------------------------------- metric examples

def test_mrr_examples():
    assert mrr_at_k(DOCS, {"d02"}, 10) == pytest.approx(1 / 3)
    assert mrr_at_k(DOCS, {"d15"}, 10) == 0.0
    assert mrr_at_k(DOCS, {"d00", "d05"}, 10) == 1.0


def test_recall_examples():
    assert recall_at_k(DOCS, {"d00", "d03", "d20", "d25"}, 10) == 0.5
    assert recall_at_k(DOCS, {"d07", "d29"}, 30) == 1.0
    assert recall_at_k(DOCS, {"d07", "d29"}, 500) == 1.0


def test_ndcg_examples():
    assert ndcg_at_k(DOCS, {"d00", "d01", "d02"}, 3) == pytest.approx(1.0)
    expected = (1 + 1 / math.log2(4)) / (1 + 1 / math.log2(3))
    assert ndcg_at_k(DOCS, {"d00", "d02"}, 10) == pytest.approx(expected, abs=1e-14)
    assert ndcg_at_k(DOCS, {"d00", "d02"}, 10) == pytest.approx(0.91972, abs=5e-6)
    assert ndcg_at_k(DOCS, {"d20"}, 10) == 0.0


def test_accuracy_examples():
    assert accuracy_at_k(DOCS, {"d19"}, 20) == 1.0
    assert accuracy_at_k(DOCS, {"d20"}, 20) == 0.0


@pytest.mark.parametrize("fn", [mrr_at_k, recall_at_k, ndcg_at_k, accuracy_at_k])
def test_empty_relevant_set_undefined(fn):
    with pytest.raises(MetricError):
        fn(DOCS, set(), 10)
    with pytest.raises(MetricError):
        fn(DOCS, {"d00"}, 0)


# ---------------------------------------------------------------- brute-force oracles

def oracle_mrr(ids, rel, k):
    for i, d in enumerate(ids[:k]):
        if d in rel:
            return 1 / (i + 1)
    return 0.0


def oracle_recall(ids, rel, k):
    return len(set(ids[:k]) & rel) / len(rel)


def oracle_ndcg(ids, rel, k):
    dcg = sum(1 / math.log2(i + 2) for i, d in enumerate(ids[:k]) if d in rel)
    idcg = sum(1 / math.log2(i + 2) for i in range(min(len(rel), k)))
    return dcg / idcg


def oracle_accuracy(ids, rel, k):
    return float(any(d in rel for d in ids[:k]))


ORACLES = [(mrr_at_k, oracle_mrr), (recall_at_k, oracle_recall), (ndcg_at_k, oracle_ndcg),
           (accuracy_at_k, oracle_accuracy)]


def test_metrics_match_oracles_on_random_lists():
    rng = np.random.default_rng(0)
    for _ in range(200):
        ids = list(rng.permutation(DOCS))
        rel = set(rng.choice(DOCS, size=int(rng.integers(1, 6)), replace=False))
        k = int(rng.integers(1, 35))
        for fn, ref in ORACLES:
            assert fn(ids, rel, k) == pytest.approx(ref(ids, rel, k), abs=1e-14)


def test_accuracy_aggregate_counts_hits():
    rankings = [RankedList(f"q{i}", tuple(np.roll(DOCS, -i)), np.zeros(30)) for i in range(6)]
    corpus = Corpus(DOCS, np.zeros((30, 2)), [
        QueryRecord(f"q{i}", np.zeros(2), (Positive("d25", Tier.LLM, 1),), ("d00",)) for i in range(6)])
    report = evaluate_rankings(rankings, corpus, [("Accuracy", 20)])
    # d25 sits at position 25 - i, inside the top 20 for i >= 6 only
    hits = sum(1 for i in range(6) if 25 - i < 20)
    assert report.aggregate["Accuracy@20"] == hits / 6


relevant_sets = st.sets(st.sampled_from(DOCS), min_size=1, max_size=6)


@given(st.permutations(DOCS), relevant_sets, st.integers(1, 30), st.randoms(use_true_random=False))
def test_metrics_ignore_order_below_k(ids, rel, k, rnd):
    tail = list(ids[k:])
    rnd.shuffle(tail)
    shuffled = list(ids[:k]) + tail
    for fn, _ in ORACLES:
        assert fn(ids, rel, k) == fn(shuffled, rel, k)


@given(st.permutations(DOCS), relevant_sets, st.integers(1, 30))
def test_metric_relations(ids, rel, k):
    for fn, _ in ORACLES:
        assert 0.0 <= fn(ids, rel, k) <= 1.0
    assert mrr_at_k(ids, rel, k) <= accuracy_at_k(ids, rel, k)
    top = list(rel) + [d for d in ids if d not in rel]
    if len(rel) <= k:
        assert recall_at_k(top, rel, k) == 1.0
        assert ndcg_at_k(top, rel, k) == pytest.approx(1.0, abs=1e-15)


# ---------------------------------------------------------------- retrieval

def test_retrieve_single_document():
    corpus = Corpus(["only"], [[1.0, 2.0]], [QueryRecord("q", [3.0, -1.0], (("only", "LLM", 1),), ())])
    (r,) = retrieve_all(init_params(2, 2, 0), corpus, 1)
    assert r.ranked_doc_ids == ("only",)


def test_retrieve_identity_encoder():
    feats = np.eye(4)
    corpus = Corpus(["a", "b", "c", "e"], feats, [
        QueryRecord("q", feats[2], (("c", "LLM", 1),), ("a",))])
    (r,) = retrieve_all(EncoderParams(np.eye(4)), corpus, 4)
    assert r.ranked_doc_ids[0] == "c"
    # the three zero-score docs tie and fall back to ascending id
    assert r.ranked_doc_ids[1:] == ("a", "b", "e")


def test_retrieve_matches_sort_oracle():
    rng = np.random.default_rng(3)
    ids = [f"x{i}" for i in rng.permutation(60)]
    feats = np.round(rng.normal(size=(60, 5)), 1)  # coarse values force some ties
    queries = [QueryRecord(f"q{i}", np.round(rng.normal(size=5), 1), ((ids[i], "LLM", 1),), ()) for i in range(10)]
    corpus = Corpus(ids, feats, queries)
    p = EncoderParams(np.eye(5))
    out = retrieve_all(p, corpus, 25)
    for q, r in zip(queries, out):
        scores = [float(q.features @ f) for f in feats]
        brute = sorted(range(60), key=lambda i: (-scores[i], ids[i]))[:25]
        assert r.ranked_doc_ids == tuple(ids[i] for i in brute)
        assert np.all(np.diff(r.scores) <= 0)
    again = retrieve_all(p, corpus, 25)
    assert [r.ranked_doc_ids for r in again] == [r.ranked_doc_ids for r in out]


def test_retrieve_errors(small_corpus):
    with pytest.raises(InputError):
        retrieve_all(init_params(32, 16, 0), small_corpus, small_corpus.size + 1)
    with pytest.raises(InputError):
        retrieve_all(init_params(8, 4, 0), small_corpus, 10)


def test_untrained_model_is_near_chance(desk_corpus):
    expected = np.mean([random_ranking_mrr(desk_corpus.size, len(q.positives), 10) for q in desk_corpus.queries])
    observed = np.mean([evaluate_model(init_params(32, 16, s), desk_corpus, [("MRR", 10)]).aggregate["MRR@10"]
                        for s in range(5)])
    assert 0.25 <= observed / expected <= 4.0


def test_random_ranking_mrr_formula():
    assert random_ranking_mrr(10, 1, 10) == pytest.approx(sum(1 / r for r in range(1, 11)) / 10)
    assert random_ranking_mrr(5, 5, 10) == 1.0
    # Monte Carlo cross-check
    rng = np.random.default_rng(0)
    rel = {0, 1, 2}
    sims = [oracle_mrr(list(rng.permutation(50)), rel, 10) for _ in range(20000)]
    assert random_ranking_mrr(50, 3, 10) == pytest.approx(np.mean(sims), abs=0.01)


# ---------------------------------------------------------------- metric set and reports

def test_resolve_metrics_clamps(caplog):
    with caplog.at_level(logging.WARNING):
        names = resolve_metrics(500)
    assert names == [("MRR", 10), ("Recall", 100), ("Recall", 500), ("NDCG", 10), ("Accuracy", 20), ("Accuracy", 100)]
    assert "Recall@1000 exceeds corpus size" in caplog.text
    assert resolve_metrics(50, cutoffs=[5, 100])[-4:] == [("MRR", 50), ("Recall", 50), ("NDCG", 50), ("Accuracy", 50)]
    with pytest.raises(MetricError):
        resolve_metrics(50, [("MAP", 10)])


def test_report_csv_round_trip_and_schema(small_corpus):
    report = evaluate_model(init_params(32, 16, 0), small_corpus)
    text = report.to_csv()
    lines = text.splitlines()
    assert lines[0] == "query_id,metric,value"
    assert lines[1].startswith("q00,MRR@10,")
    assert [line.split(",")[1] for line in lines if line.startswith("AGGREGATE")] == [
        "MRR@10", "Recall@100", "Recall@800", "NDCG@10", "Accuracy@20", "Accuracy@100"]
    assert len(lines) == 1 + 30 * 6 + 6
    back = MetricsReport.from_csv(text)
    assert back.per_query == report.per_query and back.aggregate == report.aggregate
    for name in report.metric_names:
        assert report.aggregate[name] == pytest.approx(np.mean(report.values(name)), abs=1e-15)
    assert "(30 queries)" in report.to_table()
    with pytest.raises(ParseError):
        MetricsReport.from_csv("id,m,v\n")
    with pytest.raises(ParseError, match="line 2"):
        MetricsReport.from_csv("query_id,metric,value\nq,MRR@10,abc\n")


# ---------------------------------------------------------------- paired t-test

def t_density(x, df):
    c = math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2)) / math.sqrt(df * math.pi)
    return c * (1 + x * x / df) ** (-(df + 1) / 2)


def quad_two_sided(t, df):
    tail, _ = integrate.quad(t_density, abs(t), np.inf, args=(df,), epsabs=1e-14, epsrel=1e-12)
    return 2 * tail


def test_t_test_identical_lists():
    res = paired_t_test([0.1, 0.5, 0.9], [0.1, 0.5, 0.9])
    assert res.t_statistic == 0.0 and res.p_value == 1.0 and res.zero_variance


def test_t_test_constant_difference_flagged():
    res = paired_t_test([1.0, 2.0, 3.0], [0.5, 1.5, 2.5])
    assert res.zero_variance and res.p_value == 0.0 and res.t_statistic == math.inf


def test_t_test_errors():
    with pytest.raises(InputError):
        paired_t_test([1.0], [2.0])
    with pytest.raises(InputError):
        paired_t_test([1.0, 2.0], [2.0])


def test_t_test_p_values_match_numerical_integration():
    rng = np.random.default_rng(12)
    for trial in range(40):
        a = rng.normal(size=30)
        b = a + rng.normal(loc=0.3 * (trial % 4) / 3, size=30)
        res = paired_t_test(a, b)
        d = a - b
        t = d.mean() / (d.std(ddof=1) / math.sqrt(30))
        assert res.t_statistic == pytest.approx(t, rel=1e-12)
        assert res.p_value == pytest.approx(quad_two_sided(t, 29), abs=1e-6)


@pytest.mark.parametrize("df", [1, 2, 5, 29, 200])
def test_t_tail_against_integration(df):
    for t in (0.0, 0.3, 1.0, 2.5, 6.0):
        assert t_sf_two_sided(t, df) == pytest.approx(quad_two_sided(t, df), abs=1e-9)


def test_betainc_edges():
    assert betainc(2.0, 3.0, 0.0) == 0.0 and betainc(2.0, 3.0, 1.0) == 1.0
    # I_x(1, 1) = x
    assert betainc(1.0, 1.0, 0.37) == pytest.approx(0.37, abs=1e-14)
    with pytest.raises(ValueError):
        betainc(1.0, 1.0, 1.5)


def test_compare_reports_marks():
    base = MetricsReport({f"q{i}": {"m": 0.1 * i} for i in range(10)}, {"m": 0.45})
    better = MetricsReport({f"q{i}": {"m": 0.1 * i + 0.2 + 0.01 * (i % 3)} for i in range(10)}, {"m": 0.0})
    (row,) = compare_reports(better, base)
    assert row.mark == "+" and row.p_value < 0.05
    (row,) = compare_reports(base, better)
    assert row.mark == "-"
    (row,) = compare_reports(base, base)
    assert row.mark == "" and row.p_value == 1.0
