"""Exhaustive retrieval, ranking metrics and paired significance testing."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from mpdr.encoder import EncoderParams, score_matrix
from mpdr.errors import InputError, MetricError, ParseError

log = logging.getLogger(__name__)

#: (family, cutoff) pairs reported by default, before clamping to corpus size
DEFAULT_METRICS = (("MRR", 10), ("Recall", 100), ("Recall", 1000), ("NDCG", 10),
                   ("Accuracy", 20), ("Accuracy", 100))
FAMILIES = ("MRR", "Recall", "NDCG", "Accuracy")


@dataclass(frozen=True)
class RankedList:
    query_id: str
    ranked_doc_ids: tuple[str, ...]
    scores: np.ndarray


def retrieve_all(params: EncoderParams, corpus, k: int, scale: float = 1.0) -> list[RankedList]:
    """Top-``k`` documents per query by score; ties go to the smaller doc id."""
    if not 1 <= k <= corpus.size:
        raise InputError(f"k={k} must lie in [1, corpus size {corpus.size}]")
    if params.input_dim != corpus.input_dim:
        raise InputError(f"encoder input_dim {params.input_dim} != corpus dim {corpus.input_dim}")
    if not corpus.queries:
        return []
    queries = np.stack([q.features for q in corpus.queries])
    scores = score_matrix(params, queries, corpus.doc_features, scale)
    id_rank = np.empty(corpus.size, dtype=np.intp)
    id_rank[np.argsort(np.array(corpus.doc_ids), kind="stable")] = np.arange(corpus.size)
    out = []
    for q, row in zip(corpus.queries, scores):
        order = np.lexsort((id_rank, -row))[:k]
        out.append(RankedList(q.query_id, tuple(corpus.doc_ids[i] for i in order), row[order]))
    return out


def _prepare(ranked, relevant, k):
    if k < 1:
        raise MetricError(f"cutoff must be >= 1, got {k}")
    relevant = set(relevant)
    if not relevant:
        raise MetricError("relevant set is empty; metric undefined")
    ids = ranked.ranked_doc_ids if isinstance(ranked, RankedList) else tuple(ranked)
    return ids[:k], relevant


def mrr_at_k(ranked, relevant, k: int) -> float:
    top, relevant = _prepare(ranked, relevant, k)
    for rank, doc in enumerate(top, start=1):
        if doc in relevant:
            return 1.0 / rank
    return 0.0


def recall_at_k(ranked, relevant, k: int) -> float:
    top, relevant = _prepare(ranked, relevant, k)
    return len(relevant.intersection(top)) / len(relevant)


def ndcg_at_k(ranked, relevant, k: int) -> float:
    """Binary-gain NDCG."""
    top, relevant = _prepare(ranked, relevant, k)
    dcg = sum(1.0 / math.log2(rank + 1) for rank, doc in enumerate(top, start=1) if doc in relevant)
    ideal = sum(1.0 / math.log2(rank + 1) for rank in range(1, min(len(relevant), k) + 1))
    return dcg / ideal


def accuracy_at_k(ranked, relevant, k: int) -> float:
    top, relevant = _prepare(ranked, relevant, k)
    return 1.0 if relevant.intersection(top) else 0.0


METRIC_FUNCS = {"MRR": mrr_at_k, "Recall": recall_at_k, "NDCG": ndcg_at_k, "Accuracy": accuracy_at_k}


def resolve_metrics(corpus_size: int, metrics=None, cutoffs=None) -> list[tuple[str, int]]:
    """Clamp cutoffs to the corpus size and relabel with the effective k.

    With ``cutoffs`` every metric family is reported at every cutoff;
    otherwise ``metrics`` (default :data:`DEFAULT_METRICS`) is used.
    """
    if cutoffs is not None:
        wanted = [(fam, int(k)) for k in cutoffs for fam in FAMILIES]
    else:
        wanted = list(metrics or DEFAULT_METRICS)
    resolved = []
    for fam, k in wanted:
        if fam not in METRIC_FUNCS:
            raise MetricError(f"unknown metric family {fam!r}")
        if k < 1:
            raise MetricError(f"cutoff must be >= 1, got {k}")
        eff = min(k, corpus_size)
        if eff != k:
            log.warning("%s@%d exceeds corpus size; reporting %s@%d", fam, k, fam, eff)
        if (fam, eff) not in resolved:
            resolved.append((fam, eff))
    return resolved


@dataclass
class MetricsReport:
    per_query: dict = field(default_factory=dict)
    aggregate: dict = field(default_factory=dict)

    @property
    def metric_names(self) -> list[str]:
        return list(self.aggregate)

    def values(self, metric: str) -> list[float]:
        return [row[metric] for row in self.per_query.values()]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["query_id", "metric", "value"])
        for qid, row in self.per_query.items():
            for name, value in row.items():
                writer.writerow([qid, name, repr(value)])
        for name, value in self.aggregate.items():
            writer.writerow(["AGGREGATE", name, repr(value)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> MetricsReport:
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["query_id", "metric", "value"]:
            raise ParseError("metrics CSV must start with header query_id,metric,value")
        report = cls()
        for lineno, row in enumerate(rows[1:], start=2):
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, found {len(row)}", lineno)
            qid, name, value = row
            try:
                value = float(value)
            except ValueError:
                raise ParseError(f"bad value {value!r}", lineno) from None
            if qid == "AGGREGATE":
                report.aggregate[name] = value
            else:
                report.per_query.setdefault(qid, {})[name] = value
        return report

    def to_table(self) -> str:
        names = self.metric_names
        width = max(len(n) for n in names) if names else 6
        lines = [f"{'metric':<{width}}  {'value':>8}", "-" * (width + 10)]
        lines += [f"{n:<{width}}  {self.aggregate[n]:8.4f}" for n in names]
        lines.append(f"({len(self.per_query)} queries)")
        return "\n".join(lines)


def evaluate_rankings(rankings, corpus, metric_list) -> MetricsReport:
    report = MetricsReport()
    by_id = {r.query_id: r for r in rankings}
    for q in corpus.queries:
        relevant = set(q.positive_ids)
        ranked = by_id[q.query_id]
        report.per_query[q.query_id] = {
            f"{fam}@{k}": METRIC_FUNCS[fam](ranked, relevant, k) for fam, k in metric_list
        }
    for fam, k in metric_list:
        name = f"{fam}@{k}"
        vals = [row[name] for row in report.per_query.values()]
        report.aggregate[name] = float(np.mean(vals)) if vals else float("nan")
    return report


def evaluate_model(params: EncoderParams, corpus, metrics=None, cutoffs=None, scale: float = 1.0) -> MetricsReport:
    metric_list = resolve_metrics(corpus.size, metrics, cutoffs)
    depth = max(k for _, k in metric_list)
    return evaluate_rankings(retrieve_all(params, corpus, depth, scale), corpus, metric_list)


def random_ranking_mrr(n_docs: int, n_relevant: int, k: int) -> float:
    """Expected reciprocal rank@k under a uniformly random ordering."""
    total = 0.0
    denom = math.comb(n_docs, n_relevant)
    for r in range(1, min(k, n_docs - n_relevant + 1) + 1):
        total += math.comb(n_docs - r, n_relevant - 1) / denom / r
    return total


# --------------------------------------------------------------------------
# paired t-test

def _betacf(a, b, x, max_iter=500, eps=1e-16):
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta I_x(a, b) by continued fraction."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x={x} outside [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    return betainc(df / 2.0, 0.5, df / (df + t * t))


class TTestResult(NamedTuple):
    t_statistic: float
    p_value: float
    zero_variance: bool = False


def paired_t_test(per_query_a, per_query_b) -> TTestResult:
    """Two-sided paired t-test with n - 1 degrees of freedom.

    With zero variance of the differences the statistic is degenerate: the
    result is flagged, with p = 1 if the means agree and p = 0 otherwise.
    """
    a = np.asarray(per_query_a, dtype=np.float64)
    b = np.asarray(per_query_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InputError("paired samples must be 1-D and of equal length")
    n = a.shape[0]
    if n < 2:
        raise InputError("paired t-test needs at least 2 pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, t_sf_two_sided(t, n - 1), False)


class Comparison(NamedTuple):
    metric: str
    mean_a: float
    mean_b: float
    t_statistic: float
    p_value: float
    mark: str


def compare_reports(a: MetricsReport, b: MetricsReport, alpha: float = 0.05) -> list[Comparison]:
    """Per-metric paired tests of ``a`` against ``b``.

    ``mark`` is ``+`` (a significantly higher), ``-`` (lower) or empty.
    """
    common = [q for q in a.per_query if q in b.per_query]
    if len(common) < 2:
        raise InputError("reports share fewer than 2 queries")
    out = []
    for name in a.metric_names:
        if name not in b.aggregate:
            continue
        va = [a.per_query[q][name] for q in common]
        vb = [b.per_query[q][name] for q in common]
        res = paired_t_test(va, vb)
        mark = ""
        if res.p_value < alpha:
            mark = "+" if np.mean(va) > np.mean(vb) else "-"
        out.append(Comparison(name, float(np.mean(va)), float(np.mean(vb)), res.t_statistic, res.p_value, mark))
    return out
