"""Synthetic corpora, dataset files and per-step training groups.

Synthetic geometry
------------------
Feature vectors live in ``R^input_dim`` and are a fixed random rotation of
``[signal ; nuisance]``. Relevance is carried only by the ``signal_dim``
leading latent coordinates: each query owns a unit direction ``u`` there,
positives are ``normalize(u + noise)`` with noise scale set by the label
tier, and hard negatives sit at a fixed cosine to ``u``. The nuisance block
(``nuisance_rank`` Gaussian coordinates of scale ``nuisance_scale``) is
independent of relevance and swamps dot products under a random encoder,
so an untrained model ranks close to chance and a trained one must learn
to project it away. Everything is finally multiplied by ``feature_scale``.

Dataset file
------------
UTF-8, one record per line::

    D <doc_id> <f1> ... <fn>
    Q <query_id> <f1> ... <fn> | P <doc_id>:<tier>:<rank> ... | N <doc_id> ...
"""

from __future__ import annotations

import enum
import os
import re
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from mpdr.errors import ConfigError, ParseError, UsageError, ValidationError


class Tier(str, enum.Enum):
    HUMAN = "Human"
    LLM = "LLM"


class Regime(str, enum.Enum):
    HOMOGENEOUS = "homogeneous"
    HETEROGENEOUS = "heterogeneous"


class Positive(NamedTuple):
    doc_id: str
    tier: Tier
    utility_rank: int


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    features: np.ndarray
    positives: tuple[Positive, ...]
    hard_negatives: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64))
        object.__setattr__(self, "positives", tuple(Positive(*p) for p in self.positives))
        object.__setattr__(self, "hard_negatives", tuple(self.hard_negatives))
        if not self.positives:
            raise ValidationError(f"query {self.query_id} has no positives")
        ranks = [p.utility_rank for p in self.positives]
        if ranks != sorted(ranks) or ranks[0] < 1:
            raise ValidationError(f"query {self.query_id}: positives not ordered by utility rank")
        if any(p.tier is Tier.HUMAN and p.utility_rank != 1 for p in self.positives):
            raise ValidationError(f"query {self.query_id}: human positive must have utility rank 1")
        clash = {p.doc_id for p in self.positives} & set(self.hard_negatives)
        if clash:
            raise ValidationError(f"query {self.query_id}: {sorted(clash)[0]} is both positive and negative")

    @property
    def positive_ids(self) -> tuple[str, ...]:
        return tuple(p.doc_id for p in self.positives)

    def __eq__(self, other):
        if not isinstance(other, QueryRecord):
            return NotImplemented
        return (self.query_id == other.query_id
                and np.array_equal(self.features, other.features)
                and self.positives == other.positives
                and self.hard_negatives == other.hard_negatives)


class Corpus:
    """Documents (id -> feature row) plus the labelled queries."""

    def __init__(self, doc_ids, doc_features, queries=()):
        self.doc_ids = list(doc_ids)
        feats = np.asarray(doc_features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != len(self.doc_ids):
            raise ValidationError("document features must be a matrix with one row per doc id")
        self.doc_features = feats
        self.index = {d: i for i, d in enumerate(self.doc_ids)}
        if len(self.index) != len(self.doc_ids):
            raise ValidationError("duplicate document id")
        self.queries = list(queries)
        self._validate()

    def _validate(self):
        dim = self.input_dim
        seen = set()
        for q in self.queries:
            if q.query_id in seen:
                raise ValidationError(f"duplicate query id {q.query_id}")
            seen.add(q.query_id)
            if q.features.shape != (dim,):
                raise ValidationError(f"query {q.query_id} has dimension {q.features.shape}, corpus has {dim}")
            for doc in q.positive_ids + q.hard_negatives:
                if doc not in self.index:
                    raise ValidationError(f"query {q.query_id} references unknown document {doc}")

    @property
    def input_dim(self) -> int:
        return self.doc_features.shape[1]

    @property
    def size(self) -> int:
        return len(self.doc_ids)

    def features(self, doc_id) -> np.ndarray:
        return self.doc_features[self.index[doc_id]]

    def query(self, query_id) -> QueryRecord:
        for q in self.queries:
            if q.query_id == query_id:
                return q
        raise KeyError(query_id)

    def with_queries(self, queries) -> Corpus:
        return Corpus(self.doc_ids, self.doc_features, queries)

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return (self.doc_ids == other.doc_ids
                and np.array_equal(self.doc_features, other.doc_features)
                and self.queries == other.queries)

    def __repr__(self):
        return f"Corpus({self.size} docs, {len(self.queries)} queries, dim={self.input_dim})"


# --------------------------------------------------------------------------
# synthetic generation

POSITIVE_PRESETS = {"5.5-avg": (3, 8), "6.5-avg": (4, 9)}


def parse_positive_count(value) -> tuple[int, int]:
    """``4`` -> fixed; ``"2-8"`` -> uniform integer range; ``"5.5-avg"`` preset."""
    if isinstance(value, (tuple, list)):
        lo, hi = int(value[0]), int(value[1])
    elif isinstance(value, int):
        lo = hi = value
    else:
        text = str(value).strip()
        if text in POSITIVE_PRESETS:
            lo, hi = POSITIVE_PRESETS[text]
        elif re.fullmatch(r"\d+", text):
            lo = hi = int(text)
        elif re.fullmatch(r"\d+-\d+", text):
            lo, hi = map(int, text.split("-"))
        else:
            raise ConfigError(f"cannot parse positives value {value!r}; use N, LO-HI or one of {sorted(POSITIVE_PRESETS)}")
    if lo < 1 or hi < lo:
        raise ConfigError(f"invalid positives range {lo}-{hi}")
    return lo, hi


def _noise_range(value) -> tuple[float, float]:
    if isinstance(value, (tuple, list)):
        return float(value[0]), float(value[1])
    return float(value), float(value)


@dataclass(frozen=True)
class SynthConfig:
    num_queries: int = 200
    corpus_size: int = 5000
    input_dim: int = 32
    positives_per_query: object = "2-8"
    tier_noise: dict = field(default_factory=lambda: {Tier.HUMAN: 0.1, Tier.LLM: (0.25, 0.5)})
    hard_negative_similarity: float = 0.6
    hard_negatives_per_query: int = 16
    regime: Regime = Regime.HOMOGENEOUS
    seed: int = 0
    signal_dim: int | None = None
    nuisance_rank: int = 1
    nuisance_scale: float = 8.0
    feature_scale: float = 6.0

    @property
    def latent_signal_dim(self) -> int:
        return self.signal_dim if self.signal_dim is not None else self.input_dim // 2

    def validate(self) -> None:
        lo, hi = parse_positive_count(self.positives_per_query)
        if self.num_queries < 0 or self.corpus_size < 1 or self.input_dim < 2:
            raise ConfigError("num_queries, corpus_size and input_dim must be positive")
        k = self.latent_signal_dim
        if not 2 <= k <= self.input_dim:
            raise ConfigError(f"signal_dim {k} must lie in [2, input_dim]")
        if not 0 <= self.nuisance_rank <= self.input_dim - k:
            raise ConfigError(f"nuisance_rank {self.nuisance_rank} must lie in [0, input_dim - signal_dim]")
        if self.nuisance_scale < 0 or self.feature_scale <= 0:
            raise ConfigError("nuisance_scale must be >= 0 and feature_scale > 0")
        if not 0.0 < self.hard_negative_similarity < 1.0:
            raise ConfigError("hard_negative_similarity must lie in (0, 1)")
        if self.hard_negatives_per_query < 1:
            raise ConfigError("need at least one hard negative per query")
        human = _noise_range(self.tier_noise[Tier.HUMAN])
        llm = _noise_range(self.tier_noise[Tier.LLM])
        if min(human + llm) < 0:
            raise ConfigError("tier noise must be non-negative")
        if not human[1] < llm[0]:
            raise ConfigError("human tier noise must be below LLM tier noise")
        need = self.num_queries * (hi + self.hard_negatives_per_query)
        if self.corpus_size < need:
            raise ConfigError(f"corpus_size {self.corpus_size} < {need} documents needed "
                              f"({self.num_queries} queries x ({hi} positives + "
                              f"{self.hard_negatives_per_query} hard negatives))")
        Regime(self.regime)


def _rotation(config: SynthConfig) -> np.ndarray:
    """Orthogonal map from latent ``[signal ; nuisance]`` to feature space.

    The leading nuisance direction is sign-balanced (every feature carries
    it with weight 1/sqrt(input_dim)); an Adam-trained encoder suppresses
    such a direction fastest.
    """
    d, k = config.input_dim, config.latent_signal_dim
    rng = np.random.default_rng([config.seed, 0])
    m = rng.standard_normal((d, d))
    m[:, 0] = rng.choice([-1.0, 1.0], size=d)
    q, r = np.linalg.qr(m)
    q = q * np.sign(np.diag(r))
    return np.hstack([q[:, 1: k + 1], q[:, :1], q[:, k + 1:]])


def signal_projection(config: SynthConfig) -> np.ndarray:
    """Encoder weight that keeps exactly the relevance-bearing latent block."""
    return _rotation(config)[:, : config.latent_signal_dim].T.copy()


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def generate(config: SynthConfig) -> Corpus:
    config.validate()
    rot = _rotation(config)
    rng = np.random.default_rng([config.seed, 1])
    k = config.latent_signal_dim
    n_nuis = config.nuisance_rank
    lo, hi = parse_positive_count(config.positives_per_query)
    human_sigma = _noise_range(config.tier_noise[Tier.HUMAN])
    llm_sigma = _noise_range(config.tier_noise[Tier.LLM])
    c = config.hard_negative_similarity
    heterogeneous = Regime(config.regime) is Regime.HETEROGENEOUS

    def nuisance(n):
        block = np.zeros((n, config.input_dim - k))
        if n_nuis:
            block[:, :n_nuis] = rng.standard_normal((n, n_nuis)) * (config.nuisance_scale / np.sqrt(n_nuis))
        return block

    latent_docs = []
    plans = []  # per query: (u, [(slot, tier, noise_norm)], [slots])
    q_latent = []
    for _ in range(config.num_queries):
        u = _unit(rng.standard_normal(k))
        n_pos = int(rng.integers(lo, hi + 1))
        pos_entries = []
        for j in range(n_pos):
            tier = Tier.HUMAN if (heterogeneous and j == 0) else Tier.LLM
            sig_lo, sig_hi = human_sigma if tier is Tier.HUMAN else llm_sigma
            sigma = rng.uniform(sig_lo, sig_hi)
            noise = rng.standard_normal(k) * (sigma / np.sqrt(k))
            latent_docs.append(_unit(u + noise))
            pos_entries.append((len(latent_docs) - 1, tier, float(np.linalg.norm(noise))))
        neg_slots = []
        for _ in range(config.hard_negatives_per_query):
            v = rng.standard_normal(k)
            v = _unit(v - (v @ u) * u)
            latent_docs.append(c * u + np.sqrt(1.0 - c * c) * v)
            neg_slots.append(len(latent_docs) - 1)
        plans.append((pos_entries, neg_slots))
        q_latent.append(u)
    n_fill = config.corpus_size - len(latent_docs)
    if n_fill:
        latent_docs.extend(_unit(rng.standard_normal((n_fill, k))))
    signal = np.asarray(latent_docs).reshape(config.corpus_size, k)
    doc_feats = np.hstack([signal, nuisance(config.corpus_size)]) @ (config.feature_scale * rot.T)
    q_signal = np.asarray(q_latent).reshape(config.num_queries, k)
    query_feats = np.hstack([q_signal, nuisance(config.num_queries)]) @ (config.feature_scale * rot.T)

    # doc ids carry no information about relevance
    order = rng.permutation(config.corpus_size)
    width = len(str(config.corpus_size - 1))
    doc_ids = [f"d{i:0{width}d}" for i in range(config.corpus_size)]
    slot_to_id = {slot: doc_ids[order[slot]] for slot in range(config.corpus_size)}
    feats_by_id = np.empty_like(doc_feats)
    feats_by_id[order] = doc_feats

    qwidth = len(str(max(config.num_queries - 1, 0)))
    queries = []
    for qi, (pos_entries, neg_slots) in enumerate(plans):
        head = [e for e in pos_entries if e[1] is Tier.HUMAN]
        rest = sorted((e for e in pos_entries if e[1] is not Tier.HUMAN), key=lambda e: e[2])
        positives = tuple(Positive(slot_to_id[slot], tier, rank)
                          for rank, (slot, tier, _) in enumerate(head + rest, start=1))
        queries.append(QueryRecord(f"q{qi:0{qwidth}d}", query_feats[qi], positives,
                                   tuple(slot_to_id[s] for s in neg_slots)))
    return Corpus(doc_ids, feats_by_id, queries)


# --------------------------------------------------------------------------
# corpus views used by the experiment harnesses

def _rerank(positives):
    return tuple(Positive(p.doc_id, p.tier, i) for i, p in enumerate(positives, start=1))


def truncate_positives(corpus: Corpus, m: int) -> Corpus:
    """Keep the top-``m`` positives of every query."""
    queries = [replace(q, positives=q.positives[:m]) for q in corpus.queries]
    return corpus.with_queries(queries)


def subset_queries(corpus: Corpus, query_ids) -> Corpus:
    wanted = set(query_ids)
    return corpus.with_queries([q for q in corpus.queries if q.query_id in wanted])


def tier_view(corpus: Corpus, tier: Tier) -> Corpus:
    """Keep only positives of ``tier``; queries left without positives are dropped."""
    tier = Tier(tier)
    queries = []
    for q in corpus.queries:
        kept = [p for p in q.positives if p.tier is tier]
        if kept:
            queries.append(replace(q, positives=_rerank(kept)))
    return corpus.with_queries(queries)


# --------------------------------------------------------------------------
# dataset files

def _fmt(x: float) -> str:
    return repr(float(x))


def dumps(corpus: Corpus) -> str:
    lines = []
    for doc_id, row in zip(corpus.doc_ids, corpus.doc_features):
        lines.append(" ".join(["D", doc_id] + [_fmt(v) for v in row]))
    for q in corpus.queries:
        head = " ".join(["Q", q.query_id] + [_fmt(v) for v in q.features])
        pos = " ".join(["P"] + [f"{p.doc_id}:{p.tier.value}:{p.utility_rank}" for p in q.positives])
        neg = " ".join(["N"] + list(q.hard_negatives))
        lines.append(" | ".join([head, pos, neg]))
    return "".join(line + "\n" for line in lines)


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write(path, data) -> None:
    """Write via a temp file in the target directory and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(corpus: Corpus, path) -> None:
    atomic_write(path, dumps(corpus))


_ID = re.compile(r"[^\s:|]+")


def _parse_float(token, lineno):
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"bad number {token!r}", lineno) from None
    if not np.isfinite(value):
        raise ParseError(f"non-finite number {token!r}", lineno)
    return value


def _parse_id(token, lineno, what):
    if not _ID.fullmatch(token):
        raise ParseError(f"bad {what} {token!r}", lineno)
    return token


def loads(text: str) -> Corpus:
    doc_ids, doc_rows, queries = [], [], []
    dim = None

    def check_dim(n, lineno):
        nonlocal dim
        if dim is None:
            dim = n
        elif n != dim:
            raise ParseError(f"expected {dim} features, found {n}", lineno)

    for lineno, line in enumerate(text.split("\n"), start=1):
        if line == "":
            continue
        if line.startswith("D "):
            tokens = line.split(" ")
            if len(tokens) < 3:
                raise ParseError("document line needs an id and features", lineno)
            doc_ids.append(_parse_id(tokens[1], lineno, "document id"))
            check_dim(len(tokens) - 2, lineno)
            doc_rows.append([_parse_float(t, lineno) for t in tokens[2:]])
        elif line.startswith("Q "):
            sections = line.split(" | ")
            if len(sections) != 3:
                raise ParseError(f"query line needs 3 sections separated by ' | ', found {len(sections)}", lineno)
            head, pos, neg = (s.split(" ") for s in sections)
            if len(head) < 3:
                raise ParseError("query section needs an id and features", lineno)
            qid = _parse_id(head[1], lineno, "query id")
            check_dim(len(head) - 2, lineno)
            feats = [_parse_float(t, lineno) for t in head[2:]]
            if pos[0] != "P":
                raise ParseError(f"expected positives section 'P', found {pos[0]!r}", lineno)
            if neg[0] != "N":
                raise ParseError(f"expected negatives section 'N', found {neg[0]!r}", lineno)
            positives = []
            for token in pos[1:]:
                parts = token.split(":")
                if len(parts) != 3:
                    raise ParseError(f"bad positive {token!r}; expected doc_id:tier:rank", lineno)
                doc, tier, rank = parts
                try:
                    tier = Tier(tier)
                except ValueError:
                    raise ParseError(f"unknown tier {tier!r}", lineno) from None
                if not re.fullmatch(r"[1-9]\d*", rank):
                    raise ParseError(f"bad utility rank {rank!r}", lineno)
                positives.append(Positive(_parse_id(doc, lineno, "document id"), tier, int(rank)))
            negatives = [_parse_id(t, lineno, "document id") for t in neg[1:]]
            try:
                queries.append(QueryRecord(qid, np.array(feats), tuple(positives), tuple(negatives)))
            except ValidationError as exc:
                raise ValidationError(f"line {lineno}: {exc}") from None
        else:
            raise ParseError(f"unknown record kind {line.split(' ')[0]!r}", lineno)
    if not doc_ids:
        raise ParseError("dataset has no documents")
    return Corpus(doc_ids, np.array(doc_rows), queries)


def load_dataset(path) -> Corpus:
    return loads(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# training groups

@dataclass(frozen=True)
class TrainingGroup:
    query_id: str
    passages: tuple[str, ...]
    positive_count: int

    @property
    def positives(self) -> tuple[str, ...]:
        return self.passages[: self.positive_count]

    @property
    def negatives(self) -> tuple[str, ...]:
        return self.passages[self.positive_count:]


def build_groups(corpus: Corpus, G: int, M: int, epoch_seed: int) -> list[TrainingGroup]:
    """One candidate slate of length ``G`` per query.

    The top ``min(M, |D+|)`` positives by utility rank come first; the rest
    is filled with the query's hard negatives sampled without replacement.
    Only when the pool is too small are extra draws made with replacement.
    The fill for query ``i`` depends only on ``(epoch_seed, i, slots)``.
    """
    if not 1 <= M < G:
        raise ConfigError(f"need 1 <= M < G, got M={M}, G={G}")
    groups = []
    for qi, q in enumerate(corpus.queries):
        if not q.hard_negatives:
            raise ValidationError(f"query {q.query_id} has no hard negatives")
        pos = q.positive_ids[:M]
        need = G - len(pos)
        pool = q.hard_negatives
        rng = np.random.default_rng([epoch_seed, qi])
        if len(pool) >= need:
            picks = rng.choice(len(pool), size=need, replace=False)
        else:
            picks = np.concatenate([rng.permutation(len(pool)),
                                    rng.integers(len(pool), size=need - len(pool))])
        groups.append(TrainingGroup(q.query_id, pos + tuple(pool[i] for i in picks), len(pos)))
    return groups


@dataclass(frozen=True)
class InBatchQuery:
    """Positives and the expanded negative pool for one query of a batch."""

    query_id: str
    positives: tuple[str, ...]
    negatives: tuple[str, ...]


def expand_in_batch(batch, corpus: Corpus | None = None) -> list[InBatchQuery]:
    """Add every passage of the other groups in the batch to each query's negatives.

    Order: own hard negatives, then other groups in batch order. A doc id
    that is one of the query's own positives, or already in the pool, is
    skipped.
    """
    batch = list(batch)
    if not batch:
        raise UsageError("empty batch")
    ids = [g.query_id for g in batch]
    if len(set(ids)) != len(ids):
        raise UsageError("duplicated query in batch")
    if corpus is not None:
        for g in batch:
            for doc in g.passages:
                if doc not in corpus.index:
                    raise ValidationError(f"group {g.query_id} references unknown document {doc}")
    out = []
    for g in batch:
        own = set(g.positives)
        seen = set()
        pool = []
        sources = [g.negatives] + [other.passages for other in batch if other is not g]
        for passages in sources:
            for doc in passages:
                if doc in own or doc in seen:
                    continue
                seen.add(doc)
                pool.append(doc)
        out.append(InBatchQuery(g.query_id, g.positives, tuple(pool)))
    return out
