"""Deterministic mini-batch training of the shared linear encoder."""

from __future__ import annotations

import io
import time
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import numpy as np

from mpdr.data import Corpus, atomic_write, build_groups, expand_in_batch
from mpdr.encoder import EncoderParams, backward_batch, score_matrix
from mpdr.errors import ConfigError, InputError, NumericalError
from mpdr.losses import ObjectiveKind, ScoreGroup, evaluate


@dataclass(frozen=True)
class TrainConfig:
    objective: ObjectiveKind = ObjectiveKind.LSE_PAIR
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    G: int = 8
    M: int = 4
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    scale: float = 1.0
    resample_negatives: bool = True

    def __post_init__(self):
        object.__setattr__(self, "objective", ObjectiveKind.parse(self.objective))

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 1 <= self.M < self.G:
            raise ConfigError(f"need 1 <= M < G, got M={self.M}, G={self.G}")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if self.adam_epsilon <= 0:
            raise ConfigError("adam_epsilon must be positive")
        if self.scale <= 0:
            raise ConfigError("scale must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    def echo(self) -> str:
        """key=value lines, one per field."""
        lines = []
        for key, value in asdict(self).items():
            lines.append(f"{key}={value.value if isinstance(value, ObjectiveKind) else value}")
        return "\n".join(lines) + "\n"


PRESETS = {
    "desk": dict(epochs=20, batch_size=32, learning_rate=1e-3, G=8, M=4),
    "msmarco": dict(epochs=3, batch_size=128, learning_rate=3e-5, G=8, M=4),
    "nq": dict(epochs=40, batch_size=64, learning_rate=1e-5, G=8, M=4),
}


def preset(name: str, **overrides) -> TrainConfig:
    try:
        values = dict(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    values.update(overrides)
    return TrainConfig(**values)


def stage2_config(stage1: TrainConfig, epochs: int = 1) -> TrainConfig:
    """Human-label fine-tuning stage: SingleLH, same batch size and learning rate."""
    return replace(stage1, objective=ObjectiveKind.SINGLE_LH, epochs=epochs)


# --------------------------------------------------------------------------
# Adam

@dataclass(frozen=True)
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> OptimizerState:
        return cls(np.zeros_like(params.weight), np.zeros_like(params.weight), 0)


def adam_step(params: EncoderParams, state: OptimizerState, gradient, config: TrainConfig):
    """One bias-corrected Adam update; returns new (params, state)."""
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != params.weight.shape or state.first_moment.shape != g.shape:
        raise InputError(f"gradient shape {g.shape} does not match parameters {params.weight.shape}")
    b1, b2 = config.adam_beta1, config.adam_beta2
    t = state.step_count + 1
    m = b1 * state.first_moment + (1.0 - b1) * g
    v = b2 * state.second_moment + (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    weight = params.weight - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_epsilon)
    return EncoderParams(weight), OptimizerState(m, v, t)


# --------------------------------------------------------------------------
# logs

class EpochRecord(NamedTuple):
    epoch: int
    stage: int
    mean_loss: float
    wall_ms: float
    rand1_histogram: tuple[int, ...] | None = None


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def mean_losses(self) -> list[float]:
        return [r.mean_loss for r in self.records]

    def extend(self, other: TrainLog) -> None:
        self.records.extend(other.records)

    def same_run(self, other: TrainLog) -> bool:
        """Equal up to wall-clock timings."""
        strip = lambda log: [r._replace(wall_ms=0.0) for r in log.records]  # noqa: E731
        return strip(self) == strip(other)

    def to_csv(self, timing: bool = True) -> str:
        """CSV ``epoch,stage,mean_loss,wall_ms``; ``timing=False`` leaves wall_ms empty."""
        buf = io.StringIO()
        buf.write("epoch,stage,mean_loss,wall_ms\n")
        for r in self.records:
            wall = f"{r.wall_ms:.3f}" if timing else ""
            buf.write(f"{r.epoch},{r.stage},{r.mean_loss!r},{wall}\n")
        return buf.getvalue()


# --------------------------------------------------------------------------
# training

class BatchResult(NamedTuple):
    loss: float
    gradient: np.ndarray
    query_losses: list
    chosen: list


def batch_loss_and_grad(params: EncoderParams, corpus: Corpus, batch, objective, rng=None,
                        scale: float = 1.0, queries=None) -> BatchResult:
    """Mean objective over a batch of groups and its gradient w.r.t. the weight.

    Each query's negatives are its own hard negatives plus every passage of
    the other groups in the batch.
    """
    objective = ObjectiveKind.parse(objective)
    if queries is None:
        queries = {q.query_id: q for q in corpus.queries}
    expanded = expand_in_batch(batch)
    col = {}
    for g in batch:
        for doc in g.passages:
            if doc not in col:
                col[doc] = len(col)
    docs = corpus.doc_features[[corpus.index[d] for d in col]]
    qfeat = np.stack([queries[g.query_id].features for g in batch])
    scores = score_matrix(params, qfeat, docs, scale)
    grad_matrix = np.zeros_like(scores)
    n = len(batch)
    losses, chosen = [], []
    for b, item in enumerate(expanded):
        pos = np.fromiter((col[d] for d in item.positives), dtype=np.intp, count=len(item.positives))
        neg = np.fromiter((col[d] for d in item.negatives), dtype=np.intp, count=len(item.negatives))
        try:
            res, idx = evaluate(ScoreGroup(scores[b, pos], scores[b, neg]), objective, rng)
        except InputError as exc:
            raise NumericalError(f"query {item.query_id}, objective {objective}: {exc}") from None
        if not (np.isfinite(res.loss) and np.isfinite(res.grad_positive).all()
                and np.isfinite(res.grad_negative).all()):
            raise NumericalError(f"query {item.query_id}, objective {objective}: non-finite loss or gradient")
        grad_matrix[b, pos] += res.grad_positive / n
        grad_matrix[b, neg] += res.grad_negative / n
        losses.append(res.loss)
        chosen.append(idx)
    gradient = backward_batch(params, qfeat, docs, grad_matrix, scale)
    if not np.isfinite(gradient).all():
        raise NumericalError(f"objective {objective}: non-finite parameter gradient")
    return BatchResult(float(np.mean(losses)), gradient, losses, chosen)


def _group_limit(config: TrainConfig) -> int:
    # SingleLH consumes one positive; extra positives would only displace hard negatives
    return 1 if config.objective is ObjectiveKind.SINGLE_LH else config.M


def epoch_groups(corpus: Corpus, config: TrainConfig, epoch: int):
    """Groups and query order for ``epoch`` (seeded, independent of history)."""
    epoch_seed = (config.seed ^ epoch) if config.resample_negatives else config.seed
    groups = build_groups(corpus, config.G, _group_limit(config), epoch_seed)
    order = np.random.default_rng([config.seed, epoch, 0]).permutation(len(groups))
    return [groups[i] for i in order]


def train(corpus: Corpus, params: EncoderParams, config: TrainConfig, stage: int = 1):
    """Train ``params`` on ``corpus``; returns (final params, TrainLog).

    Fully deterministic in (corpus, params, config) and the kernel backend.
    """
    config.validate()
    if params.input_dim != corpus.input_dim:
        raise InputError(f"encoder input_dim {params.input_dim} != corpus dim {corpus.input_dim}")
    log = TrainLog()
    if config.epochs == 0 or not corpus.queries:
        return params, log
    state = OptimizerState.zeros_like(params)
    queries = {q.query_id: q for q in corpus.queries}
    rand1 = config.objective is ObjectiveKind.RAND1_LH
    for epoch in range(config.epochs):
        start = time.perf_counter()
        groups = epoch_groups(corpus, config, epoch)
        rng = np.random.default_rng([config.seed, epoch, 1])
        total, count = 0.0, 0
        hist = np.zeros(_group_limit(config), dtype=np.int64)
        for lo in range(0, len(groups), config.batch_size):
            batch = groups[lo: lo + config.batch_size]
            res = batch_loss_and_grad(params, corpus, batch, config.objective, rng, config.scale, queries)
            params, state = adam_step(params, state, res.gradient, config)
            total += float(np.sum(res.query_losses))
            count += len(batch)
            if rand1:
                for idx in res.chosen:
                    hist[idx] += 1
        wall_ms = (time.perf_counter() - start) * 1000.0
        log.records.append(EpochRecord(epoch, stage, total / count, wall_ms,
                                       tuple(int(c) for c in hist) if rand1 else None))
    return params, log


def curriculum_train(stage1_corpus: Corpus, stage2_corpus: Corpus, params: EncoderParams,
                     stage1_config: TrainConfig, stage2_config: TrainConfig):
    """Multi-positive training on LLM labels, then SingleLH on human labels.

    The optimizer state starts fresh in stage 2.
    """
    if stage2_config.objective is not ObjectiveKind.SINGLE_LH:
        raise ConfigError(f"curriculum stage 2 must use SingleLH, got {stage2_config.objective}")
    if stage1_corpus.input_dim != stage2_corpus.input_dim:
        raise InputError("stage corpora have different feature dimensions")
    params, log = train(stage1_corpus, params, stage1_config, stage=1)
    params, log2 = train(stage2_corpus, params, stage2_config, stage=2)
    log.extend(log2)
    return params, log


def save_checkpoint(params: EncoderParams, config: TrainConfig, path) -> None:
    """Encoder binary at ``path`` plus a ``path.config`` key=value echo."""
    atomic_write(path, params.to_bytes())
    atomic_write(f"{path}.config", config.echo())
