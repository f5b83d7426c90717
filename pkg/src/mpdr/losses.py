"""Multi-positive contrastive objectives with analytic score gradients.

Every objective maps a :class:`ScoreGroup` (the scores a query assigns to its
positive and negative candidates) to a :class:`LossResult` holding the scalar
loss and its gradient with respect to each score.

The arithmetic lives in one of two interchangeable backends: the compiled
``_ckernels`` extension when it is importable, else the numpy fallback in
``_pykernels``. Set ``MPDR_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass

import numpy as np

from mpdr import _pykernels
from mpdr.errors import InputError, UsageError

try:
    if os.environ.get("MPDR_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("compiled kernels disabled by MPDR_PURE_PYTHON")
    from mpdr import _ckernels
except ImportError:
    _ckernels = None

_kernels = _ckernels if _ckernels is not None else _pykernels


def available_backends() -> list[str]:
    names = ["python"]
    if _ckernels is not None:
        names.insert(0, "cython")
    return names


def backend() -> str:
    return _kernels.NAME


def set_backend(name: str) -> str:
    """Switch kernel backend process-wide; returns the previous backend name."""
    global _kernels
    previous = _kernels.NAME
    if name == "python":
        _kernels = _pykernels
    elif name == "cython":
        if _ckernels is None:
            raise UsageError("compiled kernels are not built")
        _kernels = _ckernels
    else:
        raise UsageError(f"unknown backend {name!r}")
    return previous


class ObjectiveKind(str, enum.Enum):
    SINGLE_LH = "SingleLH"
    RAND1_LH = "Rand1LH"
    JOINT_LH = "JointLH"
    SUM_MARG_LH = "SumMargLH"
    LSE_PAIR = "LSEPair"
    LSE_PAIR_MAXP = "LSEPair_maxP"
    LSE_PAIR_MAXN = "LSEPair_maxN"
    LSE_PAIR_MINP = "LSEPair_minP"
    LSE_PAIR_MINP_MAXN = "LSEPair_minP_maxN"

    @classmethod
    def parse(cls, name: str | ObjectiveKind) -> ObjectiveKind:
        """Case-insensitive lookup by tag (``lsepair_maxp``, ``JointLH``...)."""
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_")
        for kind in cls:
            if kind.value.lower() == key or kind.name.lower() == key:
                return kind
        valid = ", ".join(k.value for k in cls)
        raise UsageError(f"unknown objective {name!r}; valid tags: {valid}")

    @property
    def is_variant(self) -> bool:
        return self in _VARIANT_CODES

    def __str__(self) -> str:
        return self.value


MAIN_OBJECTIVES = (
    ObjectiveKind.SINGLE_LH,
    ObjectiveKind.RAND1_LH,
    ObjectiveKind.JOINT_LH,
    ObjectiveKind.SUM_MARG_LH,
    ObjectiveKind.LSE_PAIR,
)

_VARIANT_CODES = {
    ObjectiveKind.LSE_PAIR_MAXP: _pykernels.VARIANT_MAXP,
    ObjectiveKind.LSE_PAIR_MAXN: _pykernels.VARIANT_MAXN,
    ObjectiveKind.LSE_PAIR_MINP: _pykernels.VARIANT_MINP,
    ObjectiveKind.LSE_PAIR_MINP_MAXN: _pykernels.VARIANT_MINP_MAXN,
}


def _as_scores(values, what):
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] == 0:
        raise InputError(f"{what} must be a non-empty 1-D sequence")
    if not np.isfinite(arr).all():
        raise InputError(f"{what} contains non-finite values")
    return arr


@dataclass(frozen=True)
class ScoreGroup:
    """Scores one query assigns to its positive and negative candidates."""

    positive_scores: np.ndarray
    negative_scores: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "positive_scores", _as_scores(self.positive_scores, "positive_scores"))
        object.__setattr__(self, "negative_scores", _as_scores(self.negative_scores, "negative_scores"))

    @property
    def n_positive(self) -> int:
        return self.positive_scores.shape[0]

    @property
    def n_negative(self) -> int:
        return self.negative_scores.shape[0]


@dataclass(frozen=True)
class LossResult:
    loss: float
    grad_positive: np.ndarray
    grad_negative: np.ndarray


def _run(group, scale, call):
    pos, neg = group.positive_scores, group.negative_scores
    if scale != 1.0:
        if not scale > 0:
            raise InputError(f"scale must be positive, got {scale}")
        pos, neg = pos / scale, neg / scale
    gpos = np.empty_like(pos)
    gneg = np.empty_like(neg)
    loss = call(pos, neg, gpos, gneg)
    if scale != 1.0:
        gpos /= scale
        gneg /= scale
    return LossResult(float(loss), gpos, gneg)


def single_lh(group: ScoreGroup, positive_index: int = 0, scale: float = 1.0) -> LossResult:
    """InfoNCE on one chosen positive against the negatives.

    The normalisation pool is the chosen positive plus all negatives; the
    other positives get exactly zero gradient.
    """
    n = group.n_positive
    if not 0 <= positive_index < n:
        raise IndexError(f"positive_index {positive_index} out of range for {n} positives")
    idx = int(positive_index)
    return _run(group, scale, lambda p, q, gp, gq: _kernels.single_lh(p, q, idx, gp, gq))


def joint_lh(group: ScoreGroup, scale: float = 1.0) -> LossResult:
    """Mean negative log-likelihood of every positive under one softmax."""
    return _run(group, scale, _kernels.joint_lh)


def sum_marg_lh(group: ScoreGroup, scale: float = 1.0) -> LossResult:
    """Negative log of the total softmax mass on the positive set."""
    return _run(group, scale, _kernels.sum_marg_lh)


def lse_pair(group: ScoreGroup, scale: float = 1.0) -> LossResult:
    """log(1 + sum over all (positive, negative) pairs of exp(s_neg - s_pos)).

    The double sum factorises into ``exp(lse(neg) + lse(-pos))`` so the cost
    is linear in the group size.
    """
    return _run(group, scale, _kernels.lse_pair)


def lse_pair_variant(group: ScoreGroup, kind: ObjectiveKind | str, scale: float = 1.0) -> LossResult:
    """LSEPair restricted to extremal positives and/or negatives.

    Ties in the arg-max / arg-min are broken by lowest index.
    """
    kind = ObjectiveKind.parse(kind)
    code = _VARIANT_CODES.get(kind)
    if code is None:
        raise UsageError(f"{kind} is not an LSEPair variant")
    return _run(group, scale, lambda p, q, gp, gq: _kernels.lse_pair_variant(p, q, code, gp, gq))


def evaluate(group: ScoreGroup, kind: ObjectiveKind | str, rng: np.random.Generator | None = None,
             scale: float = 1.0) -> tuple[LossResult, int | None]:
    """Dispatch to ``kind``; returns the result and, for Rand1LH, the drawn index.

    SingleLH always uses the first (highest-utility) positive. ``rng`` is
    consumed only by Rand1LH.
    """
    kind = ObjectiveKind.parse(kind)
    if kind is ObjectiveKind.SINGLE_LH:
        return single_lh(group, 0, scale), None
    if kind is ObjectiveKind.RAND1_LH:
        if rng is None:
            raise UsageError("Rand1LH needs an rng")
        index = int(rng.integers(group.n_positive))
        return single_lh(group, index, scale), index
    if kind is ObjectiveKind.JOINT_LH:
        return joint_lh(group, scale), None
    if kind is ObjectiveKind.SUM_MARG_LH:
        return sum_marg_lh(group, scale), None
    if kind is ObjectiveKind.LSE_PAIR:
        return lse_pair(group, scale), None
    return lse_pair_variant(group, kind, scale), None


def stable_log_sum_exp(values) -> float:
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] == 0:
        raise UsageError("log-sum-exp of an empty sequence")
    if not np.isfinite(arr).all():
        raise InputError("log-sum-exp input contains non-finite values")
    return float(_kernels.log_sum_exp(arr))
