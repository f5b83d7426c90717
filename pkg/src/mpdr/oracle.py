"""Reference implementations used to check the loss kernels.

Everything here is deliberately naive: losses are literal transcriptions of
the objective formulas (no max-shift, no factorisation), evaluated in double
precision. Nothing is shared with the stable kernels in :mod:`mpdr.losses`.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field

import numpy as np

from mpdr.errors import OracleError, UsageError
from mpdr.losses import LossResult, ObjectiveKind, ScoreGroup, evaluate

K = ObjectiveKind

#: naive exp() stays far from overflow inside this range
SCORE_LIMIT = 30.0

#: denominator floor for relative errors; JointLH gradients cross zero at
#: P_i = 1/|D+|, where a pure ratio is meaningless
REL_FLOOR = 1e-3


def _selection(kind, pos, neg):
    """Arg-max/arg-min picks of the LSEPair variants (lowest index on ties)."""
    pos_index = neg_index = None
    if kind in (K.LSE_PAIR_MAXP,):
        pos_index = np.argmax(pos, axis=-1)
    elif kind in (K.LSE_PAIR_MINP, K.LSE_PAIR_MINP_MAXN):
        pos_index = np.argmin(pos, axis=-1)
    if kind in (K.LSE_PAIR_MAXN, K.LSE_PAIR_MINP_MAXN):
        neg_index = np.argmax(neg, axis=-1)
    return pos_index, neg_index


def _pick(values, index):
    index = np.asarray(index)
    index = np.broadcast_to(index, values.shape[:-1])[..., None]
    return np.take_along_axis(values, index, axis=-1)


def _naive(kind, pos, neg, pos_index=None, neg_index=None):
    """Loss over the trailing axis; leading axes are batch dimensions."""
    if kind in (K.SINGLE_LH, K.RAND1_LH):
        sp = np.exp(_pick(pos, pos_index))[..., 0]
        return -np.log(sp / (sp + np.exp(neg).sum(axis=-1)))
    if kind is K.JOINT_LH:
        z = np.exp(pos).sum(axis=-1) + np.exp(neg).sum(axis=-1)
        return -np.mean(np.log(np.exp(pos) / z[..., None]), axis=-1)
    if kind is K.SUM_MARG_LH:
        z = np.exp(pos).sum(axis=-1) + np.exp(neg).sum(axis=-1)
        return -np.log(np.exp(pos).sum(axis=-1) / z)
    if pos_index is not None:
        pos = _pick(pos, pos_index)
    if neg_index is not None:
        neg = _pick(neg, neg_index)
    diffs = neg[..., None, :] - pos[..., :, None]
    return np.log(1.0 + np.exp(diffs).sum(axis=(-2, -1)))


def _check_range(*arrays):
    for arr in arrays:
        if not np.isfinite(arr).all() or np.abs(arr).max() > SCORE_LIMIT:
            raise OracleError(f"oracle requires finite scores within [-{SCORE_LIMIT}, {SCORE_LIMIT}]")


def brute_force_loss(kind, group: ScoreGroup, positive_index: int | None = None) -> float:
    """Literal, unstabilised evaluation of an objective.

    ``positive_index`` picks the positive for SingleLH/Rand1LH (default 0).
    """
    kind = K.parse(kind)
    pos, neg = group.positive_scores, group.negative_scores
    _check_range(pos, neg)
    if kind in (K.SINGLE_LH, K.RAND1_LH):
        pos_index, neg_index = (0 if positive_index is None else positive_index), None
    else:
        pos_index, neg_index = _selection(kind, pos, neg)
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        try:
            value = float(_naive(kind, pos, neg, pos_index, neg_index))
        except FloatingPointError as exc:
            raise OracleError(f"naive {kind} evaluation failed: {exc}") from None
    if not np.isfinite(value):
        raise OracleError(f"naive {kind} evaluation is not finite")
    return value


def _fd_batch(kind, pos, neg, step, pos_index=None):
    """Central differences for a batch of equally shaped groups.

    ``pos``/``neg`` have shape (T, P) and (T, N). Variant selections are
    frozen at the unperturbed point so that the derivative is that of the
    active piece.
    """
    n_pos = pos.shape[-1]
    scores = np.concatenate([pos, neg], axis=-1)
    n = scores.shape[-1]
    eye = np.eye(n) * step
    bumps = np.concatenate([eye, -eye])
    shifted = scores[:, None, :] + bumps[None, :, :]
    if kind in (K.SINGLE_LH, K.RAND1_LH):
        sel_pos = (np.zeros(pos.shape[0], dtype=np.intp) if pos_index is None
                   else np.asarray(pos_index, dtype=np.intp))
        sel_neg = None
    else:
        sel_pos, sel_neg = _selection(kind, pos, neg)
    if sel_pos is not None:
        sel_pos = sel_pos[:, None]
    if sel_neg is not None:
        sel_neg = sel_neg[:, None]
    losses = _naive(kind, shifted[..., :n_pos], shifted[..., n_pos:], sel_pos, sel_neg)
    grad = (losses[:, :n] - losses[:, n:]) / (2.0 * step)
    return grad[:, :n_pos], grad[:, n_pos:]


def finite_diff_grad(kind, group: ScoreGroup, step: float = 1e-4,
                     positive_index: int | None = None) -> LossResult:
    """Central-difference gradient of the naive loss.

    Rand1LH is checked at a fixed ``positive_index`` (i.e. as SingleLH).
    """
    kind = K.parse(kind)
    if not 0.0 < step <= 1e-2:
        raise UsageError(f"step must lie in (0, 1e-2], got {step}")
    loss = brute_force_loss(kind, group, positive_index)
    pos = group.positive_scores[None, :]
    neg = group.negative_scores[None, :]
    _check_range(pos + step, pos - step, neg + step, neg - step)
    index = None if positive_index is None else [positive_index]
    gp, gn = _fd_batch(kind, pos, neg, step, index)
    if not (np.isfinite(gp).all() and np.isfinite(gn).all()):
        raise OracleError("finite difference produced non-finite values")
    return LossResult(loss, gp[0], gn[0])


def rand1lh_expectation(group: ScoreGroup) -> float:
    """Exact expected Rand1LH loss under a uniform draw of the positive."""
    losses = [brute_force_loss(K.SINGLE_LH, group, i) for i in range(group.n_positive)]
    return float(np.mean(losses))


def relative_error(analytic, numeric, floor: float = REL_FLOOR):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


@dataclass
class GradCheckReport:
    max_relative_error: float = 0.0
    worst_coordinate: dict = field(default_factory=dict)
    per_objective: dict = field(default_factory=dict)
    n_groups: int = 0
    elapsed_s: float = 0.0

    def passed(self, tol: float) -> bool:
        return self.max_relative_error < tol

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("objective,max_relative_error\n")
        for name, err in self.per_objective.items():
            buf.write(f"{name},{err!r}\n")
        buf.write(f"ALL,{self.max_relative_error!r}\n")
        return buf.getvalue()

    def to_table(self) -> str:
        width = max([len(n) for n in self.per_objective] + [len("objective")])
        lines = [f"{'objective':<{width}}  max_rel_error"]
        lines.append("-" * (width + 15))
        for name, err in self.per_objective.items():
            lines.append(f"{name:<{width}}  {err:.3e}")
        lines.append("-" * (width + 15))
        lines.append(f"{'ALL':<{width}}  {self.max_relative_error:.3e}")
        if self.worst_coordinate:
            w = self.worst_coordinate
            lines.append(
                f"worst: {w['objective']} |D+|={w['n_pos']} |D-|={w['n_neg']} "
                f"trial={w['trial']} {w['side']}[{w['index']}]"
            )
        lines.append(f"groups checked: {self.n_groups}")
        return "\n".join(lines)


def gradcheck(kinds=None, max_pos: int = 8, max_neg: int = 16, trials: int = 100,
              seed: int = 0, step: float = 1e-4, low: float = -2.0, high: float = 2.0) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    Sweeps every objective x every shape (|D+| in 1..max_pos, |D-| in
    1..max_neg) x ``trials`` random groups with scores uniform in [low, high].
    """
    kinds = list(K) if kinds is None else [K.parse(k) for k in kinds]
    rng = np.random.default_rng(seed)
    report = GradCheckReport(per_objective={k.value: 0.0 for k in kinds})
    start = time.perf_counter()
    for kind in kinds:
        for n_pos in range(1, max_pos + 1):
            for n_neg in range(1, max_neg + 1):
                pos = rng.uniform(low, high, size=(trials, n_pos))
                neg = rng.uniform(low, high, size=(trials, n_neg))
                ana_pos = np.empty_like(pos)
                ana_neg = np.empty_like(neg)
                chosen = np.zeros(trials, dtype=np.intp)
                for t in range(trials):
                    res, idx = evaluate(ScoreGroup(pos[t], neg[t]), kind, rng)
                    ana_pos[t] = res.grad_positive
                    ana_neg[t] = res.grad_negative
                    if idx is not None:
                        chosen[t] = idx
                num_pos, num_neg = _fd_batch(kind, pos, neg, step, chosen)
                for side, ana, num in (("positive", ana_pos, num_pos), ("negative", ana_neg, num_neg)):
                    err = relative_error(ana, num)
                    flat = int(np.argmax(err))
                    worst = float(err.flat[flat])
                    if worst > report.per_objective[kind.value]:
                        report.per_objective[kind.value] = worst
                    if worst > report.max_relative_error:
                        t, i = np.unravel_index(flat, err.shape)
                        report.max_relative_error = worst
                        report.worst_coordinate = {
                            "objective": kind.value, "n_pos": n_pos, "n_neg": n_neg,
                            "trial": int(t), "side": side, "index": int(i),
                        }
                report.n_groups += trials
    report.elapsed_s = time.perf_counter() - start
    return report
