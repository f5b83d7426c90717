"""Pure numpy loss kernels.

Mirrors ``_ckernels.pyx`` function for function. Inputs are validated
float64 1-D arrays; gradient buffers are caller-allocated and fully
overwritten.

Every pair-style objective reduces to ``softplus(agg_neg - agg_pos)`` where
the aggregates are log-sum-exps (or single selected scores) over each side.
"""

import math

import numpy as np

NAME = "python"

# positive-side aggregation
POS_INDEX = 0
POS_SOFTMAX = 1
POS_SOFTMIN = 2
# negative-side aggregation
NEG_LSE = 0
NEG_MAX = 1

VARIANT_MAXP = 0
VARIANT_MAXN = 1
VARIANT_MINP = 2
VARIANT_MINP_MAXN = 3


def log_sum_exp(values):
    v = np.asarray(values, dtype=np.float64)
    m = v.max()
    return float(m + math.log(np.exp(v - m).sum()))


def _softplus(a):
    return max(a, 0.0) + math.log1p(math.exp(-abs(a)))


def _sigmoid(a):
    if a >= 0:
        return 1.0 / (1.0 + math.exp(-a))
    e = math.exp(a)
    return e / (1.0 + e)


def _pair_core(pos, neg, pos_mode, pos_index, neg_mode, gpos, gneg):
    if pos_mode == POS_INDEX:
        agg_pos = pos[pos_index]
    elif pos_mode == POS_SOFTMAX:
        m = pos.max()
        w_pos = np.exp(pos - m)
        z = w_pos.sum()
        agg_pos = m + math.log(z)
        w_pos /= z
    else:
        m = (-pos).max()
        w_pos = np.exp(-pos - m)
        z = w_pos.sum()
        agg_pos = -(m + math.log(z))
        w_pos /= z

    if neg_mode == NEG_LSE:
        m = neg.max()
        w_neg = np.exp(neg - m)
        z = w_neg.sum()
        agg_neg = m + math.log(z)
        w_neg /= z
    else:
        k = int(neg.argmax())
        agg_neg = neg[k]

    a = float(agg_neg - agg_pos)
    sig = _sigmoid(a)
    if pos_mode == POS_INDEX:
        gpos[:] = 0.0
        gpos[pos_index] = -sig
    else:
        np.multiply(w_pos, -sig, out=gpos)
    if neg_mode == NEG_LSE:
        np.multiply(w_neg, sig, out=gneg)
    else:
        gneg[:] = 0.0
        gneg[k] = sig
    return _softplus(a)


def single_lh(pos, neg, index, gpos, gneg):
    return _pair_core(pos, neg, POS_INDEX, index, NEG_LSE, gpos, gneg)


def sum_marg_lh(pos, neg, gpos, gneg):
    return _pair_core(pos, neg, POS_SOFTMAX, 0, NEG_LSE, gpos, gneg)


def lse_pair(pos, neg, gpos, gneg):
    return _pair_core(pos, neg, POS_SOFTMIN, 0, NEG_LSE, gpos, gneg)


def lse_pair_variant(pos, neg, variant, gpos, gneg):
    if variant == VARIANT_MAXP:
        return _pair_core(pos, neg, POS_INDEX, int(pos.argmax()), NEG_LSE, gpos, gneg)
    if variant == VARIANT_MAXN:
        return _pair_core(pos, neg, POS_SOFTMIN, 0, NEG_MAX, gpos, gneg)
    if variant == VARIANT_MINP:
        return _pair_core(pos, neg, POS_INDEX, int(pos.argmin()), NEG_LSE, gpos, gneg)
    if variant == VARIANT_MINP_MAXN:
        return _pair_core(pos, neg, POS_INDEX, int(pos.argmin()), NEG_MAX, gpos, gneg)
    raise ValueError(f"unknown variant code {variant}")


def joint_lh(pos, neg, gpos, gneg):
    n_pos = pos.shape[0]
    m = max(pos.max(), neg.max())
    ep = np.exp(pos - m)
    en = np.exp(neg - m)
    z = ep.sum() + en.sum()
    lse = m + math.log(z)
    np.divide(ep, z, out=gpos)
    gpos -= 1.0 / n_pos
    np.divide(en, z, out=gneg)
    return max(lse - float(pos.mean()), 0.0)
