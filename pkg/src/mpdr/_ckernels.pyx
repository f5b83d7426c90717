# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled loss kernels; same contract as ``_pykernels``."""

from libc.math cimport exp, log, log1p, fabs

NAME = "cython"

cdef enum:
    POS_INDEX = 0
    POS_SOFTMAX = 1
    POS_SOFTMIN = 2

cdef enum:
    NEG_LSE = 0
    NEG_MAX = 1

VARIANT_MAXP = 0
VARIANT_MAXN = 1
VARIANT_MINP = 2
VARIANT_MINP_MAXN = 3


cdef inline double _softplus(double a) nogil:
    return (a if a > 0.0 else 0.0) + log1p(exp(-fabs(a)))


cdef inline double _sigmoid(double a) nogil:
    cdef double e
    if a >= 0.0:
        return 1.0 / (1.0 + exp(-a))
    e = exp(a)
    return e / (1.0 + e)


cdef inline Py_ssize_t _argmax(const double[::1] v) nogil:
    cdef Py_ssize_t i, best = 0
    for i in range(1, v.shape[0]):
        if v[i] > v[best]:
            best = i
    return best


cdef inline Py_ssize_t _argmin(const double[::1] v) nogil:
    cdef Py_ssize_t i, best = 0
    for i in range(1, v.shape[0]):
        if v[i] < v[best]:
            best = i
    return best


def log_sum_exp(const double[::1] values):
    cdef Py_ssize_t i, n = values.shape[0]
    cdef double m = values[0], z = 0.0
    for i in range(1, n):
        if values[i] > m:
            m = values[i]
    for i in range(n):
        z += exp(values[i] - m)
    return m + log(z)


cdef double _pair_core(const double[::1] pos, const double[::1] neg,
                       int pos_mode, Py_ssize_t pos_index, int neg_mode,
                       double[::1] gpos, double[::1] gneg) nogil:
    cdef Py_ssize_t i, k = 0
    cdef Py_ssize_t n_pos = pos.shape[0], n_neg = neg.shape[0]
    cdef double m, z, agg_pos, agg_neg, a, sig

    if pos_mode == POS_INDEX:
        agg_pos = pos[pos_index]
    elif pos_mode == POS_SOFTMAX:
        m = pos[_argmax(pos)]
        z = 0.0
        for i in range(n_pos):
            gpos[i] = exp(pos[i] - m)
            z += gpos[i]
        agg_pos = m + log(z)
        for i in range(n_pos):
            gpos[i] /= z
    else:
        m = -pos[_argmin(pos)]
        z = 0.0
        for i in range(n_pos):
            gpos[i] = exp(-pos[i] - m)
            z += gpos[i]
        agg_pos = -(m + log(z))
        for i in range(n_pos):
            gpos[i] /= z

    if neg_mode == NEG_LSE:
        m = neg[_argmax(neg)]
        z = 0.0
        for i in range(n_neg):
            gneg[i] = exp(neg[i] - m)
            z += gneg[i]
        agg_neg = m + log(z)
        for i in range(n_neg):
            gneg[i] /= z
    else:
        k = _argmax(neg)
        agg_neg = neg[k]

    a = agg_neg - agg_pos
    sig = _sigmoid(a)
    if pos_mode == POS_INDEX:
        for i in range(n_pos):
            gpos[i] = 0.0
        gpos[pos_index] = -sig
    else:
        for i in range(n_pos):
            gpos[i] = -sig * gpos[i]
    if neg_mode == NEG_LSE:
        for i in range(n_neg):
            gneg[i] = sig * gneg[i]
    else:
        for i in range(n_neg):
            gneg[i] = 0.0
        gneg[k] = sig
    return _softplus(a)


def single_lh(const double[::1] pos, const double[::1] neg, Py_ssize_t index,
              double[::1] gpos, double[::1] gneg):
    return _pair_core(pos, neg, POS_INDEX, index, NEG_LSE, gpos, gneg)


def sum_marg_lh(const double[::1] pos, const double[::1] neg,
                double[::1] gpos, double[::1] gneg):
    return _pair_core(pos, neg, POS_SOFTMAX, 0, NEG_LSE, gpos, gneg)


def lse_pair(const double[::1] pos, const double[::1] neg,
             double[::1] gpos, double[::1] gneg):
    return _pair_core(pos, neg, POS_SOFTMIN, 0, NEG_LSE, gpos, gneg)


def lse_pair_variant(const double[::1] pos, const double[::1] neg, int variant,
                     double[::1] gpos, double[::1] gneg):
    if variant == VARIANT_MAXP:
        return _pair_core(pos, neg, POS_INDEX, _argmax(pos), NEG_LSE, gpos, gneg)
    if variant == VARIANT_MAXN:
        return _pair_core(pos, neg, POS_SOFTMIN, 0, NEG_MAX, gpos, gneg)
    if variant == VARIANT_MINP:
        return _pair_core(pos, neg, POS_INDEX, _argmin(pos), NEG_LSE, gpos, gneg)
    if variant == VARIANT_MINP_MAXN:
        return _pair_core(pos, neg, POS_INDEX, _argmin(pos), NEG_MAX, gpos, gneg)
    raise ValueError(f"unknown variant code {variant}")


def joint_lh(const double[::1] pos, const double[::1] neg,
             double[::1] gpos, double[::1] gneg):
    cdef Py_ssize_t i, n_pos = pos.shape[0], n_neg = neg.shape[0]
    cdef double m = pos[_argmax(pos)], z = 0.0, mean = 0.0, loss
    if neg[_argmax(neg)] > m:
        m = neg[_argmax(neg)]
    for i in range(n_pos):
        gpos[i] = exp(pos[i] - m)
        z += gpos[i]
        mean += pos[i]
    for i in range(n_neg):
        gneg[i] = exp(neg[i] - m)
        z += gneg[i]
    mean /= n_pos
    for i in range(n_pos):
        gpos[i] = gpos[i] / z - 1.0 / n_pos
    for i in range(n_neg):
        gneg[i] /= z
    loss = m + log(z) - mean
    return loss if loss > 0.0 else 0.0
