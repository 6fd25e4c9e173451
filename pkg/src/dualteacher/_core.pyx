# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled encoder kernels.

Loops accumulate strictly left to right (over input dims, hidden units and
batch samples) so results match the numpy implementation in ``_reference``
term for term. Build with ``-ffp-contract=off`` to keep that true.
"""
import numpy as np

from libc.math cimport sqrt, tanh


def encode_batch(const double[:, ::1] W1, const double[::1] b1,
                 const double[:, ::1] W2, const double[::1] b2,
                 const double[:, ::1] X):
    cdef Py_ssize_t B = X.shape[0], D = X.shape[1]
    cdef Py_ssize_t H = W1.shape[0], F = W2.shape[0]
    cdef Py_ssize_t b, d, h, f
    cdef double acc, n

    hid_arr = np.empty((B, H))
    raw_arr = np.empty((B, F))
    nrm_arr = np.empty(B)
    feat_arr = np.empty((B, F))
    cdef double[:, ::1] hid = hid_arr
    cdef double[:, ::1] raw = raw_arr
    cdef double[::1] nrm = nrm_arr
    cdef double[:, ::1] feat = feat_arr

    with nogil:
        for b in range(B):
            for h in range(H):
                acc = 0.0
                for d in range(D):
                    acc = acc + W1[h, d] * X[b, d]
                hid[b, h] = tanh(acc + b1[h])
            for f in range(F):
                acc = 0.0
                for h in range(H):
                    acc = acc + W2[f, h] * hid[b, h]
                raw[b, f] = acc + b2[f]
            acc = 0.0
            for f in range(F):
                acc = acc + raw[b, f] * raw[b, f]
            n = sqrt(acc)
            nrm[b] = n
            for f in range(F):
                feat[b, f] = raw[b, f] / n
    return hid_arr, raw_arr, nrm_arr, feat_arr


def backward_batch(const double[:, ::1] W1, const double[:, ::1] W2,
                   const double[:, ::1] X, const double[:, ::1] hid,
                   const double[:, ::1] feat, const double[::1] nrm,
                   const double[:, ::1] grad_feat):
    """Backpropagate per-sample feature gradients to parameter gradients."""
    cdef Py_ssize_t B = X.shape[0], D = X.shape[1]
    cdef Py_ssize_t H = W1.shape[0], F = W2.shape[0]
    cdef Py_ssize_t b, d, h, f
    cdef double dot, acc

    gW1_arr = np.zeros((H, D))
    gb1_arr = np.zeros(H)
    gW2_arr = np.zeros((F, H))
    gb2_arr = np.zeros(F)
    dr_arr = np.empty(F)
    dz_arr = np.empty(H)
    cdef double[:, ::1] gW1 = gW1_arr
    cdef double[::1] gb1 = gb1_arr
    cdef double[:, ::1] gW2 = gW2_arr
    cdef double[::1] gb2 = gb2_arr
    cdef double[::1] dr = dr_arr
    cdef double[::1] dz = dz_arr

    with nogil:
        for b in range(B):
            dot = 0.0
            for f in range(F):
                dot = dot + feat[b, f] * grad_feat[b, f]
            for f in range(F):
                dr[f] = (grad_feat[b, f] - feat[b, f] * dot) / nrm[b]
                gb2[f] = gb2[f] + dr[f]
                for h in range(H):
                    gW2[f, h] = gW2[f, h] + dr[f] * hid[b, h]
            for h in range(H):
                acc = 0.0
                for f in range(F):
                    acc = acc + W2[f, h] * dr[f]
                dz[h] = acc * (1.0 - hid[b, h] * hid[b, h])
                gb1[h] = gb1[h] + dz[h]
                for d in range(D):
                    gW1[h, d] = gW1[h, d] + dz[h] * X[b, d]
    return gW1_arr, gb1_arr, gW2_arr, gb2_arr
