"""Pure numpy versions of the encoder kernels.

Every reduction goes through ``np.add.accumulate`` so the summation order is
the same sequential order the compiled kernels use, and tanh is the C
library's (numpy ships its own, which differs in the last bit) so both
backends agree bitwise.
"""
import math

import numpy as np

_libm_tanh = np.frompyfunc(math.tanh, 1, 1)


def _tanh(a):
    return _libm_tanh(a).astype(np.float64)


def _seq(a, axis):
    # + 0.0 mirrors the compiled loops, whose sums start at +0.0 (no -0.0 results)
    return np.add.accumulate(a, axis=axis).take(-1, axis=axis) + 0.0


def encode_batch(W1, b1, W2, b2, X):
    hid = _tanh(_seq(W1[None, :, :] * X[:, None, :], 2) + b1)
    raw = _seq(W2[None, :, :] * hid[:, None, :], 2) + b2
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        nrm = np.sqrt(_seq(raw * raw, 1))
        feat = raw / nrm[:, None]
    return hid, raw, nrm, feat


def backward_batch(W1, W2, X, hid, feat, nrm, grad_feat):
    dot = _seq(feat * grad_feat, 1)
    dr = (grad_feat - feat * dot[:, None]) / nrm[:, None]
    gb2 = _seq(dr, 0)
    gW2 = _seq(dr[:, :, None] * hid[:, None, :], 0)
    dz = _seq(W2.T[None, :, :] * dr[:, None, :], 2) * (1.0 - hid * hid)
    gb1 = _seq(dz, 0)
    gW1 = _seq(dz[:, :, None] * X[:, None, :], 0)
    return gW1, gb1, gW2, gb2
