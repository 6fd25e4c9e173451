"""Dual-teacher feature discrepancy and the sigmoid selection score.

A reference sample whose features moved a lot between the pre-trained and
the latest fine-tuned encoder looks like previously fine-tuned data, so its
score approaches 1 and distillation leans on the fine-tuned teacher.
"""
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import EmptyInputError, InvalidParameterError, ShapeError
from .model import EncoderParams, encode_batch, seq_mean

DEFAULT_DELTA = 0.2
DEFAULT_GAMMA = float(Fraction(1, 6))


@dataclass(frozen=True)
class SelectionParams:
    delta: float = DEFAULT_DELTA
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if not np.isfinite(self.delta):
            raise InvalidParameterError(f"delta must be finite, got {self.delta}")
        if not self.gamma > 0:
            raise InvalidParameterError(f"gamma must be positive, got {self.gamma}")


@dataclass(frozen=True)
class DiscrepancyRecord:
    sample_id: int
    d: float
    eta: float


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def discrepancy(f_prev, f_pre):
    """Euclidean distance between the two teachers' features."""
    f_prev = np.asarray(f_prev, dtype=np.float64)
    f_pre = np.asarray(f_pre, dtype=np.float64)
    if f_prev.shape != f_pre.shape:
        raise ShapeError(f"feature shapes differ: {f_prev.shape} vs {f_pre.shape}")
    return np.sqrt(np.sum((f_prev - f_pre) ** 2, axis=-1))


def selection_score(d, params: SelectionParams = SelectionParams()):
    """sigmoid((d - delta) / gamma); scalar in, scalar out."""
    if not params.gamma > 0:
        raise InvalidParameterError(f"gamma must be positive, got {params.gamma}")
    out = _sigmoid((np.asarray(d, dtype=np.float64) - params.delta) / params.gamma)
    return float(out) if out.ndim == 0 else out


def teacher_features(teacher_prev: EncoderParams, teacher_pre: EncoderParams, X):
    return encode_batch(teacher_prev, X), encode_batch(teacher_pre, X)


def score_pool(teacher_prev, teacher_pre, X, params: SelectionParams, sample_ids=None):
    """Discrepancy and score for every row of ``X`` as records."""
    f_prev, f_pre = teacher_features(teacher_prev, teacher_pre, X)
    d = discrepancy(f_prev, f_pre)
    eta = selection_score(d, params)
    ids = range(len(d)) if sample_ids is None else sample_ids
    return [DiscrepancyRecord(int(i), float(di), float(ei)) for i, di, ei in zip(ids, d, np.atleast_1d(eta))]


def avg_domain_discrepancy(teacher_a: EncoderParams, teacher_b: EncoderParams, data) -> float:
    """Mean teacher-to-teacher distance over every sample of ``data``."""
    X = getattr(data, "inputs", data)
    if len(X) == 0:
        raise EmptyInputError("cannot average discrepancy over an empty dataset")
    fa, fb = teacher_features(teacher_a, teacher_b, X)
    return seq_mean(discrepancy(fa, fb))


def rank_reference(records, k):
    """Ids of the ``k`` highest-scoring records; equal scores rank by id.

    ``records`` may hold DiscrepancyRecord objects or (sample_id, eta) pairs.
    """
    pairs = [(r.sample_id, r.eta) if isinstance(r, DiscrepancyRecord) else (r[0], r[1]) for r in records]
    pairs.sort(key=lambda p: (-p[1], p[0]))
    return [sid for sid, _ in pairs[:max(k, 0)]]
