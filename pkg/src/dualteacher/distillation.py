"""Feature-distance distillation losses and the eta-weighted two-teacher objective."""
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidParameterError, ShapeError
from .model import (
    DEFAULT_TAU,
    EncoderParams,
    LabeledBatch,
    PrototypeSet,
    backward,
    ce_feature_grad,
    forward,
    seq_mean,
    seq_sum,
)

ZERO_DISTANCE = 1e-8
DEFAULT_LAMBDA = 9.0


def _as_rows(a, name, cols=None):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim == 1 and a.size == 0:
        a = a.reshape(0, cols or 0)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be a matrix, got shape {a.shape}")
    return a


@dataclass(frozen=True, eq=False)
class DistillBatchPlan:
    """A reference batch with cached teacher features and selection scores."""

    ref_inputs: np.ndarray
    eta: np.ndarray
    f_prev: np.ndarray
    f_pre: np.ndarray
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        n = len(self.eta)
        X = _as_rows(self.ref_inputs, "ref_inputs")
        object.__setattr__(self, "ref_inputs", X)
        object.__setattr__(self, "eta", np.asarray(self.eta, dtype=np.float64))
        object.__setattr__(self, "f_prev", _as_rows(self.f_prev, "f_prev"))
        object.__setattr__(self, "f_pre", _as_rows(self.f_pre, "f_pre"))
        if not (X.shape[0] == n == self.f_prev.shape[0] == self.f_pre.shape[0]):
            raise ShapeError("reference inputs, scores and teacher features must have equal row counts")
        if n and not ((self.eta >= 0).all() and (self.eta <= 1).all()):
            raise InvalidParameterError("selection scores must lie in [0, 1]")
        if not self.lam >= 0:
            raise InvalidParameterError(f"lambda must be nonnegative, got {self.lam}")

    @classmethod
    def empty(cls, input_dim, feature_dim, lam=DEFAULT_LAMBDA):
        return cls(np.empty((0, input_dim)), np.empty(0), np.empty((0, feature_dim)),
                   np.empty((0, feature_dim)), lam)

    def __len__(self):
        return len(self.eta)


def distance_terms(features, teacher_feats):
    """Per-sample distances and unit directions (zero below ZERO_DISTANCE)."""
    diff = features - teacher_feats
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    safe = dist >= ZERO_DISTANCE
    unit = np.zeros_like(diff)
    unit[safe] = diff[safe] / dist[safe, None]
    return dist, unit


def kd_loss_and_grad(student: EncoderParams, inputs, teacher_feats, backend=None):
    """Mean distance between student features and fixed teacher features."""
    X = _as_rows(inputs, "inputs", student.input_dim)
    T = _as_rows(teacher_feats, "teacher_feats", student.feature_dim)
    if X.shape[0] != T.shape[0]:
        raise ShapeError(f"{X.shape[0]} inputs but {T.shape[0]} teacher features")
    if X.shape[0] == 0:
        return 0.0, student.zeros_like()
    cache = forward(student, X, backend)
    if T.shape[1] != cache.features.shape[1]:
        raise ShapeError("teacher feature dim differs from student feature dim")
    dist, unit = distance_terms(cache.features, T)
    return seq_mean(dist), backward(student, cache, unit / len(dist), backend)


def dual_kd_loss(loss_prev, loss_pre, eta, lam=DEFAULT_LAMBDA):
    """lam * sum(eta * loss_prev) + sum((1 - eta) * loss_pre).

    ``lam = 1`` gives the plain score-weighted sum.
    """
    loss_prev = np.asarray(loss_prev, dtype=np.float64)
    loss_pre = np.asarray(loss_pre, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    if not (loss_prev.shape == loss_pre.shape == eta.shape):
        raise ShapeError(f"length mismatch: {loss_prev.shape}, {loss_pre.shape}, {eta.shape}")
    if not lam >= 0:
        raise InvalidParameterError(f"lambda must be nonnegative, got {lam}")
    return lam * seq_sum(eta * loss_prev) + seq_sum((1.0 - eta) * loss_pre)


class TotalLoss(NamedTuple):
    loss: float
    grad: EncoderParams
    ce: float
    kd_prev: float
    kd_pre: float
    dual: float
    ce_grad: EncoderParams
    kd_grad: EncoderParams


def dual_kd_loss_and_grad(student: EncoderParams, plan: DistillBatchPlan, backend=None):
    """Batch-mean dual objective; returns (dual, kd_prev mean, kd_pre mean, grad)."""
    n = len(plan)
    if n == 0:
        return 0.0, 0.0, 0.0, student.zeros_like()
    cache = forward(student, plan.ref_inputs, backend)
    d_prev, u_prev = distance_terms(cache.features, plan.f_prev)
    d_pre, u_pre = distance_terms(cache.features, plan.f_pre)
    w_prev = plan.lam * plan.eta
    w_pre = 1.0 - plan.eta
    dual = dual_kd_loss(d_prev, d_pre, plan.eta, plan.lam) / n
    grad_feat = (w_prev[:, None] * u_prev + w_pre[:, None] * u_pre) / n
    return dual, seq_mean(d_prev), seq_mean(d_pre), backward(student, cache, grad_feat, backend)


def total_loss_and_grad(student: EncoderParams, task_batch: LabeledBatch, plan: DistillBatchPlan,
                        protos: PrototypeSet, tau=DEFAULT_TAU, backend=None) -> TotalLoss:
    """Cross-entropy on the task batch plus the re-weighted dual term.

    The dual term is averaged over the reference batch; an empty plan
    contributes exactly zero.
    """
    idx = protos.indices(task_batch.labels)
    cache = forward(student, task_batch.inputs, backend)
    per_sample, grad_feat = ce_feature_grad(cache.features, idx, protos, tau)
    ce = seq_mean(per_sample)
    ce_grad = backward(student, cache, grad_feat, backend)
    dual, kd_prev, kd_pre, kd_grad = dual_kd_loss_and_grad(student, plan, backend)
    return TotalLoss(ce + dual, ce_grad + kd_grad, ce, kd_prev, kd_pre, dual, ce_grad, kd_grad)
