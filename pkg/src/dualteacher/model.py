"""Two-layer tanh feature encoder and frozen prototype classifier.

Features are L2-normalized, so cosine similarity against the unit-norm
prototype rows is a plain dot product.
"""
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels
from .errors import (
    DegenerateFeatureError,
    EmptyInputError,
    InvalidTemperatureError,
    NumericError,
    ShapeError,
)

DEGENERATE_NORM = 1e-12
DEFAULT_TAU = 0.01


def seq_sum(values) -> float:
    """Left-to-right sum; the fixed reduction order used for every mean."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return 0.0
    return float(np.add.accumulate(values.ravel())[-1])


def seq_mean(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise EmptyInputError("mean of an empty vector")
    return seq_sum(values) / values.size


def _frozen(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.flags.writeable:
        a = a.copy()
        a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class EncoderParams:
    """Weights of ``x -> normalize(W2 tanh(W1 x + b1) + b2)``.

    Also used for gradients and optimizer moments, which share the shape.
    Arrays are made read-only so a published snapshot cannot change.
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        for name in ("W1", "b1", "W2", "b2"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        H, D = self.W1.shape if self.W1.ndim == 2 else (None, None)
        if self.W1.ndim != 2 or self.W2.ndim != 2 or self.b1.ndim != 1 or self.b2.ndim != 1:
            raise ShapeError("W1, W2 must be matrices and b1, b2 vectors")
        if self.b1.shape[0] != H or self.W2.shape[1] != H or self.b2.shape[0] != self.W2.shape[0]:
            raise ShapeError(
                f"inconsistent encoder shapes W1{self.W1.shape} b1{self.b1.shape} "
                f"W2{self.W2.shape} b2{self.b2.shape}"
            )

    @classmethod
    def initialize(cls, input_dim, hidden_dim, feature_dim, rng, bias_scale=0.1):
        W1 = rng.standard_normal((hidden_dim, input_dim)) / np.sqrt(input_dim)
        b1 = np.zeros(hidden_dim)
        W2 = rng.standard_normal((feature_dim, hidden_dim)) / np.sqrt(hidden_dim)
        b2 = bias_scale * rng.standard_normal(feature_dim)
        return cls(W1, b1, W2, b2)

    @property
    def input_dim(self):
        return self.W1.shape[1]

    @property
    def hidden_dim(self):
        return self.W1.shape[0]

    @property
    def feature_dim(self):
        return self.W2.shape[0]

    def arrays(self):
        return (self.W1, self.b1, self.W2, self.b2)

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        n = sum(a.size for a in self.arrays())
        if vec.shape != (n,):
            raise ShapeError(f"flat vector has shape {vec.shape}, expected ({n},)")
        out, i = [], 0
        for a in self.arrays():
            out.append(vec[i:i + a.size].reshape(a.shape))
            i += a.size
        return EncoderParams(*out)

    def map(self, fn, *others):
        """Apply ``fn`` array-wise across this and other same-shaped params."""
        for o in others:
            self.check_same_shape(o)
        return EncoderParams(*(fn(*arrs) for arrs in zip(self.arrays(), *(o.arrays() for o in others))))

    def zeros_like(self):
        return self.map(np.zeros_like)

    def __add__(self, other):
        return self.map(np.add, other)

    def check_same_shape(self, other):
        if any(a.shape != b.shape for a, b in zip(self.arrays(), other.arrays())):
            raise ShapeError("parameter shapes differ")

    def is_finite(self):
        return all(np.isfinite(a).all() for a in self.arrays())

    def identical(self, other):
        """Bitwise equality of every entry."""
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.arrays(), other.arrays())
        )


@dataclass(frozen=True, eq=False)
class PrototypeSet:
    """One fixed unit-norm row per class label."""

    prototypes: np.ndarray
    label_ids: tuple

    def __post_init__(self):
        P = _frozen(np.atleast_2d(self.prototypes))
        object.__setattr__(self, "prototypes", P)
        object.__setattr__(self, "label_ids", tuple(self.label_ids))
        if P.shape[0] < 1 or P.shape[0] != len(self.label_ids):
            raise ShapeError(f"{P.shape[0]} prototype rows for {len(self.label_ids)} labels")
        if len(set(self.label_ids)) != len(self.label_ids):
            raise ShapeError("label_ids must be unique")
        if np.max(np.abs(np.linalg.norm(P, axis=1) - 1.0)) > 1e-9:
            raise ShapeError("prototype rows must have unit norm")
        object.__setattr__(self, "_index", {lab: i for i, lab in enumerate(self.label_ids)})

    @classmethod
    def random(cls, label_ids, feature_dim, rng):
        P = rng.standard_normal((len(label_ids), feature_dim))
        return cls(P / np.linalg.norm(P, axis=1, keepdims=True), tuple(label_ids))

    def __len__(self):
        return len(self.label_ids)

    def indices(self, labels):
        try:
            return np.fromiter((self._index[lab] for lab in labels), dtype=np.intp, count=len(labels))
        except KeyError as exc:
            raise ShapeError(f"label {exc.args[0]!r} not in prototype set") from None

    def subset(self, label_ids):
        idx = self.indices(list(label_ids))
        return PrototypeSet(self.prototypes[idx], tuple(label_ids))


@dataclass(frozen=True, eq=False)
class LabeledBatch:
    inputs: np.ndarray
    labels: Sequence

    def __post_init__(self):
        X = np.ascontiguousarray(np.atleast_2d(self.inputs), dtype=np.float64)
        object.__setattr__(self, "inputs", X)
        if X.shape[0] < 1 or X.shape[0] != len(self.labels):
            raise ShapeError(f"batch has {X.shape[0]} inputs and {len(self.labels)} labels")


class ForwardCache(NamedTuple):
    inputs: np.ndarray
    hidden: np.ndarray
    raw: np.ndarray
    norms: np.ndarray
    features: np.ndarray


def forward(params: EncoderParams, X, backend=None) -> ForwardCache:
    """Batched encoder pass keeping the intermediates needed for backprop."""
    k = kernels if backend is None else kernels.get(backend)
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    if X.shape[1] != params.input_dim:
        raise ShapeError(f"input dim {X.shape[1]} != encoder input dim {params.input_dim}")
    if X.shape[0] == 0:
        F = params.feature_dim
        return ForwardCache(X, np.empty((0, params.hidden_dim)), np.empty((0, F)), np.empty(0), np.empty((0, F)))
    hid, raw, nrm, feat = k.encode_batch(params.W1, params.b1, params.W2, params.b2, X)
    if X.shape[0] and not (nrm >= DEGENERATE_NORM).all():
        bad = int(np.argmin(np.where(np.isnan(nrm), -1.0, nrm)))
        raise DegenerateFeatureError(f"raw feature norm {nrm[bad]:.3g} below {DEGENERATE_NORM} at row {bad}")
    return ForwardCache(X, hid, raw, nrm, feat)


def backward(params: EncoderParams, cache: ForwardCache, grad_features, backend=None) -> EncoderParams:
    """Parameter gradient given dLoss/dFeature for every row of the batch."""
    k = kernels if backend is None else kernels.get(backend)
    if cache.inputs.shape[0] == 0:
        return params.zeros_like()
    G = np.ascontiguousarray(grad_features, dtype=np.float64)
    grads = k.backward_batch(params.W1, params.W2, cache.inputs, cache.hidden,
                             cache.features, cache.norms, G)
    return EncoderParams(*grads)


def encode_batch(params: EncoderParams, X) -> np.ndarray:
    return forward(params, X).features


def encode(params: EncoderParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("encode expects a single input vector")
    if not np.isfinite(x).all():
        raise NumericError("input contains non-finite values")
    return encode_batch(params, x[None, :])[0]


def _check_tau(tau):
    if not tau > 0:
        raise InvalidTemperatureError(f"temperature must be positive, got {tau}")


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def class_logits(features, protos: PrototypeSet, tau):
    _check_tau(tau)
    return (np.atleast_2d(features) @ protos.prototypes.T) / tau


def class_probs(f, protos: PrototypeSet, tau=DEFAULT_TAU) -> np.ndarray:
    """Temperature softmax over cosine similarity to each prototype."""
    return _softmax(class_logits(f, protos, tau))[0]


def ce_feature_grad(features, label_idx, protos: PrototypeSet, tau):
    """Per-sample cross-entropy and its gradient w.r.t. the features.

    The feature gradient already carries the 1/B of the batch mean.
    """
    logits = class_logits(features, protos, tau)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(label_idx))
    per_sample = lse - z[rows, label_idx]
    p = np.exp(z - lse[:, None])
    p[rows, label_idx] -= 1.0
    grad_feat = (p @ protos.prototypes) / (tau * len(label_idx))
    return per_sample, grad_feat


def ce_loss_and_grad(params: EncoderParams, batch: LabeledBatch, protos: PrototypeSet,
                     tau=DEFAULT_TAU, backend=None):
    """Mean cross-entropy of the prototype classifier and its exact gradient."""
    _check_tau(tau)
    idx = protos.indices(batch.labels)
    cache = forward(params, batch.inputs, backend)
    per_sample, grad_feat = ce_feature_grad(cache.features, idx, protos, tau)
    return seq_mean(per_sample), backward(params, cache, grad_feat, backend)


def predict(params: EncoderParams, X, protos: PrototypeSet, tau=DEFAULT_TAU):
    """Argmax label index per row; ties go to the lowest prototype index."""
    return np.argmax(class_logits(encode_batch(params, X), protos, tau), axis=1)
