"""Accuracy under the two evaluation regimes and the three sequence metrics.

Matrices hold fractions in [0, 1]; the sequence metrics report percentage
points. Row i is the model after stage i (row 0 is the pre-trained model),
column j is the j-th task of the sequence.
"""
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import EmptyInputError, ShapeError, UndefinedMetricError
from .model import DEFAULT_TAU, PrototypeSet, predict

MTIL = "MTIL"
MCIL = "MCIL"
REGIMES = (MTIL, MCIL)


@dataclass(frozen=True, eq=False)
class AccuracyMatrix:
    values: np.ndarray

    def __post_init__(self):
        A = np.array(self.values, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1] + 1:
            raise ShapeError(f"accuracy matrix must be (K+1) x K, got {A.shape}")
        if not ((A >= 0) & (A <= 1)).all():
            raise ShapeError("accuracies must lie in [0, 1]")
        A.flags.writeable = False
        object.__setattr__(self, "values", A)

    @property
    def num_tasks(self):
        return self.values.shape[1]


class SequenceMetrics(NamedTuple):
    forgetting: float
    degradation: float
    avg_accuracy: float


def _values(A):
    return A.values if isinstance(A, AccuracyMatrix) else AccuracyMatrix(A).values


def accuracy(params, data, protos: PrototypeSet, tau=DEFAULT_TAU, regime=MTIL) -> float:
    """Test-split accuracy; MTIL restricts prototypes to the task's labels."""
    X, y = data.test()
    if len(y) == 0:
        raise EmptyInputError(f"{data.domain_id}: empty test split")
    if regime == MTIL:
        protos = protos.subset(data.label_ids)
    elif regime != MCIL:
        raise ValueError(f"unknown regime {regime!r}")
    pred = predict(params, X, protos, tau)
    return float(np.mean(pred == protos.indices(list(y))))


def forgetting(A) -> float:
    """Mean over tasks 1..K-1 of the largest drop below the just-fine-tuned accuracy."""
    V = _values(A)
    K = V.shape[1]
    if K < 2:
        raise UndefinedMetricError("forgetting needs at least two tasks")
    drops = [max(0.0, float(np.max(V[j, j - 1] - V[j:, j - 1]))) for j in range(1, K)]
    return 100.0 * float(np.mean(drops))


def zs_degradation(A) -> float:
    """Mean over tasks 2..K of the largest drop below zero-shot before training on it."""
    V = _values(A)
    K = V.shape[1]
    if K < 2:
        raise UndefinedMetricError("zero-shot degradation needs at least two tasks")
    drops = [max(0.0, float(np.max(V[0, j - 1] - V[1:j, j - 1]))) for j in range(2, K + 1)]
    return 100.0 * float(np.mean(drops))


def avg_accuracy(A) -> float:
    V = _values(A)
    return 100.0 * float(np.mean(V[-1]))


def sequence_metrics(A) -> SequenceMetrics:
    return SequenceMetrics(forgetting(A), zs_degradation(A), avg_accuracy(A))


def aggregate(results):
    """Per-metric arithmetic mean over sequences.

    Accepts metric triples or plain numbers (one metric across sequences).
    """
    results = list(results)
    if not results:
        raise EmptyInputError("nothing to aggregate")
    if np.ndim(results[0]) == 0:
        return float(np.mean(np.asarray(results, dtype=np.float64)))
    rows = np.asarray([tuple(r) for r in results], dtype=np.float64)
    return SequenceMetrics(*(float(v) for v in rows.mean(axis=0)))
