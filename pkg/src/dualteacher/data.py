"""Synthetic Gaussian-class domains, the unlabeled reference pool, and
feature-file ingestion.

Feature files (little-endian)::

    b"SDKT" | u32 version=1 | u64 count | u32 dim | count x (i32 label, dim x f32)

A label of -1 marks an unlabeled record; a file whose labels are all -1
loads as a ReferencePool. A CSV twin with header ``label,f0,...`` is also
accepted.
"""
import csv
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    EmptyInputError,
    FormatError,
    InvalidParameterError,
    NumericError,
    ShapeError,
    TruncationError,
)

MAGIC = b"SDKT"
VERSION = 1
_HEADER = struct.Struct("<4sIQI")
UNLABELED = -1
TRAIN_FRACTION = 0.8
BACKGROUND = "background"

_POOL_STREAM = 0x5EF
_SPLIT_STREAM = 0x5B1


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    num_classes: int = 4
    samples_per_class: int = 50
    center_scale: float = 1.0
    noise_sigma: float = 0.2
    input_dim: int = 16
    seed: int = 0
    label_base: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise InvalidParameterError(f"{self.domain_id}: num_classes must be >= 1")
        if self.samples_per_class < 2:
            raise InvalidParameterError(f"{self.domain_id}: samples_per_class must be >= 2 to split")
        if not self.noise_sigma > 0:
            raise InvalidParameterError(f"{self.domain_id}: noise_sigma must be positive")

    @property
    def label_ids(self):
        return tuple(range(self.label_base, self.label_base + self.num_classes))


@dataclass(frozen=True, eq=False)
class TaskDataset:
    domain_id: str
    inputs: np.ndarray
    labels: np.ndarray
    label_ids: tuple
    train_mask: np.ndarray

    def __post_init__(self):
        X = np.ascontiguousarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels)
        mask = np.asarray(self.train_mask, dtype=bool)
        for a in (X, y, mask):
            a.flags.writeable = False
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "train_mask", mask)
        object.__setattr__(self, "label_ids", tuple(self.label_ids))
        if X.ndim != 2 or len(y) != X.shape[0] or len(mask) != X.shape[0]:
            raise ShapeError("inputs, labels and split tags must have one row per sample")
        if not set(y.tolist()) <= set(self.label_ids):
            raise ShapeError(f"{self.domain_id}: labels outside label_ids")
        if not mask.any() or mask.all():
            raise ShapeError(f"{self.domain_id}: train and test splits must both be nonempty")

    def __len__(self):
        return self.inputs.shape[0]

    def train(self):
        return self.inputs[self.train_mask], self.labels[self.train_mask]

    def test(self):
        return self.inputs[~self.train_mask], self.labels[~self.train_mask]


@dataclass(frozen=True, eq=False)
class ReferencePool:
    inputs: np.ndarray
    sample_ids: np.ndarray = None
    components: Optional[tuple] = field(default=None)

    def __post_init__(self):
        X = np.ascontiguousarray(self.inputs, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 1:
            raise EmptyInputError("reference pool needs at least one sample")
        ids = np.arange(X.shape[0]) if self.sample_ids is None else np.asarray(self.sample_ids)
        if len(ids) != X.shape[0]:
            raise ShapeError("one sample id per pool row required")
        X.flags.writeable = False
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "sample_ids", ids)
        if self.components is not None:
            object.__setattr__(self, "components", tuple(self.components))

    def __len__(self):
        return self.inputs.shape[0]

    def take(self, positions):
        comps = None if self.components is None else tuple(self.components[i] for i in positions)
        return ReferencePool(self.inputs[positions], self.sample_ids[positions], comps)


def _domain_rng(spec: DomainSpec, stream=0):
    return np.random.default_rng([spec.seed, zlib.crc32(spec.domain_id.encode()), stream])


def class_centers(spec: DomainSpec):
    return spec.center_scale * _domain_rng(spec).standard_normal((spec.num_classes, spec.input_dim))


def stratified_split(labels, seed, train_fraction=TRAIN_FRACTION):
    """Per-class shuffled split; every class with >= 2 samples lands in both sides."""
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, _SPLIT_STREAM])
    mask = np.zeros(len(labels), dtype=bool)
    for lab in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == lab)
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(train_fraction * len(idx)))
        n_train = min(max(n_train, 1), max(len(idx) - 1, 1))
        mask[idx[:n_train]] = True
    return mask


def gen_domain(spec: DomainSpec) -> TaskDataset:
    centers = class_centers(spec)
    rng = _domain_rng(spec, stream=1)
    n = spec.samples_per_class
    noise = rng.standard_normal((spec.num_classes, n, spec.input_dim))
    X = (centers[:, None, :] + spec.noise_sigma * noise).reshape(-1, spec.input_dim)
    y = np.repeat(np.asarray(spec.label_ids), n)
    mask = np.zeros(len(y), dtype=bool)
    n_train = int(round(TRAIN_FRACTION * n))
    for c in range(spec.num_classes):
        perm = rng.permutation(n)
        mask[c * n + perm[:n_train]] = True
    return TaskDataset(spec.domain_id, X, y, spec.label_ids, mask)


def gen_reference_pool(domain_specs, mix_weights, size, seed, background_weight=0.0,
                       background_scale=1.0) -> ReferencePool:
    """Unlabeled mixture of the domain generators plus an optional broad Gaussian.

    Component of each sample is drawn first, then the domain components pick a
    class uniformly and add that domain's noise around its center.
    """
    if size < 1:
        raise InvalidParameterError(f"pool size must be >= 1, got {size}")
    domain_specs = list(domain_specs)
    w = np.asarray(list(mix_weights) + [background_weight], dtype=np.float64)
    if len(w) != len(domain_specs) + 1:
        raise ShapeError("one mixing weight per domain spec required")
    if (w < 0).any() or not w.sum() > 0:
        raise InvalidParameterError("mixing weights must be nonnegative with a positive sum")
    dim = domain_specs[0].input_dim if domain_specs else None
    if dim is None:
        raise EmptyInputError("reference pool needs at least one domain spec for its input dim")
    rng = np.random.default_rng([seed, _POOL_STREAM])
    comp = rng.choice(len(w), size=size, p=w / w.sum())
    X = np.empty((size, dim))
    names = [BACKGROUND if c == len(domain_specs) else domain_specs[c].domain_id for c in comp]
    for c, spec in enumerate(domain_specs):
        rows = np.flatnonzero(comp == c)
        if len(rows) == 0:
            continue
        centers = class_centers(spec)
        cls = rng.integers(spec.num_classes, size=len(rows))
        X[rows] = centers[cls] + spec.noise_sigma * rng.standard_normal((len(rows), dim))
    rows = np.flatnonzero(comp == len(domain_specs))
    X[rows] = background_scale * rng.standard_normal((len(rows), dim))
    return ReferencePool(X, np.arange(size), tuple(names))


def new_rng_state(seed):
    return np.random.default_rng(seed).bit_generator.state


def sample_reference(pool: ReferencePool, n, rng_state):
    """Uniform draw with replacement; returns (batch, advanced rng_state)."""
    if pool is None or len(pool) == 0:
        raise EmptyInputError("cannot sample from an empty reference pool")
    if n < 1:
        raise InvalidParameterError(f"reference batch size must be >= 1, got {n}")
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = rng_state
    positions = gen.integers(0, len(pool), size=n)
    return pool.take(positions), gen.bit_generator.state


# feature files ---------------------------------------------------------


def _records(obj):
    if isinstance(obj, ReferencePool):
        return obj.inputs, np.full(len(obj), UNLABELED, dtype=np.int32)
    return obj.inputs, np.asarray(obj.labels, dtype=np.int32)


def write_feature_file(path, obj):
    """Write a TaskDataset or ReferencePool; ``.csv`` suffix selects the text form."""
    path = Path(path)
    X, labels = _records(obj)
    X32 = np.asarray(X, dtype=np.float32)
    if path.suffix.lower() == ".csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label"] + [f"f{j}" for j in range(X32.shape[1])])
            for lab, row in zip(labels, X32):
                w.writerow([int(lab)] + [repr(float(v)) for v in row])
        return
    rec = np.dtype([("label", "<i4"), ("x", "<f4", (X32.shape[1],))])
    arr = np.empty(len(labels), dtype=rec)
    arr["label"] = labels
    arr["x"] = X32
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(labels), X32.shape[1]))
        fh.write(arr.tobytes())


def _read_binary(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncationError(f"{path}: file shorter than its header")
    magic, version, count, dim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if count == 0:
        raise EmptyInputError(f"{path}: header declares zero records")
    rec = np.dtype([("label", "<i4"), ("x", "<f4", (dim,))])
    expected = _HEADER.size + count * rec.itemsize
    if len(raw) != expected:
        raise TruncationError(f"{path}: {len(raw)} bytes, header implies {expected}")
    arr = np.frombuffer(raw, dtype=rec, offset=_HEADER.size, count=count)
    return arr["label"].astype(np.int64), arr["x"].astype(np.float32)


def _read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][0] != "label":
        raise FormatError(f"{path}: expected header 'label,f0,...'")
    dim = len(rows[0]) - 1
    if rows[0][1:] != [f"f{j}" for j in range(dim)]:
        raise FormatError(f"{path}: feature columns must be f0..f{dim - 1}")
    body = rows[1:]
    if not body:
        raise EmptyInputError(f"{path}: no records")
    if any(len(r) != dim + 1 for r in body):
        raise TruncationError(f"{path}: ragged record")
    labels = np.array([int(r[0]) for r in body], dtype=np.int64)
    X = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float32)
    return labels, X


def load_feature_file(path, split_seed=0):
    """Load a feature file as a TaskDataset, or a ReferencePool when unlabeled."""
    path = Path(path)
    labels, X = _read_csv(path) if path.suffix.lower() == ".csv" else _read_binary(path)
    if not np.isfinite(X).all():
        raise NumericError(f"{path}: non-finite feature values")
    unlabeled = labels == UNLABELED
    if unlabeled.all():
        return ReferencePool(X.astype(np.float64))
    if unlabeled.any():
        raise FormatError(f"{path}: mixes labeled and unlabeled records")
    mask = stratified_split(labels, split_seed)
    label_ids = tuple(sorted(set(labels.tolist())))
    return TaskDataset(path.stem, X.astype(np.float64), labels, label_ids, mask)
