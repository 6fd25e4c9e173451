"""Rotated task sequences, the per-stage trainer, and the full-sequence runner.

Every stage starts from the previous stage's encoder, freezes the
pre-trained encoder and the previous encoder as teachers, caches their
features (and selection scores) over the reference pool, then runs
``epochs`` passes over the task's training split.
"""
import hashlib
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, NamedTuple, Tuple

import numpy as np

from . import data as data_mod
from .config import ExperimentConfig
from .distillation import DistillBatchPlan, TotalLoss, kd_loss_and_grad, total_loss_and_grad
from .errors import DivergenceError, EmptyInputError
from .metrics import AccuracyMatrix, accuracy
from .model import EncoderParams, LabeledBatch, PrototypeSet, ce_loss_and_grad, encode_batch
from .optimizer import OptimizerState, ScheduleSpec, adamw_step, cosine_lr
from .selection import SelectionParams, avg_domain_discrepancy, discrepancy, selection_score

REFERENCE_METHODS = ("ours", "distill_pre", "distill_prev")

# rng stream tags
_PROTOS, _INIT, _PRETRAIN, _TASK, _REF = 11, 12, 13, 21, 22


def make_sequences(K, base=None) -> List[Tuple]:
    """K left rotations of ``base`` (default 1..K); sequence i starts at base[i-1]."""
    if K < 1:
        raise ValueError(f"need K >= 1, got {K}")
    base = tuple(range(1, K + 1)) if base is None else tuple(base)
    if len(base) != K:
        raise ValueError(f"base order has {len(base)} entries, expected {K}")
    return [tuple(base[(i + j) % K] for j in range(K)) for i in range(K)]


# world ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class World:
    """Everything a seed fixes: domains, prototypes, reference pool, pre-trained encoder."""

    seed: int
    specs: Tuple[data_mod.DomainSpec, ...]
    tasks: dict
    protos: PrototypeSet
    pool: data_mod.ReferencePool
    g0: EncoderParams


def domain_specs(cfg: ExperimentConfig, seed):
    specs, base = [], 0
    for d in cfg.domains:
        specs.append(data_mod.DomainSpec(d.domain_id, d.num_classes, d.samples_per_class, d.center_scale,
                                         d.noise_sigma, cfg.input_dim, seed, base))
        base += d.num_classes
    return tuple(specs)


def _pretrain_data(cfg, specs, protos, seed):
    """Blurred copies of every domain labelled with coarse classes.

    Each run of ``coarse_group`` consecutive classes in a domain shares one
    coarse label whose prototype is the normalized sum of the fine ones, so
    the pre-trained encoder separates groups but not the classes inside them.
    """
    p = cfg.pretrain
    rng = np.random.default_rng([seed, _PRETRAIN])
    X, y, coarse_rows, coarse_ids = [], [], [], []
    for spec in specs:
        centers = data_mod.class_centers(spec)
        centers = centers + p.center_jitter * spec.center_scale * rng.standard_normal(centers.shape)
        labels = spec.label_ids
        for g in range(0, len(labels), p.coarse_group):
            group = labels[g:g + p.coarse_group]
            row = protos.prototypes[protos.indices(group)].sum(axis=0)
            coarse_rows.append(row / np.linalg.norm(row))
            coarse_ids.append(group[0])
            for lab in group:
                c = lab - spec.label_base
                X.append(centers[c] + p.noise_mult * spec.noise_sigma
                         * rng.standard_normal((p.samples_per_class, spec.input_dim)))
                y.extend([group[0]] * p.samples_per_class)
    return np.vstack(X), np.asarray(y), PrototypeSet(np.array(coarse_rows), coarse_ids)


def pretrain(cfg: ExperimentConfig, specs, protos: PrototypeSet, seed) -> EncoderParams:
    """Train the stand-in pre-trained encoder from a seeded random init."""
    rng = np.random.default_rng([seed, _INIT])
    params = EncoderParams.initialize(cfg.input_dim, cfg.hidden_dim, cfg.feature_dim, rng)
    p = cfg.pretrain
    if p.epochs == 0:
        return params
    X, y, coarse = _pretrain_data(cfg, specs, protos, seed)
    shuffle = np.random.default_rng([seed, _PRETRAIN, 1])
    steps = math.ceil(len(y) / p.batch)
    sched = ScheduleSpec(p.base_lr, p.epochs * steps)
    o = cfg.optimizer
    state = OptimizerState.zeros(params, beta1=o.beta1, beta2=o.beta2, eps=o.eps, weight_decay=o.weight_decay)
    t = 0
    for _ in range(p.epochs):
        perm = shuffle.permutation(len(y))
        for s in range(steps):
            idx = perm[s * p.batch:(s + 1) * p.batch]
            _, grad = ce_loss_and_grad(params, LabeledBatch(X[idx], y[idx]), coarse, cfg.tau)
            params, state = adamw_step(state, params, grad, cosine_lr(t, sched))
            t += 1
    return params


@lru_cache(maxsize=8)
def build_world(cfg: ExperimentConfig, seed) -> World:
    specs = domain_specs(cfg, seed)
    tasks = {s.domain_id: data_mod.gen_domain(s) for s in specs}
    labels = [lab for s in specs for lab in s.label_ids]
    protos = PrototypeSet.random(labels, cfg.feature_dim, np.random.default_rng([seed, _PROTOS]))
    pc = cfg.pool
    weights = pc.domain_weights or (1.0,) * len(specs)
    pool = data_mod.gen_reference_pool(specs, weights, pc.size, seed, pc.background_weight, pc.background_scale)
    g0 = pretrain(cfg, specs, protos, seed)
    return World(seed, specs, tasks, protos, pool, g0)


# losses ---------------------------------------------------------------


def baseline_loss(method, student, task_batch, protos, tau, ref_inputs=None, f_prev=None, f_pre=None,
                  task_teacher=None, backend=None) -> TotalLoss:
    """CE plus the single-teacher distillation term each baseline uses."""
    ce, ce_grad = ce_loss_and_grad(student, task_batch, protos, tau, backend)
    kd_prev = kd_pre = 0.0
    kd_grad = student.zeros_like()
    if method == "continual_ft":
        pass
    elif method == "distill_pre":
        kd_pre, kd_grad = kd_loss_and_grad(student, ref_inputs, f_pre, backend)
    elif method == "distill_prev":
        kd_prev, kd_grad = kd_loss_and_grad(student, ref_inputs, f_prev, backend)
    elif method == "lwf":
        kd_prev, kd_grad = kd_loss_and_grad(student, task_batch.inputs, task_teacher, backend)
    else:
        raise ValueError(f"unknown baseline {method!r}")
    kd = kd_prev + kd_pre
    return TotalLoss(ce + kd, ce_grad + kd_grad, ce, kd_prev, kd_pre, kd, ce_grad, kd_grad)


# stage trainer --------------------------------------------------------


class TraceRow(NamedTuple):
    step: int
    lr: float
    loss_total: float
    loss_ce: float
    loss_kd_prev: float
    loss_kd_pre: float
    eta_mean: float


@dataclass(eq=False)
class StageResult:
    stage: int
    params: EncoderParams
    traces: List[TraceRow]
    eta: np.ndarray
    discrepancy: np.ndarray
    teacher_hash_start: str = ""
    teacher_hash_end: str = ""
    domain_discrepancy: dict = field(default_factory=dict)

    @property
    def eta_stats(self):
        if self.eta.size == 0:
            return {}
        return {"mean": float(self.eta.mean()), "min": float(self.eta.min()),
                "max": float(self.eta.max()), "frac_prev": float(np.mean(self.eta > 0.5))}


def _digest(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def train_stage(g_prev: EncoderParams, g_0: EncoderParams, task: data_mod.TaskDataset,
                pool: data_mod.ReferencePool, cfg: ExperimentConfig, protos: PrototypeSet,
                stage=1, rng_key=(0, 1), method=None, backend=None) -> StageResult:
    """Fine-tune a copy of ``g_prev`` on ``task`` with the configured method.

    ``rng_key`` (seed, sequence index) together with ``stage`` fixes the
    task-batch order and the reference draws; the method does not, so all
    methods see identical batches.
    """
    method = method or cfg.method
    t = cfg.training
    X_tr, y_tr = task.train()
    task_protos = protos.subset(task.label_ids)
    uses_pool = method in REFERENCE_METHODS and t.ref_batch > 0

    f_prev = f_pre = np.empty((0, cfg.feature_dim))
    d = eta = np.empty(0)
    if pool is not None and len(pool):
        f_prev = encode_batch(g_prev, pool.inputs)
        f_pre = encode_batch(g_0, pool.inputs)
        f_prev.flags.writeable = False
        f_pre.flags.writeable = False
        d = discrepancy(f_prev, f_pre)
        eta = np.atleast_1d(selection_score(d, SelectionParams(cfg.selection.delta, cfg.selection.gamma)))
    elif uses_pool:
        raise EmptyInputError(f"method {method} needs a nonempty reference pool")
    task_teacher = encode_batch(g_prev, X_tr) if method == "lwf" else None
    hash_start = _digest(f_prev, f_pre)

    steps_per_epoch = math.ceil(len(y_tr) / t.task_batch)
    total = t.epochs * steps_per_epoch
    params = g_prev
    traces = []
    if total > 0:
        o = cfg.optimizer
        sched = ScheduleSpec(o.base_lr, total)
        state = OptimizerState.zeros(params, beta1=o.beta1, beta2=o.beta2, eps=o.eps, weight_decay=o.weight_decay)
        seed, seq_index = rng_key
        task_rng = np.random.default_rng([seed, seq_index, stage, _TASK])
        ref_state = data_mod.new_rng_state([seed, seq_index, stage, _REF])
        step = 0
        for _ in range(t.epochs):
            perm = task_rng.permutation(len(y_tr))
            for s in range(steps_per_epoch):
                idx = perm[s * t.task_batch:(s + 1) * t.task_batch]
                batch = LabeledBatch(X_tr[idx], y_tr[idx])
                pos = np.empty(0, dtype=np.intp)
                if uses_pool:
                    ref, ref_state = data_mod.sample_reference(pool, t.ref_batch, ref_state)
                    pos = ref.sample_ids
                if method == "ours":
                    plan = DistillBatchPlan(pool.inputs[pos] if len(pos) else np.empty((0, cfg.input_dim)),
                                            eta[pos], f_prev[pos], f_pre[pos], cfg.selection.lam)
                    res = total_loss_and_grad(params, batch, plan, task_protos, cfg.tau, backend)
                    eta_mean = float(np.mean(eta[pos])) if len(pos) else 0.0
                else:
                    res = baseline_loss(method, params, batch, task_protos, cfg.tau,
                                        ref_inputs=pool.inputs[pos] if uses_pool else None,
                                        f_prev=f_prev[pos], f_pre=f_pre[pos],
                                        task_teacher=None if task_teacher is None else task_teacher[idx],
                                        backend=backend)
                    eta_mean = 0.0
                if not np.isfinite(res.loss):
                    raise DivergenceError(f"non-finite loss at stage {stage}, step {step}", stage=stage, step=step)
                lr = cosine_lr(step, sched)
                with np.errstate(over="ignore", invalid="ignore"):
                    params, state = adamw_step(state, params, res.grad, lr)
                if not params.is_finite():
                    raise DivergenceError(f"non-finite parameters after stage {stage}, step {step}",
                                          stage=stage, step=step)
                traces.append(TraceRow(step, lr, res.loss, res.ce, res.kd_prev, res.kd_pre, eta_mean))
                step += 1
    return StageResult(stage, params, traces, eta, d, hash_start, _digest(f_prev, f_pre))


# sequence runner ------------------------------------------------------


def evaluate_row(params, tasks_in_order, protos, tau, regime):
    return [accuracy(params, task, protos, tau, regime) for task in tasks_in_order]


def run_sequence(cfg: ExperimentConfig, seq, seed=None, seq_index=1, world=None, method=None,
                 backend=None):
    """Train through ``seq`` (domain ids) and evaluate after every stage.

    Returns (AccuracyMatrix, list of StageResult). Row 0 is the pre-trained
    encoder's zero-shot accuracy.
    """
    seed = cfg.seeds[0] if seed is None else seed
    world = world or build_world(cfg, seed)
    order = [world.tasks[d] for d in seq]
    rows = [evaluate_row(world.g0, order, world.protos, cfg.tau, cfg.regime)]
    results = []
    g_prev = world.g0
    for k, task in enumerate(order, start=1):
        dd = {did: avg_domain_discrepancy(g_prev, world.g0, world.tasks[did]) for did in seq}
        try:
            res = train_stage(g_prev, world.g0, task, world.pool, cfg, world.protos, stage=k,
                              rng_key=(seed, seq_index), method=method, backend=backend)
        except DivergenceError as exc:
            exc.sequence = seq_index
            raise
        res.domain_discrepancy = dd
        results.append(res)
        g_prev = res.params
        rows.append(evaluate_row(g_prev, order, world.protos, cfg.tau, cfg.regime))
    return AccuracyMatrix(np.array(rows)), results
