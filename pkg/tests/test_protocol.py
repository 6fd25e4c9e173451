import math
import pickle
from dataclasses import replace

import numpy as np
import pytest

from helpers import small_config
from dualteacher.errors import DivergenceError, EmptyInputError
from dualteacher.metrics import MCIL, sequence_metrics
from dualteacher.model import LabeledBatch, ce_loss_and_grad, encode_batch
from dualteacher.protocol import _TASK, baseline_loss, build_world, make_sequences, run_sequence, train_stage

DATASETS = ("Aircraft", "DTD", "EuroSAT", "Flowers", "Food", "Pets", "Cars", "UCF101")


def test_rotations_small():
    assert make_sequences(3) == [(1, 2, 3), (2, 3, 1), (3, 1, 2)]
    assert make_sequences(1) == [(1,)]


def test_rotations_of_the_eight_dataset_order():
    seqs = make_sequences(8, DATASETS)
    assert seqs[1][0] == "DTD" and seqs[1][-1] == "Aircraft"
    assert seqs[7] == ("UCF101", "Aircraft", "DTD", "EuroSAT", "Flowers", "Food", "Pets", "Cars")
    for i, seq in enumerate(seqs, start=1):
        assert seq == tuple(DATASETS[((i + j - 2) % 8)] for j in range(1, 9))
    # every dataset appears once per position
    assert all(sorted(col) == sorted(DATASETS) for col in zip(*seqs))


def test_rotation_errors():
    with pytest.raises(ValueError):
        make_sequences(0)
    with pytest.raises(ValueError):
        make_sequences(3, ("a", "b"))


# stage trainer ------------------------------------------------------------------


@pytest.fixture(scope="module")
def small():
    cfg = small_config()
    return cfg, build_world(cfg, 0)


def _stage(cfg, world, method, domain="A", g_prev=None, stage=1, pool="world"):
    return train_stage(world.g0 if g_prev is None else g_prev, world.g0, world.tasks[domain],
                       world.pool if pool == "world" else pool, cfg, world.protos, stage=stage,
                       rng_key=(0, 1), method=method)


def test_zero_epochs_returns_previous_params(small):
    cfg, world = small
    cfg = cfg.with_(training=replace(cfg.training, epochs=0))
    for method in ("ours", "continual_ft", "lwf"):
        res = _stage(cfg, world, method)
        assert res.params.identical(world.g0) and res.traces == []


def test_trace_length_equals_steps(small):
    cfg, world = small
    res = _stage(cfg, world, "ours")
    n_train = len(world.tasks["A"].train()[1])
    assert len(res.traces) == cfg.training.epochs * math.ceil(n_train / cfg.training.task_batch)
    assert [r.step for r in res.traces] == list(range(len(res.traces)))


def test_first_step_starts_from_previous_params(small):
    cfg, world = small
    task = world.tasks["B"]
    X, y = task.train()
    res = _stage(cfg, world, "continual_ft", "B")
    perm = np.random.default_rng([0, 1, 1, _TASK]).permutation(len(y))[:cfg.training.task_batch]
    ce, _ = ce_loss_and_grad(world.g0, LabeledBatch(X[perm], y[perm]), world.protos.subset(task.label_ids), cfg.tau)
    assert res.traces[0].loss_ce == ce


def test_single_step_matches_hand_applied_update(small):
    cfg, world = small
    cfg = cfg.with_(training=replace(cfg.training, epochs=1, task_batch=1000))
    task = world.tasks["A"]
    X, y = task.train()
    res = _stage(cfg, world, "continual_ft")
    assert len(res.traces) == 1
    perm = np.random.default_rng([0, 1, 1, _TASK]).permutation(len(y))
    _, g = ce_loss_and_grad(world.g0, LabeledBatch(X[perm], y[perm]), world.protos.subset(task.label_ids), cfg.tau)
    lr, wd, eps = cfg.optimizer.base_lr, cfg.optimizer.weight_decay, cfg.optimizer.eps
    # first bias-corrected moments are g and g**2
    expected = [t - lr * (gi / (np.abs(gi) + eps) + wd * t) for t, gi in zip(world.g0.arrays(), g.arrays())]
    for got, want in zip(res.params.arrays(), expected):
        np.testing.assert_allclose(got, want, rtol=1e-13, atol=1e-16)


def test_teacher_caches_unchanged_within_stage(small):
    cfg, world = small
    _, results = run_sequence(cfg, cfg.domain_ids, seed=0, world=world)
    for r in results:
        assert r.teacher_hash_start and r.teacher_hash_start == r.teacher_hash_end


def test_stage_one_selection_sits_at_the_offset(small):
    cfg, world = small
    res = _stage(cfg, world, "ours")
    z = -cfg.selection.delta / cfg.selection.gamma
    assert np.all(res.discrepancy == 0.0)
    assert np.allclose(res.eta, 1 / (1 + math.exp(-z)), rtol=0, atol=1e-15)


def test_reference_methods_need_a_pool(small):
    cfg, world = small
    with pytest.raises(EmptyInputError):
        _stage(cfg, world, "distill_pre", pool=None)


# method lattice -----------------------------------------------------------------


def _losses(cfg, world, method):
    _, results = run_sequence(cfg, cfg.domain_ids, seed=0, world=world, method=method)
    return np.array([t.loss_total for r in results for t in r.traces])


def test_forced_previous_teacher_matches_distill_prev(small):
    cfg, world = small
    forced = cfg.with_(selection=replace(cfg.selection, delta=-1e6, lam=1.0))
    ours, base = _losses(forced, world, "ours"), _losses(forced, world, "distill_prev")
    assert len(ours) == len(base) > 0
    assert np.max(np.abs(ours - base)) <= 1e-12


def test_forced_pretrained_teacher_matches_distill_pre(small):
    cfg, world = small
    forced = cfg.with_(selection=replace(cfg.selection, delta=1e6))
    ours, base = _losses(forced, world, "ours"), _losses(forced, world, "distill_pre")
    assert np.max(np.abs(ours - base)) <= 1e-12


def test_empty_reference_batch_matches_continual_ft(small):
    cfg, world = small
    empty = cfg.with_(training=replace(cfg.training, ref_batch=0))
    ours, base = _losses(empty, world, "ours"), _losses(empty, world, "continual_ft")
    assert np.max(np.abs(ours - base)) <= 1e-12


def test_baselines_at_stage_one(small):
    cfg, world = small
    X, y = world.tasks["A"].train()
    batch = LabeledBatch(X[:10], y[:10])
    protos = world.protos.subset(world.tasks["A"].label_ids)
    f0 = encode_batch(world.g0, X[:10])
    lwf = baseline_loss("lwf", world.g0, batch, protos, cfg.tau, task_teacher=f0)
    pre = baseline_loss("distill_pre", world.g0, batch, protos, cfg.tau, ref_inputs=X[:10], f_pre=f0)
    ce, _ = ce_loss_and_grad(world.g0, batch, protos, cfg.tau)
    assert lwf.loss == pre.loss == ce
    assert lwf.grad.identical(pre.grad)
    with pytest.raises(ValueError):
        baseline_loss("ours", world.g0, batch, protos, cfg.tau)


# sequence runner ----------------------------------------------------------------


def test_single_domain_matrix_shape():
    cfg = small_config()
    cfg = cfg.with_(domains=cfg.domains[:1])
    A, results = run_sequence(cfg, cfg.domain_ids)
    assert A.values.shape == (2, 1) and len(results) == 1


def test_full_run_is_bitwise_deterministic():
    cfg = small_config()
    A1, r1 = run_sequence(cfg, ("B", "C", "A"), seed=1, seq_index=2, world=build_world(cfg, 1))
    build_world.cache_clear()
    A2, r2 = run_sequence(cfg, ("B", "C", "A"), seed=1, seq_index=2)
    assert A1.values.tobytes() == A2.values.tobytes()
    assert all(a.params.identical(b.params) for a, b in zip(r1, r2))
    assert [a.traces for a in r1] == [b.traces for b in r2]


def test_merged_label_space_never_beats_per_task(small):
    cfg, world = small
    A_t, _ = run_sequence(cfg, cfg.domain_ids, world=world)
    A_c, _ = run_sequence(cfg.with_(regime=MCIL), cfg.domain_ids, world=world)
    assert np.all(A_c.values <= A_t.values)


def test_divergence_names_sequence_stage_and_step():
    cfg = small_config()
    cfg = cfg.with_(optimizer=replace(cfg.optimizer, base_lr=1e300))
    with pytest.raises(DivergenceError) as info:
        run_sequence(cfg, cfg.domain_ids, seq_index=3)
    exc = info.value
    assert (exc.sequence, exc.stage, exc.step) == (3, 1, 1)
    again = pickle.loads(pickle.dumps(exc))
    assert (again.sequence, again.stage, again.step, str(again)) == (3, 1, 1, str(exc))


# standard run -------------------------------------------------------------------


@pytest.mark.slow
def test_plain_fine_tuning_forgets_the_first_task(standard_runs):
    drops = [100 * (A[1, 0] - A[-1, 0]) for (m, s, i), (_, A, _) in _items(standard_runs)
             if m == "continual_ft" and i == 1]
    assert len(drops) == 5
    assert np.mean(drops) >= 5.0


@pytest.mark.slow
def test_every_run_has_full_matrix_and_stage_traces(standard_runs):
    for (m, s, i), (seq, A, stages) in _items(standard_runs):
        K = len(seq)
        assert A.shape == (K + 1, K) and len(stages) == K
        assert all(n > 0 for _, _, n in stages)


@pytest.mark.slow
def test_sequence_metrics_finite_and_nonnegative(standard_runs):
    for (m, s, i), (_, A, _) in _items(standard_runs):
        metrics = sequence_metrics(A)
        assert all(math.isfinite(v) and v >= 0 for v in metrics)


def _items(runs):
    return [(k, v) for k, v in runs.items() if isinstance(k, tuple)]
