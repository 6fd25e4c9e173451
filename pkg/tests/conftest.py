import os
import time
from concurrent.futures import ProcessPoolExecutor

import pytest

from dualteacher.config import METHODS, standard_config
from dualteacher.protocol import build_world, make_sequences, run_sequence


def _run_unit(method, seed, seq_index, seq):
    cfg = standard_config().with_(method=method)
    A, results = run_sequence(cfg, seq, seed=seed, seq_index=seq_index)
    stages = [(r.eta, r.domain_discrepancy, len(r.traces)) for r in results]
    return method, seed, seq_index, seq, A.values, stages


@pytest.fixture(scope="session")
def standard_runs():
    """Every method on every rotated sequence and seed of the shipped config.

    Maps (method, seed, seq_index) to (sequence, accuracy values, stage summaries),
    plus "components" -> {seed: pool component names} and "seconds" -> wall time.
    """
    t0 = time.perf_counter()
    cfg = standard_config()
    seqs = make_sequences(cfg.num_tasks, cfg.domain_ids)
    units = [(m, s, i, seq) for m in METHODS for s in cfg.seeds for i, seq in enumerate(seqs, start=1)]
    workers = min(8, os.cpu_count() or 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            done = list(ex.map(_run_unit, *zip(*units)))
    else:
        done = [_run_unit(*u) for u in units]
    out = {(m, s, i): (seq, A, stages) for m, s, i, seq, A, stages in done}
    out["components"] = {s: build_world(cfg, s).pool.components for s in cfg.seeds}
    out["seconds"] = time.perf_counter() - t0
    return out
