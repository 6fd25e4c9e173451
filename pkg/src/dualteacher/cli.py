"""Command-line runner: ``run`` trains every rotated sequence for every seed,
``report`` tabulates metrics across runs, ``rank-ref`` lists the highest-eta
reference samples of a stage.

Output layout of ``run --out DIR``::

    DIR/manifest.json               config hash, seeds, method, regime, paths, timing
    DIR/config.ini                  the resolved config (overrides applied)
    DIR/metrics.csv                 per-sequence metrics, averaged over seeds
    DIR/seed_<s>/metrics.csv        per-sequence metrics for one seed
    DIR/seed_<s>/matrix_S<i>.csv    (K+1) x K accuracy matrix, fractions
    DIR/seed_<s>/traces_S<i>.csv    per-step losses and lr
    DIR/seed_<s>/eta_rank_S<i>.csv  every pool sample ranked by eta, per stage
    DIR/seed_<s>/discrepancy_S<i>.csv  mean teacher discrepancy per domain, per stage

Exit status: 0 success, 2 usage or config error, 3 numeric divergence.
"""
import argparse
import csv
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import kernels
from .config import METHODS, REGIMES, config_hash, load_config, to_ini
from .errors import ConfigError, DivergenceError
from .metrics import aggregate, sequence_metrics
from .protocol import make_sequences, run_sequence
from .selection import rank_reference

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3
METRIC_NAMES = ("forgetting", "degradation", "avg_accuracy")


class UsageError(Exception):
    pass


def fmt(v):
    """CSV cell text: integers as-is, floats with 17 significant digits (exact round trip)."""
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, int)) or hasattr(v, "dtype") and v.dtype.kind in "iu":
        return str(int(v))
    return format(float(v), "#.17g")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror}") from None
    if not rows:
        raise UsageError(f"{path}: empty file")
    return rows[0], rows[1:]


def _seq_name(i):
    return f"S{i}"


# run --------------------------------------------------------------------


def _run_unit(cfg, seed, seq_index, seq, seed_dir):
    """One (seed, sequence) job; writes its four files and returns its metrics."""
    t0 = time.perf_counter()
    A, results = run_sequence(cfg, seq, seed=seed, seq_index=seq_index)
    K = A.num_tasks
    name = _seq_name(seq_index)
    paths = {
        "matrix": seed_dir / f"matrix_{name}.csv",
        "traces": seed_dir / f"traces_{name}.csv",
        "eta_rank": seed_dir / f"eta_rank_{name}.csv",
        "discrepancy": seed_dir / f"discrepancy_{name}.csv",
    }
    write_csv(paths["matrix"], ["stage"] + [f"task_{j}" for j in range(1, K + 1)],
              ([i] + list(row) for i, row in enumerate(A.values)))
    write_csv(paths["traces"],
              ["stage", "step", "lr", "loss_total", "loss_ce", "loss_kd_prev", "loss_kd_pre", "eta_mean"],
              ([r.stage] + list(t) for r in results for t in r.traces))
    write_csv(paths["discrepancy"], ["stage", "domain_id", "avg_d"],
              ([r.stage, did, r.domain_discrepancy[did]] for r in results for did in seq))
    rank_rows = []
    for r in results:
        eta_of = dict(enumerate(r.eta.tolist()))
        for rank, sid in enumerate(rank_reference(eta_of.items(), len(eta_of)), start=1):
            rank_rows.append([r.stage, rank, sid, eta_of[sid]])
    write_csv(paths["eta_rank"], ["stage", "rank", "sample_id", "eta"], rank_rows)
    return seed, seq_index, tuple(sequence_metrics(A)), {k: str(p) for k, p in paths.items()}, \
        time.perf_counter() - t0


def _parse_seeds(text):
    try:
        seeds = tuple(int(t) for t in text.replace(" ", "").split(",") if t)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed required")
    return seeds


def cmd_run(config_path, out_dir, seeds=None, method=None, regime=None, jobs=1):
    t0 = time.perf_counter()
    try:
        cfg = load_config(config_path)
        overrides = {k: v for k, v in (("seeds", seeds), ("method", method), ("regime", regime)) if v is not None}
        cfg = cfg.with_(**overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if len(set(cfg.seeds)) != len(cfg.seeds):
        print("config error: experiment.seeds: duplicate seed", file=sys.stderr)
        return EXIT_USAGE
    out = Path(out_dir)
    sequences = make_sequences(cfg.num_tasks, cfg.domain_ids)
    units = []
    for seed in cfg.seeds:
        seed_dir = out / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        units += [(cfg, seed, i, seq, seed_dir) for i, seq in enumerate(sequences, start=1)]

    try:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                done = list(pool.map(_run_unit, *zip(*units)))
        else:
            done = [_run_unit(*u) for u in units]
    except DivergenceError as exc:
        print(f"diverged: sequence {_seq_name(exc.sequence)}, stage {exc.stage}, step {exc.step}: {exc}",
              file=sys.stderr)
        return EXIT_DIVERGED

    by_seed = {}
    for seed, i, metrics, paths, secs in done:
        by_seed.setdefault(seed, {})[i] = (metrics, paths, secs)
    header = ["sequence", *METRIC_NAMES]
    for seed in cfg.seeds:
        write_csv(out / f"seed_{seed}" / "metrics.csv", header,
                  ([_seq_name(i), *by_seed[seed][i][0]] for i in sorted(by_seed[seed])))
    mean_rows = []
    for i in range(1, len(sequences) + 1):
        mean_rows.append([_seq_name(i), *aggregate(by_seed[s][i][0] for s in cfg.seeds)])
    write_csv(out / "metrics.csv", header, mean_rows)
    (out / "config.ini").write_text(to_ini(cfg))

    manifest = {
        "config_hash": config_hash(cfg),
        "config_path": str(config_path),
        "seeds": list(cfg.seeds),
        "method": cfg.method,
        "regime": cfg.regime,
        "domains": list(cfg.domain_ids),
        "sequences": {_seq_name(i): list(seq) for i, seq in enumerate(sequences, start=1)},
        "outputs": {str(s): {_seq_name(i): by_seed[s][i][1] for i in sorted(by_seed[s])} for s in cfg.seeds},
        "metrics": str(out / "metrics.csv"),
        "backend": kernels.BACKEND,
        "jobs": jobs,
        "timing": {
            "total_seconds": time.perf_counter() - t0,
            "per_sequence_seconds": {str(s): {_seq_name(i): by_seed[s][i][2] for i in sorted(by_seed[s])}
                                     for s in cfg.seeds},
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return EXIT_OK


# report -----------------------------------------------------------------


def _load_run(out_dir):
    out_dir = Path(out_dir)
    try:
        manifest = json.loads((out_dir / "manifest.json").read_text())
    except OSError as exc:
        raise UsageError(f"{out_dir}: no run manifest ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{out_dir}/manifest.json: {exc}") from None
    header, rows = read_csv(out_dir / "metrics.csv")
    if header != ["sequence", *METRIC_NAMES]:
        raise UsageError(f"{out_dir}/metrics.csv: unexpected header {header}")
    names = [r[0] for r in rows]
    if names != [_seq_name(i) for i in range(1, len(rows) + 1)]:
        raise UsageError(f"{out_dir}/metrics.csv: sequences must be S1..SK in order, got {names}")
    try:
        values = [[float(v) for v in r[1:]] for r in rows]
    except ValueError as exc:
        raise UsageError(f"{out_dir}/metrics.csv: {exc}") from None
    return manifest, values


def cmd_report(out_dirs, out):
    """Method x sequence table of every metric with a Mean column."""
    try:
        runs = [(d, *_load_run(d)) for d in out_dirs]
        if not runs:
            raise UsageError("no run directories given")
        K = len(runs[0][2])
        seen = {}
        for d, manifest, values in runs:
            if len(values) != K:
                raise UsageError(f"{d}: {len(values)} sequences, expected {K}")
            if manifest.get("regime") != runs[0][1].get("regime"):
                raise UsageError(f"{d}: regime {manifest.get('regime')} differs from {runs[0][1].get('regime')}")
            method = manifest.get("method")
            if method in seen:
                raise UsageError(f"{d}: method {method!r} already reported from {seen[method]}")
            seen[method] = d
    except UsageError as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    rows = []
    for _, manifest, values in runs:
        for m, name in enumerate(METRIC_NAMES):
            col = [v[m] for v in values]
            rows.append([manifest["method"], name, *col, aggregate(col)])
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "summary.csv", ["method", "metric", *(_seq_name(i) for i in range(1, K + 1)), "Mean"], rows)
    return EXIT_OK


# rank-ref ---------------------------------------------------------------


def cmd_rank_ref(out_dir, stage, k, sequence=1, seed=None, stream=None):
    """Print the top-k ``stage,rank,sample_id,eta`` rows of one stored ranking."""
    stream = stream or sys.stdout
    try:
        if k < 0:
            raise UsageError(f"k must be >= 0, got {k}")
        manifest, _ = _load_run(out_dir)
        seed = manifest["seeds"][0] if seed is None else seed
        if seed not in manifest["seeds"]:
            raise UsageError(f"seed {seed} not in run (seeds {manifest['seeds']})")
        path = Path(out_dir) / f"seed_{seed}" / f"eta_rank_{_seq_name(sequence)}.csv"
        header, rows = read_csv(path)
        if header != ["stage", "rank", "sample_id", "eta"]:
            raise UsageError(f"{path}: unexpected header {header}")
        rows = [r for r in rows if int(r[0]) == stage]
        if not rows:
            raise UsageError(f"{path}: no stage {stage}")
    except UsageError as exc:
        print(f"rank-ref error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    text = {int(r[2]): r for r in rows}
    for sid in rank_reference([(int(r[2]), float(r[3])) for r in rows], k):
        print(",".join(text[sid]), file=stream)
    return EXIT_OK


# entry point ------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="dualteacher", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train all rotated sequences for every seed")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seeds", type=_parse_seeds, help="comma-separated, overrides the config")
    r.add_argument("--method", choices=METHODS)
    r.add_argument("--regime", choices=REGIMES)
    r.add_argument("--jobs", type=int, default=1, help="worker processes (one per seed x sequence)")

    rep = sub.add_parser("report", help="tabulate metrics.csv from one or more runs")
    rep.add_argument("out_dirs", nargs="+")
    rep.add_argument("--out", required=True, help="directory for summary.csv")

    rr = sub.add_parser("rank-ref", help="top-k reference samples by eta for a stage")
    rr.add_argument("out_dir")
    rr.add_argument("--stage", type=int, required=True)
    rr.add_argument("--k", type=int, default=25)
    rr.add_argument("--sequence", type=int, default=1)
    rr.add_argument("--seed", type=int)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "run":
        if args.jobs < 1:
            print("usage error: --jobs must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        return cmd_run(args.config, args.out, args.seeds, args.method, args.regime, args.jobs)
    if args.command == "report":
        return cmd_report(args.out_dirs, args.out)
    return cmd_rank_ref(args.out_dir, args.stage, args.k, args.sequence, args.seed)


if __name__ == "__main__":
    sys.exit(main())
