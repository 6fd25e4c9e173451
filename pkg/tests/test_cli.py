import csv
import io
import json
import subprocess
import sys
from pathlib import Path

import pytest

from helpers import SMALL_INI
from dualteacher.cli import EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, cmd_rank_ref, fmt, main
from dualteacher.metrics import aggregate
from dualteacher.selection import rank_reference

CSV_FILES = ("matrix", "traces", "eta_rank", "discrepancy")


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def ini(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text(SMALL_INI)
    return path


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "small.ini"
    cfg.write_text(SMALL_INI)
    assert main(["run", "--config", str(cfg), "--out", str(root / "ours")]) == EXIT_OK
    return root / "ours"


def _csv_bytes(out):
    return {p.relative_to(out): p.read_bytes() for p in sorted(Path(out).rglob("*.csv"))}


def test_run_writes_every_declared_file(small_run):
    K, seeds = 3, (0, 1)
    manifest = json.loads((small_run / "manifest.json").read_text())
    assert manifest["seeds"] == list(seeds) and manifest["method"] == "ours" and manifest["regime"] == "MTIL"
    assert manifest["sequences"] == {"S1": ["A", "B", "C"], "S2": ["B", "C", "A"], "S3": ["C", "A", "B"]}
    assert len(manifest["config_hash"]) == 64 and "timing" in manifest
    for seed in seeds:
        d = small_run / f"seed_{seed}"
        for i in range(1, K + 1):
            for kind in CSV_FILES:
                assert (d / f"{kind}_S{i}.csv").exists()
            matrix = _rows(d / f"matrix_S{i}.csv")
            assert matrix[0] == ["stage", "task_1", "task_2", "task_3"] and len(matrix) == K + 2
            assert [r[0] for r in matrix[1:]] == ["0", "1", "2", "3"]
            disc = _rows(d / f"discrepancy_S{i}.csv")
            assert disc[0] == ["stage", "domain_id", "avg_d"] and len(disc) == 1 + K * K
            traces = _rows(d / f"traces_S{i}.csv")
            assert traces[0] == ["stage", "step", "lr", "loss_total", "loss_ce", "loss_kd_prev", "loss_kd_pre",
                                 "eta_mean"]
            assert {r[0] for r in traces[1:]} == {"1", "2", "3"}
            ranks = _rows(d / f"eta_rank_S{i}.csv")
            assert ranks[0] == ["stage", "rank", "sample_id", "eta"] and len(ranks) == 1 + K * 120
        metrics = _rows(d / "metrics.csv")
        assert metrics[0] == ["sequence", "forgetting", "degradation", "avg_accuracy"]
        assert [r[0] for r in metrics[1:]] == ["S1", "S2", "S3"]
    assert len(_rows(small_run / "metrics.csv")) == K + 1


def test_seed_mean_metrics(small_run):
    per_seed = [_rows(small_run / f"seed_{s}" / "metrics.csv")[1:] for s in (0, 1)]
    mean = _rows(small_run / "metrics.csv")[1:]
    for i, row in enumerate(mean):
        expected = aggregate([[float(v) for v in rows[i][1:]] for rows in per_seed])
        assert [float(v) for v in row[1:]] == list(expected)


def test_csv_cells_are_precise_and_files_end_with_one_newline(small_run):
    for path in small_run.rglob("*.csv"):
        text = path.read_text()
        assert text.endswith("\n") and not text.endswith("\n\n")
    for row in _rows(small_run / "seed_0" / "traces_S1.csv")[1:]:
        for cell in row[2:]:
            mantissa = cell.split("e")[0].lstrip("-").replace(".", "")
            assert float(cell) == 0.0 or len(mantissa.lstrip("0")) >= 9
    assert fmt(0.1) == "0.10000000000000001" and float(fmt(1 / 3)) == 1 / 3
    assert fmt(0.0) == "0.0000000000000000" and fmt(7) == "7"


def test_rerun_is_byte_identical_and_jobs_do_not_matter(small_run, ini, tmp_path):
    out = tmp_path / "again"
    assert main(["run", "--config", str(ini), "--out", str(out), "--jobs", "2"]) == EXIT_OK
    assert _csv_bytes(out) == _csv_bytes(small_run)


def test_run_leaves_config_untouched(ini, tmp_path):
    before = ini.read_bytes()
    assert main(["run", "--config", str(ini), "--out", str(tmp_path / "o"), "--seeds", "3"]) == EXIT_OK
    assert ini.read_bytes() == before
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["seeds"] == [3]


def test_undefined_domain_is_a_usage_error(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text(SMALL_INI.replace("domains = A, B, C", "domains = A, B, Z"))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert "experiment.domains" in capsys.readouterr().err


@pytest.mark.parametrize("extra", [["--seeds", "1,1"], ["--jobs", "0"]])
def test_bad_run_flags(ini, tmp_path, extra):
    assert main(["run", "--config", str(ini), "--out", str(tmp_path / "o"), *extra]) == EXIT_USAGE


def test_divergence_exit_code(tmp_path, capsys):
    path = tmp_path / "hot.ini"
    path.write_text(SMALL_INI.replace("base_lr = 1e-2", "base_lr = 1e300"))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "o"), "--seeds", "0"]) == EXIT_DIVERGED
    assert "sequence S1, stage 1, step 1" in capsys.readouterr().err


# report -------------------------------------------------------------------------


def test_report_mean_matches_aggregate(small_run, ini, tmp_path):
    other = tmp_path / "cft"
    assert main(["run", "--config", str(ini), "--out", str(other), "--method", "continual_ft"]) == EXIT_OK
    assert main(["report", str(small_run), str(other), "--out", str(tmp_path / "rep")]) == EXIT_OK
    rows = _rows(tmp_path / "rep" / "summary.csv")
    assert rows[0] == ["method", "metric", "S1", "S2", "S3", "Mean"]
    assert [(r[0], r[1]) for r in rows[1:]] == [(m, n) for m in ("ours", "continual_ft")
                                                for n in ("forgetting", "degradation", "avg_accuracy")]
    for r in rows[1:]:
        cols = [float(v) for v in r[2:5]]
        assert abs(float(r[5]) - aggregate(cols)) <= 1e-12
    ours = _rows(small_run / "metrics.csv")[1:]
    assert [r[2:5] for r in rows[1:4]] == [[row[m] for row in ours] for m in (1, 2, 3)]


def test_report_errors(small_run, tmp_path):
    rep = str(tmp_path / "rep")
    assert main(["report", str(small_run), str(small_run), "--out", rep]) == EXIT_USAGE
    assert main(["report", str(tmp_path / "missing"), "--out", rep]) == EXIT_USAGE


# rank-ref -----------------------------------------------------------------------


def test_rank_ref_matches_stored_ranking(small_run):
    buf = io.StringIO()
    assert cmd_rank_ref(small_run, stage=2, k=10, stream=buf) == EXIT_OK
    printed = [line.split(",") for line in buf.getvalue().splitlines()]
    stored = [r for r in _rows(small_run / "seed_0" / "eta_rank_S1.csv")[1:] if r[0] == "2"]
    assert printed == stored[:10]
    assert [int(r[2]) for r in printed] == rank_reference([(int(r[2]), float(r[3])) for r in stored], 10)


def test_rank_ref_zero_and_errors(small_run, capsys):
    buf = io.StringIO()
    assert cmd_rank_ref(small_run, stage=1, k=0, stream=buf) == EXIT_OK and buf.getvalue() == ""
    assert main(["rank-ref", str(small_run), "--stage", "9"]) == EXIT_USAGE
    assert main(["rank-ref", str(small_run), "--stage", "1", "--k", "-1"]) == EXIT_USAGE
    assert main(["rank-ref", str(small_run), "--stage", "1", "--seed", "7"]) == EXIT_USAGE


def test_module_entry_point(small_run):
    proc = subprocess.run([sys.executable, "-m", "dualteacher", "rank-ref", str(small_run), "--stage", "3",
                           "--k", "2", "--sequence", "2", "--seed", "1"], capture_output=True, text=True)
    assert proc.returncode == EXIT_OK
    stored = [r for r in _rows(small_run / "seed_1" / "eta_rank_S2.csv")[1:] if r[0] == "3"]
    assert [line.split(",") for line in proc.stdout.splitlines()] == stored[:2]
