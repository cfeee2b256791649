import math
import sqlite3

import pytest

from backend import database
from backend.schemas import MetricReport


@pytest.fixture
def db_path(tmp_path):
    path = str(tmp_path / "runs.db")
    database.init_db(path)
    return path


def test_init_creates_tables(db_path):
    conn = sqlite3.connect(db_path)
    names = {row[0] for row in conn.execute("SELECT name FROM sqlite_master WHERE type = 'table'")}
    conn.close()
    assert {"runs", "metrics"} <= names


def test_init_is_idempotent(db_path):
    run_id = database.record_run("simulate", {"seed": 1}, db_path=db_path)
    database.init_db(db_path)
    assert database.get_run(run_id, db_path=db_path) is not None


def test_record_and_get_run(db_path):
    manifest = {"scene": {"kind": "sphere"}, "pattern": {"k": 8}}
    run_id = database.record_run("separate", manifest, out_dir="/tmp/out",
                                 diagnostics={"phase_deg": 12.5}, db_path=db_path)
    run = database.get_run(run_id, db_path=db_path)
    assert run["subcommand"] == "separate"
    assert run["manifest"] == manifest
    assert run["diagnostics"] == {"phase_deg": 12.5}
    assert run["out_dir"] == "/tmp/out"
    assert run["status"] == "ok"


def test_failed_run_keeps_status(db_path):
    run_id = database.record_run("evaluate", {}, status="MissingInputError", db_path=db_path)
    run = database.get_run(run_id, db_path=db_path)
    assert run["status"] == "MissingInputError"
    assert run["diagnostics"] == {}


def test_unknown_run(db_path):
    assert database.get_run("no-such-id", db_path=db_path) is None
    assert database.delete_run("no-such-id", db_path=db_path) is False


def test_metric_rows_keep_infinite_psnr(db_path):
    run_id = database.record_run("sweep", {}, db_path=db_path)
    rows = [
        MetricReport(scene="sphere", pattern="random", k=4, solver="l2",
                     psnr_diffuse=30.5, psnr_specular=25.25, psnr_sum=41.0, wall_time_s=0.75),
        MetricReport(scene="flat", pattern="regular", k=16, solver="huber",
                     psnr_diffuse=math.inf, psnr_specular=math.inf, psnr_sum=math.inf),
    ]
    assert database.add_metric_rows(run_id, rows, db_path=db_path) == 2
    back = database.get_run_metrics(run_id, db_path=db_path)
    assert [(r.scene, r.k, r.solver) for r in back] == [("sphere", 4, "l2"), ("flat", 16, "huber")]
    assert back[0].psnr_sum == 41.0 and back[0].wall_time_s == 0.75
    assert back[1].psnr_diffuse == math.inf


def test_get_all_runs_filters_and_orders(db_path):
    first = database.record_run("simulate", {}, db_path=db_path)
    second = database.record_run("sweep", {}, db_path=db_path)
    third = database.record_run("simulate", {}, db_path=db_path)
    assert [r["id"] for r in database.get_all_runs(db_path=db_path)] == [third, second, first]
    assert [r["id"] for r in database.get_all_runs("simulate", db_path=db_path)] == [third, first]


def test_delete_run_removes_metrics(db_path):
    run_id = database.record_run("evaluate", {}, db_path=db_path)
    database.add_metric_rows(run_id, [MetricReport(psnr_diffuse=1.0, psnr_specular=2.0, psnr_sum=3.0)],
                             db_path=db_path)
    assert database.delete_run(run_id, db_path=db_path) is True
    assert database.get_run(run_id, db_path=db_path) is None
    assert database.get_run_metrics(run_id, db_path=db_path) == []
