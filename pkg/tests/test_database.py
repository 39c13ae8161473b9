import sqlite3

import pytest

from mmesh.database import SUPPORTED_SCHEMA_VERSION, RunStore, SchemaVersionError, ensure_schema
from mmesh.flow import StepRecord


def test_fresh_database_gets_current_schema(tmp_path):
    db_file = str(tmp_path / "fresh.db")
    ensure_schema(db_file)

    conn = sqlite3.connect(db_file)
    assert conn.execute("PRAGMA user_version").fetchone()[0] == SUPPORTED_SCHEMA_VERSION == 1
    cols = [r[1] for r in conn.execute("PRAGMA table_info(history)").fetchall()]
    assert 'bdf_order' in cols
    tables = {r[0] for r in conn.execute("SELECT name FROM sqlite_master WHERE type = 'table'")}
    assert {'runs', 'history', 'summary'} <= tables
    conn.close()

    # running it again keeps existing rows
    store = RunStore(db_file)
    store.start_run("kept", "proposed", 8, "")
    ensure_schema(db_file)
    assert [r['name'] for r in store.list_runs()] == ["kept"]


def test_newer_schema_is_refused(tmp_path):
    db_file = str(tmp_path / "future.db")
    conn = sqlite3.connect(db_file)
    conn.execute("PRAGMA user_version = 9")
    conn.commit()
    conn.close()
    with pytest.raises(SchemaVersionError, match="newer than supported"):
        RunStore(db_file)


def record(step, I_h, order):
    return StepRecord(outer_iter=1, step=step, t=0.05 * step, I_h=I_h, min_vol=1e-3, min_height_M=0.5,
                      newton_iters=step * 3, cg_iters_total=step * 10, dt=0.05 if step else 0.0, order=order)


def test_run_store_workflow(tmp_path):
    store = RunStore(tmp_path / "runs.db")
    run_id = store.start_run("example", "proposed", 1600, "mesh.nx = 20\n")
    store.add_history(run_id, [record(0, 2.5, 0).as_row(), record(1, 2.4, 1).as_row(), record(2, 2.3, 2).as_row()])
    store.add_history(run_id, [])

    runs = store.list_runs()
    assert len(runs) == 1
    assert runs[0]['status'] == 'running'
    assert runs[0]['summary'] is None

    store.finish_run(run_id, "ok", summary={"Q_eq": 1.05, "NC": 1600})
    run = store.list_runs()[0]
    assert run['status'] == 'ok'
    assert run['finished_at'] is not None
    assert run['summary'] == {"NC": 1600, "Q_eq": 1.05}

    history = store.history(run_id)
    assert [h['step'] for h in history] == [0, 1, 2]
    assert [h['order'] for h in history] == [0, 1, 2]
    assert history[2]['cg_iters_total'] == 20


def test_failed_run_keeps_message(tmp_path):
    store = RunStore(str(tmp_path / "runs.db"))
    run_id = store.start_run("broken", "huang", 8, "")
    store.finish_run(run_id, "failed", message="Newton did not converge")
    run = store.list_runs()[0]
    assert run['status'] == 'failed'
    assert run['message'] == "Newton did not converge"
    with pytest.raises(ValueError):
        store.finish_run(run_id, "aborted")
