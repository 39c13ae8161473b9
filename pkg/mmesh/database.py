#
# Copyright 2025 The mmesh contributors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
#

"""SQLite run store: one row per run, its step history and its summary."""

import json
import logging
import sqlite3
from typing import Any, Dict, Iterable, List, Optional

logger = logging.getLogger(__name__)

# Database schema for run bookkeeping
RUNS_SCHEMA = '''
CREATE TABLE IF NOT EXISTS runs (
    run_id INTEGER PRIMARY KEY AUTOINCREMENT,
    name TEXT NOT NULL,
    functional TEXT NOT NULL,
    num_cells INTEGER NOT NULL,
    config TEXT NOT NULL,
    status TEXT NOT NULL DEFAULT 'running',
    message TEXT,
    started_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
    finished_at TIMESTAMP
);
CREATE INDEX IF NOT EXISTS idx_runs_status ON runs(status);
'''

HISTORY_SCHEMA = '''
CREATE TABLE IF NOT EXISTS history (
    run_id INTEGER NOT NULL,
    outer_iter INTEGER NOT NULL,
    step INTEGER NOT NULL,
    t REAL NOT NULL,
    I_h REAL NOT NULL,
    min_vol REAL,
    min_height_M REAL,
    newton_iters INTEGER,
    cg_iters_total INTEGER,
    dt REAL,
    bdf_order INTEGER,
    PRIMARY KEY (run_id, outer_iter, step),
    FOREIGN KEY (run_id) REFERENCES runs(run_id)
);
'''

SUMMARY_SCHEMA = '''
CREATE TABLE IF NOT EXISTS summary (
    run_id INTEGER PRIMARY KEY,
    data TEXT NOT NULL,
    FOREIGN KEY (run_id) REFERENCES runs(run_id)
);
'''

SUPPORTED_SCHEMA_VERSION = 1

RUN_STATUSES = ("running", "ok", "failed")


class SchemaVersionError(RuntimeError):
    """The database was written by a newer mmesh."""


def _apply_script_tolerant(conn: sqlite3.Connection, script: str):
    # CREATE statements are idempotent; failures on re-runs are expected
    for stmt in [s.strip() for s in script.split(';') if s.strip()]:
        try:
            conn.execute(stmt)
        except sqlite3.OperationalError:
            pass


def ensure_schema(db_path: str):
    """Create the run database tables and stamp the schema version.

    A database with a newer user_version is refused.
    """
    conn = sqlite3.connect(db_path)
    try:
        current_version = conn.execute("PRAGMA user_version").fetchone()[0] or 0
        if current_version > SUPPORTED_SCHEMA_VERSION:
            raise SchemaVersionError(
                f"Database schema version {current_version} is newer than supported "
                f"{SUPPORTED_SCHEMA_VERSION}. Please upgrade mmesh.")

        _apply_script_tolerant(conn, RUNS_SCHEMA)
        _apply_script_tolerant(conn, HISTORY_SCHEMA)
        _apply_script_tolerant(conn, SUMMARY_SCHEMA)

        conn.execute(f"PRAGMA user_version = {SUPPORTED_SCHEMA_VERSION}")
        conn.commit()
    finally:
        conn.close()


class RunStore:
    """Bookkeeping of runs in an SQLite file next to the CSV artifacts.

    Args:
        db_path: Path to the SQLite database file
    """

    def __init__(self, db_path: str):
        self.db_path = str(db_path)
        self._init_db()

    def _init_db(self):
        ensure_schema(self.db_path)
        logger.debug(f"Initialized run store in {self.db_path}")

    def _connect(self) -> sqlite3.Connection:
        return sqlite3.connect(self.db_path)

    def start_run(self, name: str, functional: str, num_cells: int, config_text: str) -> int:
        conn = self._connect()
        try:
            cursor = conn.execute(
                "INSERT INTO runs (name, functional, num_cells, config) VALUES (?, ?, ?, ?)",
                (name, functional, int(num_cells), config_text))
            conn.commit()
            run_id = int(cursor.lastrowid)
        finally:
            conn.close()
        logger.debug(f"Started run {run_id} ({name}, {functional}, NC={num_cells})")
        return run_id

    def add_history(self, run_id: int, rows: Iterable[Dict[str, Any]]):
        """Insert history rows (StepRecord.as_row() dictionaries)."""
        data = [(run_id, r["outer_iter"], r["step"], r["t"], r["I_h"], r["min_vol"], r["min_height_M"],
                 r["newton_iters"], r["cg_iters_total"], r["dt"], r["order"]) for r in rows]
        if not data:
            return
        conn = self._connect()
        try:
            conn.executemany("""
                INSERT OR REPLACE INTO history
                (run_id, outer_iter, step, t, I_h, min_vol, min_height_M, newton_iters, cg_iters_total, dt, bdf_order)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
            """, data)
            conn.commit()
        finally:
            conn.close()

    def finish_run(self, run_id: int, status: str, message: Optional[str] = None,
                   summary: Optional[Dict[str, Any]] = None):
        if status not in RUN_STATUSES:
            raise ValueError(f"status must be one of {', '.join(RUN_STATUSES)}, got '{status}'")
        conn = self._connect()
        try:
            conn.execute(
                "UPDATE runs SET status = ?, message = ?, finished_at = CURRENT_TIMESTAMP WHERE run_id = ?",
                (status, message, run_id))
            if summary is not None:
                conn.execute("INSERT OR REPLACE INTO summary (run_id, data) VALUES (?, ?)",
                             (run_id, json.dumps(summary, sort_keys=True)))
            conn.commit()
        finally:
            conn.close()
        logger.debug(f"Run {run_id} finished with status {status}")

    def list_runs(self) -> List[Dict[str, Any]]:
        conn = self._connect()
        try:
            cursor = conn.execute("""
                SELECT r.run_id, r.name, r.functional, r.num_cells, r.status, r.message,
                       r.started_at, r.finished_at, s.data
                FROM runs r LEFT JOIN summary s ON s.run_id = r.run_id
                ORDER BY r.run_id
            """)
            runs = []
            for row in cursor.fetchall():
                run_id, name, functional, nc, status, message, started, finished, data = row
                runs.append({
                    'run_id': run_id, 'name': name, 'functional': functional, 'num_cells': nc,
                    'status': status, 'message': message, 'started_at': started, 'finished_at': finished,
                    'summary': json.loads(data) if data else None,
                })
            return runs
        finally:
            conn.close()

    def history(self, run_id: int) -> List[Dict[str, Any]]:
        conn = self._connect()
        try:
            cursor = conn.execute("""
                SELECT outer_iter, step, t, I_h, min_vol, min_height_M, newton_iters, cg_iters_total, dt, bdf_order
                FROM history WHERE run_id = ? ORDER BY outer_iter, step
            """, (run_id,))
            keys = ("outer_iter", "step", "t", "I_h", "min_vol", "min_height_M", "newton_iters",
                    "cg_iters_total", "dt", "order")
            return [dict(zip(keys, row)) for row in cursor.fetchall()]
        finally:
            conn.close()
